#pragma once

#include <string>

#include "tresnet/autodiff.hpp"
#include "tresnet/errors.hpp"

namespace tresnet {

/// Outcome families with canonical link. The log-partition `cumulant` and its
/// derivative `mean_from_natural` drive both the likelihood losses and the
/// fluctuation solver.
enum class Family { Gaussian, Poisson, Bernoulli };

Family family_from_name(const std::string& name);
const std::string& family_name(Family f);

/// Log-partition: gaussian eta^2/2, poisson e^eta, bernoulli log(1 + e^eta).
double cumulant(Family f, double eta);

/// Inverse canonical link, equal to the cumulant derivative.
double mean_from_natural(Family f, double eta);

/// Canonical link; rejects means outside the family's mean domain.
double natural_from_mean(Family f, double mu);

/// Per-sample negative log-likelihood up to outcome-only constants:
/// cumulant(eta) - y * eta. Rejects outcomes outside the family domain.
double nll(Family f, double eta, double y);

/// Domain check used by dataset validation and the losses.
void check_outcome_domain(Family f, double y);

/// Tape expression for the cumulant applied elementwise to a natural-parameter
/// tensor; composes only enumerated primitives so it is differentiable.
ad::Tensor cumulant_expr(ad::Tape& tape, Family f, const ad::Tensor& eta);

}  // namespace tresnet
