#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "tresnet/data.hpp"
#include "tresnet/model.hpp"
#include "tresnet/training.hpp"

namespace tresnet {

/// Per-shift point estimates with diagnostics. Ensemble quantiles are filled
/// only by bootstrap_ensemble.
struct SrfEstimate {
    std::vector<ShiftSpec> shifts;
    std::vector<double> psi_plugin;
    std::vector<double> psi_aipw;
    std::vector<double> psi_tr;
    std::vector<double> eee_residual;
    std::vector<double> eif_variance;
    std::vector<double> q25, q50, q75;  // empty unless an ensemble ran
};

/// Plugin: average predicted mean at the shifted exposures.
std::vector<double> plugin_srf(const TresnetModel& model, const Dataset& data, const ShiftFamily& shifts);

/// Plugin plus the ratio-weighted residual debiasing term.
std::vector<double> aipw_srf(const TresnetModel& model, const Dataset& data, const ShiftFamily& shifts);

/// Average fluctuated mean at the shifted exposures; requires the fluctuation
/// refit to have run.
std::vector<double> tr_srf(const TresnetModel& model, const Dataset& data, const ShiftFamily& shifts);

/// All estimators plus diagnostics in one pass over the model outputs.
SrfEstimate estimate_srf(const TresnetModel& model, const Dataset& data, const ShiftFamily& shifts);

/// Column-based estimators for externally supplied nuisances (oracles or
/// deliberate corruptions). w_obs and mu_shift are n x J row-major.
std::vector<double> plugin_from_columns(std::span<const double> mu_shift, std::int64_t n, std::size_t j_count);
std::vector<double> aipw_from_columns(std::span<const double> w_obs, std::span<const double> mu_obs,
                                      std::span<const double> mu_shift, std::span<const double> y,
                                      std::int64_t n, std::size_t j_count);

struct EifResult {
    std::vector<double> phi;       // n x J row-major per-unit influence values
    std::vector<double> variance;  // per shift: sample variance of phi / n
};

/// Influence values phi_ij = w_ij (y_i - mu_i) + mu~_ij - psi_j and their
/// normalized sample variance.
EifResult eif(std::span<const double> psi, std::span<const double> w_obs, std::span<const double> mu_obs,
              std::span<const double> mu_shift, std::span<const double> y, std::int64_t n,
              std::size_t j_count);

/// Weighted residual of the fluctuated model for one shift; near zero after
/// the refit.
double eee_residual(const TresnetModel& model, const Dataset& data, const ShiftFamily& shifts,
                    std::size_t shift);

/// Fixed-exposure mean curve: average predicted mean with every unit set to
/// each grid value in turn.
std::vector<double> erf_plugin(const TresnetModel& model, const Dataset& data,
                               std::span<const double> a_grid);
std::vector<double> erf_plugin_from_mu(const std::function<double(std::span<const double>, double)>& mu,
                                       const Dataset& data, std::span<const double> a_grid);

struct EnsembleResult {
    std::vector<double> q25, q50, q75;           // per shift
    std::vector<std::vector<double>> member_psi;  // surviving members, in member order
    std::size_t failed = 0;
};

/// Trains B models on with-replacement resamples with per-member seeds and
/// summarizes the targeted estimates by quartiles. Members that diverge are
/// excluded; more than half must survive.
EnsembleResult bootstrap_ensemble(const Dataset& data, const ShiftFamily& shifts, const ModelConfig& mcfg,
                                  const TrainConfig& tcfg, std::size_t b, std::size_t jobs = 1);

/// Test hook: as above but with explicit per-member seeds.
EnsembleResult bootstrap_ensemble_seeded(const Dataset& data, const ShiftFamily& shifts,
                                         const ModelConfig& mcfg, const TrainConfig& tcfg,
                                         std::span<const std::uint64_t> member_seeds, std::size_t jobs = 1);

/// Lower quartile / median / upper quartile with linear interpolation.
double quantile(std::vector<double> values, double q);

}  // namespace tresnet
