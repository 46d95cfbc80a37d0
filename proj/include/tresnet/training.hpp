#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tresnet/data.hpp"
#include "tresnet/model.hpp"
#include "tresnet/shifts.hpp"

namespace tresnet {

/// How the fluctuation enters the targeted-regularization risk. The weighted
/// offset multiplies the per-sample likelihood by the estimated density ratio
/// and perturbs the natural parameter by a constant; the covariate form
/// perturbs the natural parameter by epsilon times the ratio instead and
/// leaves the likelihood unweighted. Both zero the same weighted residual at
/// their stationary point.
enum class TrMode { WeightedOffset, CleverCovariate };

TrMode tr_mode_from_name(const std::string& name);
const std::string& tr_mode_name(TrMode m);

struct TrainConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int epochs = 1000;
    int batch_size = 0;  // 0 = full batch when n <= 5000, else 256
    double alpha = 1.0;  // density-ratio risk weight
    double beta0 = 1.0;  // targeted-regularization scale; weight is beta0 / sqrt(n)
    // The regularizer's density-ratio factor is held constant by default:
    // letting its gradient reach the ratio heads lets them inflate the weights
    // wherever the fluctuated likelihood is negative, which saturates the
    // ratio clamp and destroys the classifier.
    bool detach_ratio_in_tr = true;
    TrMode tr_mode = TrMode::WeightedOffset;
    std::uint64_t seed = 0;

    void validate() const;
    std::int64_t resolve_batch(std::int64_t n) const;
    double beta_n(std::int64_t n) const;
};

/// Rows presented to the risk functions: covariates, observed exposures and
/// outcomes, plus the shifted exposures for every shift head.
struct TrainBatch {
    ad::Tensor x;                               // {m, d}
    std::vector<double> a;                      // observed exposures
    ad::Tensor y;                               // {m, 1}
    std::vector<std::vector<double>> a_shift;   // per shift, length m

    std::int64_t size() const { return x.shape.empty() ? 0 : x.shape[0]; }
    static TrainBatch from_dataset(const Dataset& data, const ShiftFamily& shifts);
    static TrainBatch from_rows(const Dataset& data, const ShiftFamily& shifts,
                                std::span<const std::int64_t> rows);
};

struct RiskTerms {
    ad::Tensor outcome;
    ad::Tensor ratio;
    ad::Tensor tr;
    ad::Tensor total;
};

/// All three empirical risks and their weighted combination on one tape with
/// shared subexpressions. `n_total` is the full training-set size that scales
/// the regularization weight.
RiskTerms build_objective(ad::Tape& tape, const TresnetModel& model, const TrainBatch& batch,
                          const TrainConfig& cfg, std::int64_t n_total);

// Evaluation-only views of the individual risks.
double outcome_risk(const TresnetModel& model, const TrainBatch& batch);
double ratio_risk(const TresnetModel& model, const TrainBatch& batch);
double tr_risk(const TresnetModel& model, const TrainBatch& batch, TrMode mode = TrMode::WeightedOffset);
double total_objective(const TresnetModel& model, const TrainBatch& batch, const TrainConfig& cfg,
                       std::int64_t n_total);

struct EpochStats {
    double outcome = 0.0;
    double ratio = 0.0;
    double tr = 0.0;
    double total = 0.0;
};

struct TrainResult {
    TresnetModel model;
    std::vector<EpochStats> history;
    PositivityReport positivity;
};

/// Gradient training of the full objective followed by the exact fluctuation
/// refit. Deterministic for a fixed config.
TrainResult train(const Dataset& data, const ShiftFamily& shifts, const ModelConfig& mcfg,
                  const TrainConfig& tcfg);

/// Compensated mean of w * (y - g^{-1}(eta + eps)); the quantity the
/// fluctuation refit drives to zero.
double weighted_residual(Family family, std::span<const double> eta, std::span<const double> w,
                         std::span<const double> y, double eps);

/// Per-shift one-dimensional convex refit of the fluctuation parameters by
/// bisection on the monotone risk derivative. Updates the model in place and
/// returns the new values.
std::vector<double> refit_epsilon(TresnetModel& model, const Dataset& data, const ShiftFamily& shifts);

}  // namespace tresnet
