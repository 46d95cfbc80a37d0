#include "tresnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tresnet/rng.hpp"

namespace tresnet {

TrMode tr_mode_from_name(const std::string& name) {
    if (name == "weighted") return TrMode::WeightedOffset;
    if (name == "covariate") return TrMode::CleverCovariate;
    throw ConfigError("unknown tr_mode '" + name + "' (expected weighted|covariate)");
}

const std::string& tr_mode_name(TrMode m) {
    static const std::string names[] = {"weighted", "covariate"};
    return names[static_cast<int>(m)];
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 0) throw ConfigError("batch size must be >= 0 (0 = auto)");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("moment decay constants must lie in [0, 1)");
    }
    if (alpha < 0.0 || beta0 < 0.0) throw ConfigError("risk weights must be nonnegative");
}

std::int64_t TrainConfig::resolve_batch(std::int64_t n) const {
    if (batch_size > 0) return std::min<std::int64_t>(batch_size, n);
    return n <= 5000 ? n : 256;
}

double TrainConfig::beta_n(std::int64_t n) const { return beta0 / std::sqrt(static_cast<double>(n)); }

TrainBatch TrainBatch::from_dataset(const Dataset& data, const ShiftFamily& shifts) {
    TrainBatch batch;
    batch.x = ad::Tensor::matrix(data.n, data.d, data.x);
    batch.a = data.a;
    batch.y = ad::Tensor::column(data.y);
    for (const ShiftSpec& spec : shifts) batch.a_shift.push_back(shifted_exposures(data, spec));
    return batch;
}

TrainBatch TrainBatch::from_rows(const Dataset& data, const ShiftFamily& shifts,
                                 std::span<const std::int64_t> rows) {
    TrainBatch batch;
    const auto m = static_cast<std::int64_t>(rows.size());
    batch.x = ad::Tensor::zeros({m, data.d});
    batch.a.resize(rows.size());
    std::vector<double> y(rows.size());
    for (std::int64_t r = 0; r < m; ++r) {
        const std::int64_t src = rows[static_cast<std::size_t>(r)];
        auto row = data.x_row(src);
        std::copy(row.begin(), row.end(), batch.x.values.begin() + r * data.d);
        batch.a[static_cast<std::size_t>(r)] = data.a[static_cast<std::size_t>(src)];
        y[static_cast<std::size_t>(r)] = data.y[static_cast<std::size_t>(src)];
    }
    batch.y = ad::Tensor::column(y);
    for (const ShiftSpec& spec : shifts) {
        const std::vector<double> full = shifted_exposures(data, spec);
        std::vector<double> part(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) part[r] = full[static_cast<std::size_t>(rows[r])];
        batch.a_shift.push_back(std::move(part));
    }
    return batch;
}

namespace {

ad::Tensor detach(const ad::Tensor& t) {
    ad::Tensor copy = t;
    copy.node = ad::kNoNode;
    copy.owner = nullptr;
    return copy;
}

ad::Tensor nll_expr(ad::Tape& tape, Family family, const ad::Tensor& eta, const ad::Tensor& y) {
    return tape.sub(cumulant_expr(tape, family, eta), tape.mul(y, eta));
}

}  // namespace

RiskTerms build_objective(ad::Tape& tape, const TresnetModel& model, const TrainBatch& batch,
                          const TrainConfig& cfg, std::int64_t n_total) {
    const std::int64_t m = batch.size();
    const std::size_t n_shifts = batch.a_shift.size();
    if (m < 1) throw ShapeError("empty batch");
    if (n_shifts != model.n_shifts()) {
        throw ShapeError("batch carries " + std::to_string(n_shifts) + " shifts but the model has " +
                         std::to_string(model.n_shifts()) + " ratio heads");
    }
    for (std::int64_t i = 0; i < m; ++i) {
        check_outcome_domain(model.config().family, batch.y.values[static_cast<std::size_t>(i)]);
    }

    const Family family = model.config().family;
    const double beta = cfg.beta_n(n_total);
    // Terms with zero weight are skipped entirely so baseline fits do not pay
    // for heads they never use.
    const bool want_ratio = cfg.alpha > 0.0;
    const bool want_tr = beta > 0.0;
    RiskTerms terms;

    ad::Tensor z = model.backbone(tape, batch.x);
    ad::Tensor eta = model.outcome_head(tape, z, batch.a);
    terms.outcome = tape.mean(nll_expr(tape, family, eta, batch.y));

    // Density-ratio heads: classification of shifted against observed
    // exposures with the log-ratio as logit.
    std::vector<ad::Tensor> log_w_obs(n_shifts);
    if (want_ratio || want_tr) {
        for (std::size_t j = 0; j < n_shifts; ++j) log_w_obs[j] = model.ratio_head(tape, z, batch.a, j);
    }
    if (want_ratio) {
        ad::Tensor ratio_sum;
        for (std::size_t j = 0; j < n_shifts; ++j) {
            ad::Tensor lw_shift = model.ratio_head(tape, z, batch.a_shift[j], j);
            ad::Tensor sum_j = tape.add(tape.sum(tape.softplus(tape.neg(lw_shift))),
                                        tape.sum(tape.softplus(log_w_obs[j])));
            ratio_sum = j == 0 ? sum_j : tape.add(ratio_sum, sum_j);
        }
        const double ratio_scale = 1.0 / (2.0 * static_cast<double>(m) * static_cast<double>(n_shifts));
        terms.ratio = tape.mul(ratio_sum, ad::Tensor::scalar(ratio_scale));
    } else {
        terms.ratio = tape.leaf(ad::Tensor::scalar(0.0));
    }

    // Fluctuated likelihood. The model's fluctuation parameters enter the
    // expression directly, so when the trainer has registered them as leaves
    // they move alongside the network weights.
    if (want_tr) {
        ad::Tensor tr_sum;
        for (std::size_t j = 0; j < n_shifts; ++j) {
            const ad::Tensor& eps = model.epsilon_tensor(j);
            ad::Tensor w = tape.exp(cfg.detach_ratio_in_tr ? detach(log_w_obs[j]) : log_w_obs[j]);
            ad::Tensor term;
            if (cfg.tr_mode == TrMode::WeightedOffset) {
                ad::Tensor eta_j = tape.add(eta, eps);
                term = tape.sum(tape.mul(w, nll_expr(tape, family, eta_j, batch.y)));
            } else {
                ad::Tensor eta_j = tape.add(eta, tape.mul(eps, w));
                term = tape.sum(nll_expr(tape, family, eta_j, batch.y));
            }
            tr_sum = j == 0 ? term : tape.add(tr_sum, term);
        }
        const double tr_scale = 1.0 / (static_cast<double>(m) * static_cast<double>(n_shifts));
        terms.tr = tape.mul(tr_sum, ad::Tensor::scalar(tr_scale));
    } else {
        terms.tr = tape.leaf(ad::Tensor::scalar(0.0));
    }

    terms.total = terms.outcome;
    if (want_ratio) terms.total = tape.add(terms.total, tape.mul(ad::Tensor::scalar(cfg.alpha), terms.ratio));
    if (want_tr) terms.total = tape.add(terms.total, tape.mul(ad::Tensor::scalar(beta), terms.tr));
    return terms;
}

namespace {

RiskTerms eval_terms(const TresnetModel& model, const TrainBatch& batch, const TrainConfig& cfg,
                     std::int64_t n_total) {
    ad::Tape tape;
    tape.set_recording(false);
    return build_objective(tape, model, batch, cfg, n_total);
}

}  // namespace

double outcome_risk(const TresnetModel& model, const TrainBatch& batch) {
    return eval_terms(model, batch, TrainConfig{}, batch.size()).outcome.scalar_value();
}

double ratio_risk(const TresnetModel& model, const TrainBatch& batch) {
    return eval_terms(model, batch, TrainConfig{}, batch.size()).ratio.scalar_value();
}

double tr_risk(const TresnetModel& model, const TrainBatch& batch, TrMode mode) {
    TrainConfig cfg;
    cfg.tr_mode = mode;
    return eval_terms(model, batch, cfg, batch.size()).tr.scalar_value();
}

double total_objective(const TresnetModel& model, const TrainBatch& batch, const TrainConfig& cfg,
                       std::int64_t n_total) {
    return eval_terms(model, batch, cfg, n_total).total.scalar_value();
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

namespace {

class Adam {
  public:
    Adam(double lr, double b1, double b2) : lr_(lr), b1_(b1), b2_(b2) {}

    void step(std::vector<ParamRef>& params, const std::vector<const ad::Tensor*>& grads) {
        if (first_.empty()) {
            first_.resize(params.size());
            second_.resize(params.size());
            for (std::size_t p = 0; p < params.size(); ++p) {
                first_[p].assign(params[p].tensor->values.size(), 0.0);
                second_[p].assign(params[p].tensor->values.size(), 0.0);
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t p = 0; p < params.size(); ++p) {
            auto& values = params[p].tensor->values;
            const auto& g = grads[p]->values;
            auto& m = first_[p];
            auto& v = second_[p];
            for (std::size_t i = 0; i < values.size(); ++i) {
                m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
                v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
                values[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + 1e-8);
            }
        }
    }

  private:
    double lr_, b1_, b2_;
    long t_ = 0;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TrainResult train(const Dataset& data, const ShiftFamily& shifts, const ModelConfig& mcfg,
                  const TrainConfig& tcfg) {
    data.validate();
    tcfg.validate();

    TresnetModel model(mcfg, data.d, shifts.size(), tcfg.seed);
    model.fit_exposure_range(data.a);
    model.set_shift_label(shifts.label());

    // Null-model warm start: the outcome head opens at the constant fit
    // g(mean(Y)), so families with a curved link need not spend epochs
    // searching for the outcome scale.
    {
        double y_mean = 0.0;
        for (double v : data.y) y_mean += v;
        y_mean /= static_cast<double>(data.n);
        const bool interior = mcfg.family == Family::Gaussian ||
                              (mcfg.family == Family::Poisson && y_mean > 0.0) ||
                              (mcfg.family == Family::Bernoulli && y_mean > 0.0 && y_mean < 1.0);
        if (interior) {
            const std::string intercept =
                "outcome." + std::to_string(mcfg.head_hidden_layers) + ".coeff0";
            for (auto& p : model.parameters()) {
                if (p.name == intercept) {
                    // Constant input is the last row; basis 0 is identically 1.
                    p.tensor->values[p.tensor->values.size() - 1] = natural_from_mean(mcfg.family, y_mean);
                }
            }
        }
    }

    TrainResult result{std::move(model), {}, {}};
    TresnetModel& net = result.model;

    // Positivity screening of every shifted exposure vector against the
    // observed support before any estimation.
    for (const ShiftSpec& spec : shifts) {
        const auto shifted = shifted_exposures(data, spec);
        const PositivityReport r = screen_positivity(data.a, shifted);
        result.positivity.violations += r.violations;
        result.positivity.total += r.total;
        result.positivity.lo = r.lo;
        result.positivity.hi = r.hi;
    }

    const std::int64_t n = data.n;
    const std::int64_t batch_size = tcfg.resolve_batch(n);
    const bool full_batch = batch_size >= n;

    TrainBatch full = TrainBatch::from_dataset(data, shifts);
    auto params = net.parameters();
    Adam adam(tcfg.learning_rate, tcfg.beta1, tcfg.beta2);
    Rng shuffle_rng(tcfg.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    ad::Tape tape;
    result.history.reserve(static_cast<std::size_t>(tcfg.epochs));
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        EpochStats stats;
        double seen = 0.0;
        if (!full_batch) shuffle_rng.shuffle(order);
        std::int64_t cursor = 0;
        while (cursor < n) {
            const std::int64_t take = full_batch ? n : std::min<std::int64_t>(batch_size, n - cursor);
            TrainBatch batch = full_batch
                                   ? TrainBatch{}
                                   : TrainBatch::from_rows(data, shifts,
                                                           std::span<const std::int64_t>(
                                                               order.data() + cursor,
                                                               static_cast<std::size_t>(take)));
            const TrainBatch& active = full_batch ? full : batch;
            cursor += take;

            tape.reset();
            for (auto& p : params) *p.tensor = tape.leaf(*p.tensor);
            RiskTerms terms;
            try {
                terms = build_objective(tape, net, active, tcfg, n);
            } catch (const DomainError& err) {
                throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + err.what());
            }
            const double total = terms.total.scalar_value();
            if (!std::isfinite(total)) {
                throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                                   ": objective is not finite");
            }
            const double w = static_cast<double>(take);
            stats.outcome += w * terms.outcome.scalar_value();
            stats.ratio += w * terms.ratio.scalar_value();
            stats.tr += w * terms.tr.scalar_value();
            stats.total += w * total;
            seen += w;

            ad::GradientMap grads = tape.backward(terms.total);
            std::vector<const ad::Tensor*> grad_ptrs;
            grad_ptrs.reserve(params.size());
            for (auto& p : params) grad_ptrs.push_back(&grads.at(p.tensor->node));
            adam.step(params, grad_ptrs);
            for (auto& p : params) {
                p.tensor->node = ad::kNoNode;
                p.tensor->owner = nullptr;
            }
        }
        stats.outcome /= seen;
        stats.ratio /= seen;
        stats.tr /= seen;
        stats.total /= seen;
        result.history.push_back(stats);
    }

    // The stochastic optimizer leaves the estimating equation only
    // approximately solved; the exact refit is part of the training contract.
    refit_epsilon(net, data, shifts);
    return result;
}

// ---------------------------------------------------------------------------
// Fluctuation refit
// ---------------------------------------------------------------------------

double weighted_residual(Family family, std::span<const double> eta, std::span<const double> w,
                         std::span<const double> y, double eps) {
    double sum = 0.0, comp = 0.0;  // Kahan compensation
    for (std::size_t i = 0; i < eta.size(); ++i) {
        const double term = w[i] * (y[i] - mean_from_natural(family, eta[i] + eps));
        const double t = sum + term;
        if (std::abs(sum) >= std::abs(term)) {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    return (sum + comp) / static_cast<double>(eta.size());
}

std::vector<double> refit_epsilon(TresnetModel& model, const Dataset& data, const ShiftFamily& shifts) {
    if (!model.exposure_fitted()) throw NumericError("refit requires a trained model");
    if (shifts.size() != model.n_shifts()) {
        throw ShapeError("shift family size does not match the model's ratio heads");
    }
    const Family family = model.config().family;
    const ad::Tensor x = ad::Tensor::matrix(data.n, data.d, data.x);
    const ad::Tensor eta_t = model.outcome_forward(x, data.a);
    const ad::Tensor log_w = model.ratio_forward(x, data.a);

    const std::span<const double> eta(eta_t.values);
    double sd = 0.0;
    {
        double mean = 0.0;
        for (double v : data.y) mean += v;
        mean /= static_cast<double>(data.n);
        for (double v : data.y) sd += (v - mean) * (v - mean);
        sd = std::sqrt(sd / static_cast<double>(data.n));
    }

    double y_mean = 0.0;
    for (double v : data.y) y_mean += v;
    y_mean /= static_cast<double>(data.n);
    // Residual tolerance with a scale-aware floor for degenerate (constant)
    // outcomes, where 1e-8 * sd(Y) collapses to zero.
    const double tol = 1e-8 * sd + 1e-12 * (1.0 + std::abs(y_mean));
    const double sum_target = std::min(1e-10, 0.5 * static_cast<double>(data.n) * tol);

    std::vector<double> eps_out(shifts.size(), 0.0);
    for (std::size_t j = 0; j < shifts.size(); ++j) {
        std::vector<double> w(static_cast<std::size_t>(data.n));
        for (std::int64_t i = 0; i < data.n; ++i) {
            w[static_cast<std::size_t>(i)] = std::exp(log_w.at(i, static_cast<std::int64_t>(j)));
        }
        // The risk derivative in eps is minus the weighted residual times n;
        // it is monotone because the inverse link is strictly increasing.
        auto derivative = [&](double e) {
            return -static_cast<double>(data.n) * weighted_residual(family, eta, w, data.y, e);
        };
        double lo = -30.0, hi = 30.0;
        double f_lo = derivative(lo), f_hi = derivative(hi);
        if (f_lo == 0.0) {
            eps_out[j] = lo;
        } else if (f_hi == 0.0) {
            eps_out[j] = hi;
        } else if (f_lo > 0.0 || f_hi < 0.0) {
            throw NumericError("fluctuation refit for shift '" + shifts[j].label() +
                               "' has no sign change on [-30, 30]; the density-ratio weights or outcomes are "
                               "pathological");
        } else {
            double mid = 0.5 * (lo + hi);
            for (int iter = 0; iter < 300; ++iter) {
                mid = 0.5 * (lo + hi);
                const double f_mid = derivative(mid);
                if (std::abs(f_mid) < sum_target || mid == lo || mid == hi) break;
                if (f_mid < 0.0) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            eps_out[j] = mid;
        }
        const double residual = weighted_residual(family, eta, w, data.y, eps_out[j]);
        if (std::abs(residual) > tol) {
            throw NumericError("fluctuation refit for shift '" + shifts[j].label() + "' left residual " +
                               std::to_string(residual) + " above tolerance " + std::to_string(tol));
        }
    }
    model.set_epsilon(eps_out);
    return eps_out;
}

}  // namespace tresnet
