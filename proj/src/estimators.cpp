#include "tresnet/estimators.hpp"

#include <algorithm>
#include <cmath>

#include "tresnet/jobs.hpp"

namespace tresnet {

namespace {

double mean_of(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

struct ModelColumns {
    std::vector<double> mu_obs;    // n
    std::vector<double> w_obs;     // n x J
    std::vector<double> mu_shift;  // n x J
    std::vector<double> eta_shift; // n x J
};

ModelColumns model_columns(const TresnetModel& model, const Dataset& data, const ShiftFamily& shifts) {
    if (shifts.size() != model.n_shifts()) {
        throw ShapeError("shift family size " + std::to_string(shifts.size()) +
                         " does not match the model's " + std::to_string(model.n_shifts()) + " ratio heads");
    }
    const Family family = model.config().family;
    const ad::Tensor x = ad::Tensor::matrix(data.n, data.d, data.x);
    const std::size_t j_count = shifts.size();

    ModelColumns cols;
    const ad::Tensor eta_obs = model.outcome_forward(x, data.a);
    cols.mu_obs.resize(static_cast<std::size_t>(data.n));
    for (std::int64_t i = 0; i < data.n; ++i) {
        cols.mu_obs[static_cast<std::size_t>(i)] =
            mean_from_natural(family, eta_obs.values[static_cast<std::size_t>(i)]);
    }

    const ad::Tensor log_w = model.ratio_forward(x, data.a);
    cols.w_obs.resize(static_cast<std::size_t>(data.n) * j_count);
    for (std::int64_t i = 0; i < data.n; ++i) {
        for (std::size_t j = 0; j < j_count; ++j) {
            cols.w_obs[static_cast<std::size_t>(i) * j_count + j] =
                std::exp(log_w.at(i, static_cast<std::int64_t>(j)));
        }
    }

    cols.mu_shift.resize(static_cast<std::size_t>(data.n) * j_count);
    cols.eta_shift.resize(static_cast<std::size_t>(data.n) * j_count);
    for (std::size_t j = 0; j < j_count; ++j) {
        const std::vector<double> a_tilde = shifted_exposures(data, shifts[j]);
        const ad::Tensor eta_j = model.outcome_forward(x, a_tilde);
        for (std::int64_t i = 0; i < data.n; ++i) {
            const double eta = eta_j.values[static_cast<std::size_t>(i)];
            cols.eta_shift[static_cast<std::size_t>(i) * j_count + j] = eta;
            cols.mu_shift[static_cast<std::size_t>(i) * j_count + j] = mean_from_natural(family, eta);
        }
    }
    return cols;
}

}  // namespace

std::vector<double> plugin_from_columns(std::span<const double> mu_shift, std::int64_t n,
                                        std::size_t j_count) {
    std::vector<double> psi(j_count, 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < j_count; ++j) psi[j] += mu_shift[static_cast<std::size_t>(i) * j_count + j];
    }
    for (double& p : psi) p /= static_cast<double>(n);
    return psi;
}

std::vector<double> aipw_from_columns(std::span<const double> w_obs, std::span<const double> mu_obs,
                                      std::span<const double> mu_shift, std::span<const double> y,
                                      std::int64_t n, std::size_t j_count) {
    std::vector<double> psi = plugin_from_columns(mu_shift, n, j_count);
    for (std::size_t j = 0; j < j_count; ++j) {
        double debias = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            debias += w_obs[static_cast<std::size_t>(i) * j_count + j] *
                      (y[static_cast<std::size_t>(i)] - mu_obs[static_cast<std::size_t>(i)]);
        }
        psi[j] += debias / static_cast<double>(n);
    }
    return psi;
}

std::vector<double> plugin_srf(const TresnetModel& model, const Dataset& data, const ShiftFamily& shifts) {
    const ModelColumns cols = model_columns(model, data, shifts);
    return plugin_from_columns(cols.mu_shift, data.n, shifts.size());
}

std::vector<double> aipw_srf(const TresnetModel& model, const Dataset& data, const ShiftFamily& shifts) {
    const ModelColumns cols = model_columns(model, data, shifts);
    return aipw_from_columns(cols.w_obs, cols.mu_obs, cols.mu_shift, data.y, data.n, shifts.size());
}

std::vector<double> tr_srf(const TresnetModel& model, const Dataset& data, const ShiftFamily& shifts) {
    if (!model.fluctuation_ready()) {
        throw NumericError("targeted estimate requested before the fluctuation refit");
    }
    const ModelColumns cols = model_columns(model, data, shifts);
    const std::vector<double> eps = model.epsilon_values();
    const std::size_t j_count = shifts.size();
    std::vector<double> psi(j_count, 0.0);
    for (std::int64_t i = 0; i < data.n; ++i) {
        for (std::size_t j = 0; j < j_count; ++j) {
            psi[j] += mean_from_natural(model.config().family,
                                        cols.eta_shift[static_cast<std::size_t>(i) * j_count + j] + eps[j]);
        }
    }
    for (double& p : psi) p /= static_cast<double>(data.n);
    return psi;
}

EifResult eif(std::span<const double> psi, std::span<const double> w_obs, std::span<const double> mu_obs,
              std::span<const double> mu_shift, std::span<const double> y, std::int64_t n,
              std::size_t j_count) {
    EifResult out;
    out.phi.resize(static_cast<std::size_t>(n) * j_count);
    out.variance.assign(j_count, 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        const double resid = y[static_cast<std::size_t>(i)] - mu_obs[static_cast<std::size_t>(i)];
        for (std::size_t j = 0; j < j_count; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * j_count + j;
            out.phi[idx] = w_obs[idx] * resid + mu_shift[idx] - psi[j];
        }
    }
    for (std::size_t j = 0; j < j_count; ++j) {
        double mean = 0.0;
        for (std::int64_t i = 0; i < n; ++i) mean += out.phi[static_cast<std::size_t>(i) * j_count + j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double d = out.phi[static_cast<std::size_t>(i) * j_count + j] - mean;
            var += d * d;
        }
        if (n > 1) var /= static_cast<double>(n - 1);
        out.variance[j] = var / static_cast<double>(n);
    }
    return out;
}

double eee_residual(const TresnetModel& model, const Dataset& data, const ShiftFamily& shifts,
                    std::size_t shift) {
    if (shift >= shifts.size()) throw ShapeError("shift index out of range");
    const Family family = model.config().family;
    const ad::Tensor x = ad::Tensor::matrix(data.n, data.d, data.x);
    const ad::Tensor eta = model.outcome_forward(x, data.a);
    const ad::Tensor log_w = model.ratio_forward(x, data.a);
    std::vector<double> w(static_cast<std::size_t>(data.n));
    for (std::int64_t i = 0; i < data.n; ++i) {
        w[static_cast<std::size_t>(i)] = std::exp(log_w.at(i, static_cast<std::int64_t>(shift)));
    }
    const double eps = model.epsilon_values().at(shift);
    return weighted_residual(family, eta.values, w, data.y, eps);
}

SrfEstimate estimate_srf(const TresnetModel& model, const Dataset& data, const ShiftFamily& shifts) {
    if (!model.fluctuation_ready()) {
        throw NumericError("targeted estimate requested before the fluctuation refit");
    }
    const ModelColumns cols = model_columns(model, data, shifts);
    const std::size_t j_count = shifts.size();
    const Family family = model.config().family;
    const std::vector<double> eps = model.epsilon_values();

    SrfEstimate est;
    est.shifts = shifts.specs();
    est.psi_plugin = plugin_from_columns(cols.mu_shift, data.n, j_count);
    est.psi_aipw = aipw_from_columns(cols.w_obs, cols.mu_obs, cols.mu_shift, data.y, data.n, j_count);
    est.psi_tr.assign(j_count, 0.0);
    for (std::int64_t i = 0; i < data.n; ++i) {
        for (std::size_t j = 0; j < j_count; ++j) {
            est.psi_tr[j] += mean_from_natural(family,
                                               cols.eta_shift[static_cast<std::size_t>(i) * j_count + j] +
                                                   eps[j]);
        }
    }
    for (double& p : est.psi_tr) p /= static_cast<double>(data.n);

    est.eee_residual.assign(j_count, 0.0);
    std::vector<double> w_col(static_cast<std::size_t>(data.n));
    const ad::Tensor x = ad::Tensor::matrix(data.n, data.d, data.x);
    const ad::Tensor eta_obs = model.outcome_forward(x, data.a);
    for (std::size_t j = 0; j < j_count; ++j) {
        for (std::int64_t i = 0; i < data.n; ++i) {
            w_col[static_cast<std::size_t>(i)] = cols.w_obs[static_cast<std::size_t>(i) * j_count + j];
        }
        est.eee_residual[j] = weighted_residual(family, eta_obs.values, w_col, data.y, eps[j]);
    }

    est.eif_variance = eif(est.psi_aipw, cols.w_obs, cols.mu_obs, cols.mu_shift, data.y, data.n, j_count)
                           .variance;
    return est;
}

std::vector<double> erf_plugin_from_mu(const std::function<double(std::span<const double>, double)>& mu,
                                       const Dataset& data, std::span<const double> a_grid) {
    std::vector<double> xi(a_grid.size(), 0.0);
    for (std::size_t g = 0; g < a_grid.size(); ++g) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < data.n; ++i) acc += mu(data.x_row(i), a_grid[g]);
        xi[g] = acc / static_cast<double>(data.n);
    }
    return xi;
}

std::vector<double> erf_plugin(const TresnetModel& model, const Dataset& data,
                               std::span<const double> a_grid) {
    const ad::Tensor x = ad::Tensor::matrix(data.n, data.d, data.x);
    std::vector<double> xi(a_grid.size(), 0.0);
    std::vector<double> a_fixed(static_cast<std::size_t>(data.n));
    for (std::size_t g = 0; g < a_grid.size(); ++g) {
        std::fill(a_fixed.begin(), a_fixed.end(), a_grid[g]);
        const std::vector<double> mu = model.predict_mean(x, a_fixed);
        xi[g] = mean_of(mu);
    }
    return xi;
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw ShapeError("quantile of an empty sample");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = static_cast<std::size_t>(std::ceil(pos));
    const double frac = pos - std::floor(pos);
    return values[lo] * (1.0 - frac) + values[hi] * frac;
}

EnsembleResult bootstrap_ensemble_seeded(const Dataset& data, const ShiftFamily& shifts,
                                         const ModelConfig& mcfg, const TrainConfig& tcfg,
                                         std::span<const std::uint64_t> member_seeds, std::size_t jobs) {
    if (member_seeds.size() < 2) throw ConfigError("ensemble needs at least two members");
    const std::size_t b = member_seeds.size();
    std::vector<std::optional<std::vector<double>>> psi(b);

    parallel_for(jobs, b, [&](std::size_t member) {
        const std::uint64_t seed = member_seeds[member];
        try {
            Dataset sample = resample(data, seed);
            TrainConfig member_cfg = tcfg;
            member_cfg.seed = seed;
            TrainResult fit = train(sample, shifts, mcfg, member_cfg);
            // The estimate targets the original sample's exposure shifts.
            psi[member] = tr_srf(fit.model, data, shifts);
        } catch (const NumericError&) {
            psi[member] = std::nullopt;  // diverged member: reported, excluded
        }
    });

    EnsembleResult out;
    for (std::size_t member = 0; member < b; ++member) {
        if (psi[member]) {
            out.member_psi.push_back(std::move(*psi[member]));
        } else {
            ++out.failed;
        }
    }
    if (out.member_psi.size() < (b + 1) / 2) {
        throw NumericError("ensemble collapsed: " + std::to_string(out.failed) + " of " + std::to_string(b) +
                           " members diverged");
    }
    const std::size_t j_count = shifts.size();
    out.q25.resize(j_count);
    out.q50.resize(j_count);
    out.q75.resize(j_count);
    std::vector<double> column(out.member_psi.size());
    for (std::size_t j = 0; j < j_count; ++j) {
        for (std::size_t member = 0; member < out.member_psi.size(); ++member) {
            column[member] = out.member_psi[member][j];
        }
        out.q25[j] = quantile(column, 0.25);
        out.q50[j] = quantile(column, 0.50);
        out.q75[j] = quantile(column, 0.75);
    }
    return out;
}

EnsembleResult bootstrap_ensemble(const Dataset& data, const ShiftFamily& shifts, const ModelConfig& mcfg,
                                  const TrainConfig& tcfg, std::size_t b, std::size_t jobs) {
    if (b < 2) throw ConfigError("ensemble needs at least two members");
    std::vector<std::uint64_t> seeds(b);
    for (std::size_t member = 0; member < b; ++member) {
        seeds[member] = tcfg.seed + 1000003ull * (member + 1);
    }
    return bootstrap_ensemble_seeded(data, shifts, mcfg, tcfg, seeds, jobs);
}

}  // namespace tresnet
