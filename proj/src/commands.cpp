#include "tresnet/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "tresnet/data.hpp"
#include "tresnet/estimators.hpp"
#include "tresnet/jobs.hpp"

namespace tresnet {

namespace {

namespace fs = std::filesystem;

std::string format_full(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
    fs::path dir(cfg.out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + cfg.out_dir + "': " + ec.message());
    return (dir / name).string();
}

Family resolve_data_family(const RunConfig& cfg) {
    return cfg.data_family.empty() ? cfg.model.family : family_from_name(cfg.data_family);
}

Dataset resolve_dataset(const RunConfig& cfg) {
    if (!cfg.csv_path.empty()) {
        Dataset data = load_csv(cfg.csv_path);
        data.family = resolve_data_family(cfg);
        return data;
    }
    if (cfg.dgp == "linear") return gen_linear(cfg.n, cfg.effective_data_seed(), cfg.noise_sd);
    if (cfg.dgp == "nonlinear") return gen_nonlinear(cfg.n, cfg.effective_data_seed(), resolve_data_family(cfg));
    if (cfg.dgp.empty()) throw ConfigError("config needs a dataset source: set 'dgp' or 'csv'");
    throw ConfigError("unknown dgp '" + cfg.dgp + "' (expected linear|nonlinear)");
}

ShiftFamily resolve_shifts(const RunConfig& cfg) {
    if (cfg.shifts_raw.empty()) throw ConfigError("config needs a 'shifts' entry");
    return ShiftFamily::from_label(cfg.shifts_raw);
}

void warn_positivity(const PositivityReport& report, std::ostream& log) {
    if (report.violations > 0) {
        log << "warning: " << report.violations << " of " << report.total
            << " shifted exposures fall outside the observed support widened by 5% (["
            << format_full(report.lo) << ", " << format_full(report.hi)
            << "]); density-ratio weights may be unreliable there\n";
    }
}

/// Identity shifts (the ones whose shifted exposures equal the observed ones)
/// anchor the percent-change column.
std::optional<std::size_t> find_identity_shift(const Dataset& data, const ShiftFamily& shifts) {
    for (std::size_t j = 0; j < shifts.size(); ++j) {
        const auto shifted = shifted_exposures(data, shifts[j]);
        bool same = true;
        for (std::size_t i = 0; i < shifted.size(); ++i) {
            if (shifted[i] != data.a[i]) {
                same = false;
                break;
            }
        }
        if (same) return j;
    }
    return std::nullopt;
}

void write_curve_csv(const std::string& path, const Dataset& data, const ShiftFamily& shifts,
                     const SrfEstimate& est, bool with_percent_change) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    const auto identity = with_percent_change ? find_identity_shift(data, shifts) : std::nullopt;
    out << "shift_kind,shift_param,psi_plugin,psi_aipw,psi_tr,eee_residual,eif_se,q25,q50,q75";
    if (identity) out << ",pct_change_tr";
    out << "\n";
    for (std::size_t j = 0; j < shifts.size(); ++j) {
        const ShiftSpec& spec = shifts[j];
        out << shift_kind_name(spec.kind) << ",";
        if (spec.kind == ShiftKind::Pairwise) {
            out << spec.pairwise_column;
        } else {
            out << format_full(spec.param);
        }
        out << "," << format_full(est.psi_plugin[j]) << "," << format_full(est.psi_aipw[j]) << ","
            << format_full(est.psi_tr[j]) << "," << format_full(est.eee_residual[j]) << ","
            << format_full(std::sqrt(est.eif_variance[j]));
        if (est.q25.empty()) {
            out << ",,,";
        } else {
            out << "," << format_full(est.q25[j]) << "," << format_full(est.q50[j]) << ","
                << format_full(est.q75[j]);
        }
        if (identity) {
            const double base = est.psi_tr[*identity];
            out << "," << format_full(100.0 * (est.psi_tr[j] - base) / base);
        }
        out << "\n";
    }
    if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace

void cmd_simulate(const RunConfig& cfg, std::ostream& log) {
    if (cfg.dgp.empty()) throw ConfigError("simulate needs a 'dgp' entry (linear|nonlinear)");
    if (cfg.n < 1) throw ConfigError("simulate needs n >= 1");
    const ShiftFamily shifts = resolve_shifts(cfg);
    const Dataset data = resolve_dataset(cfg);
    const std::vector<double> psi_true = oracle_srf(data, shifts);

    const std::string data_path = out_path(cfg, "dataset.csv");
    const std::string meta_path = out_path(cfg, "dataset.meta");
    const std::string truth_path = out_path(cfg, "truth.csv");
    save_csv(data, data_path);
    save_metadata(data, meta_path);
    std::ofstream truth(truth_path);
    if (!truth) throw IoError("cannot open '" + truth_path + "' for writing");
    truth << "shift_param,psi_true\n";
    for (std::size_t j = 0; j < shifts.size(); ++j) {
        truth << format_full(shifts[j].param) << "," << format_full(psi_true[j]) << "\n";
    }
    if (!truth) throw IoError("write to '" + truth_path + "' failed");
    log << "wrote " << data_path << ", " << meta_path << ", " << truth_path << "\n";
}

void cmd_train(const RunConfig& cfg, std::ostream& log) {
    const ShiftFamily shifts = resolve_shifts(cfg);
    const Dataset data = resolve_dataset(cfg);
    const TrainResult result = train(data, shifts, cfg.model, cfg.train);
    warn_positivity(result.positivity, log);

    const std::string model_path = out_path(cfg, "model.txt");
    const std::string history_path = out_path(cfg, "history.csv");
    result.model.save(model_path);
    std::ofstream hist(history_path);
    if (!hist) throw IoError("cannot open '" + history_path + "' for writing");
    hist << "epoch,outcome_risk,ratio_risk,tr_risk,total\n";
    for (std::size_t e = 0; e < result.history.size(); ++e) {
        const EpochStats& s = result.history[e];
        hist << e << "," << format_full(s.outcome) << "," << format_full(s.ratio) << ","
             << format_full(s.tr) << "," << format_full(s.total) << "\n";
    }
    if (!hist) throw IoError("write to '" + history_path + "' failed");
    log << "wrote " << model_path << ", " << history_path << "\n";
}

void cmd_estimate(const RunConfig& cfg, std::ostream& log) {
    if (cfg.model_path.empty()) throw ConfigError("estimate needs a 'model' entry pointing at a model file");
    const ShiftFamily shifts = resolve_shifts(cfg);
    const Dataset data = resolve_dataset(cfg);
    TresnetModel model = TresnetModel::load(cfg.model_path);
    if (model.shift_label() != shifts.label()) {
        throw ConfigError("model was trained for shifts '" + model.shift_label() +
                          "' but the config requests '" + shifts.label() + "'");
    }
    if (model.config().family != cfg.model.family) {
        throw ConfigError("model family '" + family_name(model.config().family) +
                          "' does not match configured family '" + family_name(cfg.model.family) + "'");
    }
    PositivityReport positivity;
    for (const ShiftSpec& spec : shifts) {
        const PositivityReport r = screen_positivity(data.a, shifted_exposures(data, spec));
        positivity.violations += r.violations;
        positivity.total += r.total;
        positivity.lo = r.lo;
        positivity.hi = r.hi;
    }
    warn_positivity(positivity, log);
    const SrfEstimate est = estimate_srf(model, data, shifts);
    const std::string curve_path = out_path(cfg, "curve.csv");
    write_curve_csv(curve_path, data, shifts, est, /*with_percent_change=*/true);
    log << "wrote " << curve_path << "\n";
}

// ---------------------------------------------------------------------------
// Benchmark sweep
// ---------------------------------------------------------------------------

namespace {

struct BenchCell {
    std::string dgp;
    Family family = Family::Gaussian;
    BasisKind basis = BasisKind::Spline;
};

struct BenchJob {
    std::size_t cell = 0;
    int seed = 0;
};

struct BenchOutcome {
    // per estimator: sqrt of the per-seed mean squared error over shifts
    std::map<std::string, double> sqrt_mise;
    std::string error;
};

// Which training variant an estimator reads from. The plugin baseline is an
// outcome-only fit, the aipw baseline adds the ratio heads without the
// fluctuation, and tr is the full objective.
enum class Variant { OutcomeOnly, Nuisance, Full };

Variant variant_for(const std::string& estimator) {
    if (estimator == "plugin") return Variant::OutcomeOnly;
    if (estimator == "aipw") return Variant::Nuisance;
    if (estimator == "tr") return Variant::Full;
    throw ConfigError("unknown estimator '" + estimator + "' (expected plugin|aipw|tr)");
}

double sqrt_mise_one_seed(const std::vector<double>& psi_hat, const std::vector<double>& psi_true) {
    return std::sqrt(mise({psi_hat}, {psi_true}));
}

}  // namespace

void cmd_benchmark(const RunConfig& cfg, std::size_t jobs, std::ostream& log) {
    if (cfg.n_seeds < 1) throw ConfigError("benchmark needs n_seeds >= 1");
    if (cfg.estimators.empty()) throw ConfigError("benchmark needs at least one estimator");
    for (const std::string& e : cfg.estimators) variant_for(e);
    const ShiftFamily shifts = resolve_shifts(cfg);

    const std::vector<std::string> dgps = cfg.dgps.empty() ? std::vector<std::string>{"nonlinear"} : cfg.dgps;
    const std::vector<std::string> families =
        cfg.families.empty() ? std::vector<std::string>{family_name(cfg.model.family)} : cfg.families;
    const std::vector<std::string> bases =
        cfg.bases.empty() ? std::vector<std::string>{basis_name(cfg.model.basis)} : cfg.bases;

    std::vector<BenchCell> cells;
    for (const std::string& dgp : dgps) {
        if (dgp != "linear" && dgp != "nonlinear") throw ConfigError("unknown dgp '" + dgp + "'");
        for (const std::string& fam : families) {
            for (const std::string& basis : bases) {
                cells.push_back({dgp, family_from_name(fam), basis_from_name(basis)});
            }
        }
    }

    std::vector<BenchJob> job_list;
    for (std::size_t c = 0; c < cells.size(); ++c) {
        for (int s = 0; s < cfg.n_seeds; ++s) job_list.push_back({c, s});
    }
    std::vector<BenchOutcome> outcomes(job_list.size());

    parallel_for(jobs, job_list.size(), [&](std::size_t idx) {
        const BenchJob& job = job_list[idx];
        const BenchCell& cell = cells[job.cell];
        BenchOutcome& outcome = outcomes[idx];
        try {
            const std::uint64_t seed = cfg.effective_data_seed() + static_cast<std::uint64_t>(job.seed);
            const Family data_family =
                cfg.data_family.empty() ? cell.family : family_from_name(cfg.data_family);
            Dataset data = cell.dgp == "linear" ? gen_linear(cfg.n, seed, cfg.noise_sd)
                                                : gen_nonlinear(cfg.n, seed, data_family);
            const std::vector<double> psi_true = oracle_srf(data, shifts);

            ModelConfig mcfg = cfg.model;
            mcfg.family = cell.family;
            mcfg.basis = cell.basis;

            std::map<Variant, TrainResult> fits;
            for (const std::string& estimator : cfg.estimators) {
                const Variant variant = variant_for(estimator);
                if (!fits.count(variant)) {
                    TrainConfig tcfg = cfg.train;
                    tcfg.seed = seed;
                    if (variant == Variant::OutcomeOnly) {
                        tcfg.alpha = 0.0;
                        tcfg.beta0 = 0.0;
                    } else if (variant == Variant::Nuisance) {
                        tcfg.beta0 = 0.0;
                    }
                    fits.emplace(variant, train(data, shifts, mcfg, tcfg));
                }
                const TresnetModel& model = fits.at(variant).model;
                std::vector<double> psi;
                if (estimator == "plugin") psi = plugin_srf(model, data, shifts);
                else if (estimator == "aipw") psi = aipw_srf(model, data, shifts);
                else psi = tr_srf(model, data, shifts);
                outcome.sqrt_mise[estimator] = sqrt_mise_one_seed(psi, psi_true);
            }
        } catch (const std::exception& err) {
            outcome.error = err.what();
        }
    });

    const std::string table_path = out_path(cfg, "benchmark.csv");
    std::ofstream out(table_path);
    if (!out) throw IoError("cannot open '" + table_path + "' for writing");
    out << "dgp,family,basis,estimator,seed,sqrt_mise\n";
    std::size_t failures = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
        const BenchCell& cell = cells[c];
        const std::string prefix =
            cell.dgp + "," + family_name(cell.family) + "," + basis_name(cell.basis) + ",";
        std::map<std::string, std::vector<double>> per_estimator;
        std::vector<std::pair<double, double>> tr_vs_plugin;  // per seed when both present
        for (const std::string& estimator : cfg.estimators) {
            for (std::size_t idx = 0; idx < job_list.size(); ++idx) {
                if (job_list[idx].cell != c) continue;
                const BenchOutcome& outcome = outcomes[idx];
                out << prefix << estimator << "," << job_list[idx].seed << ",";
                if (!outcome.error.empty()) {
                    ++failures;
                    out << "\n";
                    continue;
                }
                const double v = outcome.sqrt_mise.at(estimator);
                per_estimator[estimator].push_back(v);
                out << format_full(v) << "\n";
            }
        }
        for (const std::string& estimator : cfg.estimators) {
            const auto& values = per_estimator[estimator];
            if (values.empty()) continue;
            out << prefix << estimator << ",median," << format_full(quantile(values, 0.5)) << "\n";
        }
        if (per_estimator.count("tr") && per_estimator.count("plugin")) {
            std::size_t wins = 0, comparable = 0;
            for (std::size_t idx = 0; idx < job_list.size(); ++idx) {
                if (job_list[idx].cell != c || !outcomes[idx].error.empty()) continue;
                const auto& m = outcomes[idx].sqrt_mise;
                if (m.count("tr") && m.count("plugin")) {
                    ++comparable;
                    if (m.at("tr") <= m.at("plugin")) ++wins;
                }
            }
            if (comparable > 0) {
                out << prefix << "tr_vs_plugin,fraction,"
                    << format_full(static_cast<double>(wins) / static_cast<double>(comparable)) << "\n";
            }
        }
    }
    if (!out) throw IoError("write to '" + table_path + "' failed");
    if (failures > 0) {
        log << "warning: " << failures << " of " << job_list.size()
            << " benchmark jobs failed; the table is partial (empty sqrt_mise cells)\n";
        const std::size_t show = std::min<std::size_t>(3, outcomes.size());
        std::size_t shown = 0;
        for (const BenchOutcome& outcome : outcomes) {
            if (outcome.error.empty() || shown >= show) continue;
            log << "  job error: " << outcome.error << "\n";
            ++shown;
        }
    }
    log << "wrote " << table_path << "\n";
}

void cmd_ensemble(const RunConfig& cfg, std::size_t jobs, std::ostream& log) {
    if (cfg.ensemble_b < 2) throw ConfigError("ensemble needs ensemble_b >= 2");
    const ShiftFamily shifts = resolve_shifts(cfg);
    const Dataset data = resolve_dataset(cfg);

    // Point estimates come from one fit on the full sample; the band comes
    // from the bootstrap members.
    const TrainResult reference = train(data, shifts, cfg.model, cfg.train);
    warn_positivity(reference.positivity, log);
    SrfEstimate est = estimate_srf(reference.model, data, shifts);

    const EnsembleResult ensemble =
        bootstrap_ensemble(data, shifts, cfg.model, cfg.train, cfg.ensemble_b, jobs);
    if (ensemble.failed > 0) {
        log << "warning: " << ensemble.failed << " of " << cfg.ensemble_b
            << " ensemble members diverged and were excluded\n";
    }
    est.q25 = ensemble.q25;
    est.q50 = ensemble.q50;
    est.q75 = ensemble.q75;

    const std::string curve_path = out_path(cfg, "ensemble.csv");
    write_curve_csv(curve_path, data, shifts, est, /*with_percent_change=*/true);
    log << "wrote " << curve_path << "\n";
}

}  // namespace tresnet
