#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tresnet/family.hpp"
#include "tresnet/shifts.hpp"

namespace tresnet {

/// Observed triples (X, A, Y) plus optional ground truth. The natural
/// parameter oracle, when attached by a generator, enables exact
/// counterfactual means; the log density-ratio oracle enables
/// corrupted-nuisance experiments without training.
struct Dataset {
    std::int64_t n = 0;
    std::int64_t d = 0;
    std::vector<double> x;  // row-major n x d
    std::vector<double> a;
    std::vector<double> y;
    Family family = Family::Gaussian;

    // eta_true(x_row, a); mean is mean_from_natural(family, eta_true).
    std::function<double(std::span<const double>, double)> oracle_eta;
    // log w(x_row, a) for a percent-reduction shift with parameter c.
    std::function<double(double, std::span<const double>, double)> oracle_log_w_percent;

    std::map<std::string, std::vector<double>> pairwise_columns;

    std::string generator_label;  // echoed into the metadata sidecar

    std::span<const double> x_row(std::int64_t i) const {
        return {x.data() + i * d, static_cast<std::size_t>(d)};
    }
    bool has_oracle() const { return static_cast<bool>(oracle_eta); }
    double oracle_mean(std::int64_t i, double at_a) const {
        return mean_from_natural(family, oracle_eta(x_row(i), at_a));
    }

    void validate() const;
};

/// Shifted exposures for one spec, resolving pairwise columns from the dataset.
std::vector<double> shifted_exposures(const Dataset& data, const ShiftSpec& spec);

/// One-covariate benchmark with oracle mean a*x: X ~ N(0,1), A = X + N(0,1),
/// Y = A*X + noise_sd * N(0,1). Under the scaling shift a -> s*a the target
/// value is s, while the all-units-at-a curve is identically zero.
Dataset gen_linear(std::int64_t n, std::uint64_t seed, double noise_sd = 1.0);

/// Six-covariate confounded benchmark on a bounded exposure; supports gaussian
/// and poisson outcomes.
Dataset gen_nonlinear(std::int64_t n, std::uint64_t seed, Family family);

/// Natural parameter of the nonlinear benchmark (exposed for tests).
double nonlinear_eta(std::span<const double> x, double a);

/// Per-shift true value: empirical counterfactual mean of the oracle outcome
/// over the realized sample.
std::vector<double> oracle_srf(const Dataset& data, const ShiftFamily& shifts);

/// Mean squared deviation across seeds and shifts; benchmarks report the root.
double mise(const std::vector<std::vector<double>>& estimates, const std::vector<std::vector<double>>& truths);

Dataset load_csv(const std::string& path);
void save_csv(const Dataset& data, const std::string& path);

void save_metadata(const Dataset& data, const std::string& path);

struct Split {
    Dataset train;
    Dataset test;
    std::vector<std::int64_t> train_rows;
    std::vector<std::int64_t> test_rows;
};

/// Disjoint, exhaustive, seed-deterministic row partition.
Split split(const Dataset& data, double test_fraction, std::uint64_t seed);

/// Rows drawn with replacement (bootstrap resample of equal size).
Dataset resample(const Dataset& data, std::uint64_t seed);

}  // namespace tresnet
