#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tresnet/model.hpp"
#include "tresnet/training.hpp"

namespace tresnet {

/// Flat key=value run configuration ('#' starts a comment). Unknown keys are
/// hard errors.
struct RunConfig {
    // dataset source: exactly one of dgp / csv
    std::string dgp;       // linear | nonlinear
    std::string csv_path;  // ingested dataset
    std::int64_t n = 1000;
    double noise_sd = 1.0;
    std::uint64_t data_seed = 0;
    bool data_seed_set = false;
    // Outcome family of the generated data when it differs from the model
    // family (loss-misspecification comparisons); empty = same as the model.
    std::string data_family;

    std::string shifts_raw;  // ';'-separated shift grammar

    ModelConfig model;
    TrainConfig train;

    std::string model_path;  // input for estimate
    std::vector<std::string> estimators{"plugin", "aipw", "tr"};

    // benchmark sweep
    int n_seeds = 10;
    std::vector<std::string> dgps;
    std::vector<std::string> families;
    std::vector<std::string> bases;

    std::size_t ensemble_b = 0;

    std::string out_dir = ".";

    static RunConfig parse_file(const std::string& path);
    static RunConfig parse_entries(const std::map<std::string, std::string>& entries);

    /// Seed used for data generation (defaults to the training seed).
    std::uint64_t effective_data_seed() const { return data_seed_set ? data_seed : train.seed; }
};

}  // namespace tresnet
