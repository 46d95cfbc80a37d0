#include <CLI11.hpp>
#include <iostream>
#include <string>

#include "tresnet/commands.hpp"
#include "tresnet/errors.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_override;
    std::size_t jobs = 1;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Path to a key=value run configuration")->required();
    cmd->add_option("--out", args.out_override, "Output directory (overrides the config's 'out')");
    cmd->add_option("--jobs", args.jobs, "Worker threads for sweeps and ensembles")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", args.seed, "Seed override")->each([&args](const std::string&) {
        args.seed_set = true;
    });
}

tresnet::RunConfig load_config(const CommonArgs& args) {
    tresnet::RunConfig cfg = tresnet::RunConfig::parse_file(args.config_path);
    if (!args.out_override.empty()) cfg.out_dir = args.out_override;
    if (args.seed_set) cfg.train.seed = args.seed;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Shift-response estimation with targeted-regularization networks"};
    app.require_subcommand(1);

    CommonArgs sim_args, train_args, est_args, bench_args, ens_args;
    CLI::App* sim = app.add_subcommand("simulate", "Generate a synthetic dataset and its true curve");
    add_common(sim, sim_args);
    CLI::App* trn = app.add_subcommand("train", "Train a model and write it with its loss history");
    add_common(trn, train_args);
    CLI::App* est = app.add_subcommand("estimate", "Evaluate a trained model's shift-response curve");
    add_common(est, est_args);
    CLI::App* bench = app.add_subcommand("benchmark", "Seed-swept estimator comparison table");
    add_common(bench, bench_args);
    CLI::App* ens = app.add_subcommand("ensemble", "Bootstrap-ensemble uncertainty bands");
    add_common(ens, ens_args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (sim->parsed()) {
            tresnet::cmd_simulate(load_config(sim_args), std::cout);
        } else if (trn->parsed()) {
            tresnet::cmd_train(load_config(train_args), std::cout);
        } else if (est->parsed()) {
            tresnet::cmd_estimate(load_config(est_args), std::cout);
        } else if (bench->parsed()) {
            tresnet::cmd_benchmark(load_config(bench_args), bench_args.jobs, std::cout);
        } else if (ens->parsed()) {
            tresnet::cmd_ensemble(load_config(ens_args), ens_args.jobs, std::cout);
        }
    } catch (const tresnet::ConfigError& err) {
        std::cerr << "config error: " << err.what() << "\n";
        return 1;
    } catch (const tresnet::IoError& err) {
        std::cerr << "io error: " << err.what() << "\n";
        return 3;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    }
    return 0;
}
