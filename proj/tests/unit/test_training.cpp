#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "tresnet/estimators.hpp"
#include "tresnet/rng.hpp"
#include "tresnet/training.hpp"

using namespace tresnet;

namespace {

ModelConfig tiny_config(Family family = Family::Gaussian) {
    ModelConfig cfg;
    cfg.backbone_layers = 1;
    cfg.backbone_width = 6;
    cfg.head_hidden_layers = 1;
    cfg.head_width = 6;
    cfg.family = family;
    return cfg;
}

Dataset tiny_dataset(std::uint64_t seed, Family family = Family::Gaussian, std::int64_t n = 16) {
    Dataset data;
    Rng rng(seed);
    data.n = n;
    data.d = 2;
    data.family = family;
    for (std::int64_t i = 0; i < n; ++i) {
        data.x.push_back(rng.uniform(-1.0, 1.0));
        data.x.push_back(rng.uniform(-1.0, 1.0));
        data.a.push_back(rng.uniform(0.0, 1.0));
        data.y.push_back(family == Family::Poisson ? static_cast<double>(rng.poisson(2.0))
                                                   : rng.normal(0.0, 1.0));
    }
    return data;
}

TresnetModel seeded_model(const ModelConfig& cfg, const Dataset& data, std::size_t n_shifts,
                          std::uint64_t seed) {
    TresnetModel model(cfg, data.d, n_shifts, seed);
    model.fit_exposure_range(data.a);
    return model;
}

void zero_parameters(TresnetModel& model) {
    for (auto& p : model.parameters()) {
        for (double& v : p.tensor->values) v = 0.0;
    }
}

// Finite differences of one objective component with respect to one named
// parameter tensor, all other parameters held fixed.
double objective_grad_error(TresnetModel& model, const TrainBatch& batch, const TrainConfig& cfg,
                            const std::string& param_name, int component) {
    auto params = model.parameters();
    ad::Tensor* target = nullptr;
    for (auto& p : params) {
        if (p.name == param_name) target = p.tensor;
    }
    REQUIRE(target != nullptr);
    const ad::Tensor point = *target;

    auto f = [&](ad::Tape& tape, const ad::Tensor& p) {
        *target = p;
        RiskTerms terms = build_objective(tape, model, batch, cfg, batch.size());
        *target = point;
        switch (component) {
            case 0: return terms.outcome;
            case 1: return terms.ratio;
            case 2: return terms.tr;
            default: return terms.total;
        }
    };
    return ad::grad_check(f, point, 1e-5);
}

}  // namespace

TEST_CASE("outcome risk analytic values at the null parameter") {
    // Gaussian: eta == 0 everywhere makes every per-sample loss zero.
    Dataset data = tiny_dataset(1);
    ModelConfig cfg = tiny_config();
    TresnetModel model = seeded_model(cfg, data, 1, 0);
    zero_parameters(model);
    const ShiftFamily shifts({ShiftSpec::percent(0.3)});
    TrainBatch batch = TrainBatch::from_dataset(data, shifts);
    CHECK(outcome_risk(model, batch) == doctest::Approx(0.0));

    // Poisson with a single observed count of 2: risk is exp(0) - 2*0 = 1.
    Dataset pdata = tiny_dataset(2, Family::Poisson, 1);
    pdata.y[0] = 2.0;
    TresnetModel pmodel = seeded_model(tiny_config(Family::Poisson), pdata, 1, 0);
    zero_parameters(pmodel);
    TrainBatch pbatch = TrainBatch::from_dataset(pdata, shifts);
    CHECK(outcome_risk(pmodel, pbatch) == doctest::Approx(1.0));
}

TEST_CASE("uninformative classifier sits at the log-two plateau") {
    Dataset data = tiny_dataset(3);
    TresnetModel model = seeded_model(tiny_config(), data, 2, 0);
    zero_parameters(model);
    const ShiftFamily shifts({ShiftSpec::percent(0.2), ShiftSpec::percent(0.4)});
    TrainBatch batch = TrainBatch::from_dataset(data, shifts);
    CHECK(ratio_risk(model, batch) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("unit weights and zero fluctuation reduce the regularizer to the outcome risk") {
    Dataset data = tiny_dataset(4);
    TresnetModel model = seeded_model(tiny_config(), data, 2, 7);
    // Zero only the ratio heads so the log ratios vanish while the outcome
    // path stays generic.
    for (auto& p : model.parameters()) {
        if (p.name.rfind("ratio", 0) == 0 || p.name.rfind("epsilon", 0) == 0) {
            for (double& v : p.tensor->values) v = 0.0;
        }
    }
    const ShiftFamily shifts({ShiftSpec::percent(0.2), ShiftSpec::percent(0.4)});
    TrainBatch batch = TrainBatch::from_dataset(data, shifts);
    CHECK(tr_risk(model, batch) == doctest::Approx(outcome_risk(model, batch)).epsilon(1e-14));
}

TEST_CASE("risk gradients match finite differences") {
    Dataset data = tiny_dataset(5);
    ModelConfig mcfg = tiny_config();
    const ShiftFamily shifts({ShiftSpec::percent(0.25)});
    TrainBatch batch = TrainBatch::from_dataset(data, shifts);
    TrainConfig tcfg;
    tcfg.alpha = 0.7;
    tcfg.beta0 = 1.3;
    // The joint objective: a detached ratio factor is a stop-gradient, which
    // a difference quotient cannot see, so gradient checks use full flow.
    tcfg.detach_ratio_in_tr = false;

    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        TresnetModel model = seeded_model(mcfg, data, 1, seed + 100);
        for (const char* name :
             {"backbone.0.weight", "outcome.0.coeff2", "ratio0.1.coeff0", "epsilon.0"}) {
            CHECK(objective_grad_error(model, batch, tcfg, name, 3) < 1e-4);
        }
        CHECK(objective_grad_error(model, batch, tcfg, "outcome.1.coeff0", 0) < 1e-4);
        CHECK(objective_grad_error(model, batch, tcfg, "ratio0.0.coeff1", 1) < 1e-4);
        CHECK(objective_grad_error(model, batch, tcfg, "backbone.0.bias", 2) < 1e-4);
    }
}

TEST_CASE("covariate-mode regularizer also matches finite differences") {
    Dataset data = tiny_dataset(6);
    const ShiftFamily shifts({ShiftSpec::percent(0.25)});
    TrainBatch batch = TrainBatch::from_dataset(data, shifts);
    TrainConfig tcfg;
    tcfg.tr_mode = TrMode::CleverCovariate;
    TresnetModel model = seeded_model(tiny_config(), data, 1, 11);
    CHECK(objective_grad_error(model, batch, tcfg, "epsilon.0", 2) < 1e-4);
    CHECK(objective_grad_error(model, batch, tcfg, "ratio0.0.coeff0", 2) < 1e-4);
}

TEST_CASE("detached ratio weights stop the regularizer gradient into the ratio head") {
    Dataset data = tiny_dataset(7);
    const ShiftFamily shifts({ShiftSpec::percent(0.25)});
    TrainBatch batch = TrainBatch::from_dataset(data, shifts);
    TresnetModel model = seeded_model(tiny_config(), data, 1, 13);
    TrainConfig detached;
    detached.detach_ratio_in_tr = true;

    auto params = model.parameters();
    ad::Tensor* ratio_param = nullptr;
    for (auto& p : params) {
        if (p.name == "ratio0.0.coeff0") ratio_param = p.tensor;
    }
    REQUIRE(ratio_param != nullptr);

    ad::Tape tape;
    ad::Tensor leafed = tape.leaf(*ratio_param);
    const ad::Tensor saved = *ratio_param;
    *ratio_param = leafed;
    RiskTerms terms = build_objective(tape, model, batch, detached, batch.size());
    *ratio_param = saved;
    auto grads = tape.backward(terms.tr);
    for (double v : grads.at(leafed.node).values) CHECK(v == 0.0);
}

TEST_CASE("total objective weighting") {
    Dataset data = tiny_dataset(8);
    const ShiftFamily shifts({ShiftSpec::percent(0.3)});
    TrainBatch batch = TrainBatch::from_dataset(data, shifts);
    TresnetModel model = seeded_model(tiny_config(), data, 1, 17);

    TrainConfig plain;
    plain.alpha = 0.0;
    plain.beta0 = 0.0;
    CHECK(total_objective(model, batch, plain, batch.size()) ==
          doctest::Approx(outcome_risk(model, batch)).epsilon(1e-14));

    TrainConfig cfg;
    cfg.beta0 = 1.0;
    CHECK(cfg.beta_n(100) == doctest::Approx(0.1));
    CHECK(total_objective(model, batch, cfg, 100) ==
          doctest::Approx(outcome_risk(model, batch) + cfg.alpha * ratio_risk(model, batch) +
                          0.1 * tr_risk(model, batch))
              .epsilon(1e-12));
}

TEST_CASE("batch size policy") {
    TrainConfig cfg;
    CHECK(cfg.resolve_batch(5000) == 5000);
    CHECK(cfg.resolve_batch(5001) == 256);
    cfg.batch_size = 64;
    CHECK(cfg.resolve_batch(5000) == 64);
    CHECK(cfg.resolve_batch(10) == 10);
}

TEST_CASE("fluctuation stationarity matches the closed forms") {
    // Gaussian: the optimal offset is the ratio-weighted mean residual.
    Dataset data = tiny_dataset(9, Family::Gaussian, 64);
    const ShiftFamily shifts({ShiftSpec::percent(0.35)});
    TresnetModel model = seeded_model(tiny_config(), data, 1, 19);
    TrainBatch batch = TrainBatch::from_dataset(data, shifts);

    const ad::Tensor x = ad::Tensor::matrix(data.n, data.d, data.x);
    const ad::Tensor eta = model.outcome_forward(x, data.a);
    const ad::Tensor log_w = model.ratio_forward(x, data.a);
    double sw = 0.0, swr = 0.0, swy = 0.0, swm = 0.0;
    for (std::int64_t i = 0; i < data.n; ++i) {
        const double w = std::exp(log_w.values[static_cast<std::size_t>(i)]);
        const double e = eta.values[static_cast<std::size_t>(i)];
        sw += w;
        swr += w * (data.y[static_cast<std::size_t>(i)] - e);
        swy += w * data.y[static_cast<std::size_t>(i)];
        swm += w * std::exp(e);
    }
    const double closed_form = swr / sw;

    auto tr_of = [&](double eps) {
        model.set_epsilon({eps});
        return tr_risk(model, batch);
    };
    const double by_search = test_util::golden_section_min(tr_of, -10.0, 10.0, 1e-10);
    CHECK(by_search == doctest::Approx(closed_form).epsilon(1e-6));

    const auto refit = refit_epsilon(model, data, shifts);
    CHECK(refit[0] == doctest::Approx(closed_form).epsilon(1e-8));

    // Poisson: exp(eps) equals the weighted outcome over weighted mean ratio.
    Dataset pdata = tiny_dataset(10, Family::Poisson, 64);
    TresnetModel pmodel = seeded_model(tiny_config(Family::Poisson), pdata, 1, 23);
    const ad::Tensor px = ad::Tensor::matrix(pdata.n, pdata.d, pdata.x);
    const ad::Tensor peta = pmodel.outcome_forward(px, pdata.a);
    const ad::Tensor plw = pmodel.ratio_forward(px, pdata.a);
    double psw_y = 0.0, psw_mu = 0.0;
    for (std::int64_t i = 0; i < pdata.n; ++i) {
        const double w = std::exp(plw.values[static_cast<std::size_t>(i)]);
        psw_y += w * pdata.y[static_cast<std::size_t>(i)];
        psw_mu += w * std::exp(peta.values[static_cast<std::size_t>(i)]);
    }
    const auto prefit = refit_epsilon(pmodel, pdata, shifts);
    CHECK(prefit[0] == doctest::Approx(std::log(psw_y / psw_mu)).epsilon(1e-8));
}

TEST_CASE("regularizer is convex in the fluctuation parameter") {
    Dataset data = tiny_dataset(11, Family::Poisson, 32);
    const ShiftFamily shifts({ShiftSpec::percent(0.2)});
    TresnetModel model = seeded_model(tiny_config(Family::Poisson), data, 1, 29);
    TrainBatch batch = TrainBatch::from_dataset(data, shifts);
    auto tr_of = [&](double eps) {
        model.set_epsilon({eps});
        return tr_risk(model, batch);
    };
    for (double eps = -2.0; eps <= 2.0; eps += 0.25) {
        const double h = 0.125;
        CHECK(tr_of(eps - h) - 2.0 * tr_of(eps) + tr_of(eps + h) >= -1e-10);
    }
}

TEST_CASE("refit leaves the estimating equation solved and perturbations break it") {
    Dataset data = tiny_dataset(12, Family::Gaussian, 128);
    const ShiftFamily shifts({ShiftSpec::percent(0.15), ShiftSpec::percent(0.45)});
    TresnetModel model = seeded_model(tiny_config(), data, 2, 31);
    refit_epsilon(model, data, shifts);

    double sd = test_util::sample_sd(data.y);
    for (std::size_t j = 0; j < shifts.size(); ++j) {
        const double r = eee_residual(model, data, shifts, j);
        CHECK(std::abs(r) < 1e-8 * sd);
    }

    auto eps = model.epsilon_values();
    for (double delta : {0.01, -0.01}) {
        auto perturbed = eps;
        perturbed[0] += delta;
        model.set_epsilon(perturbed);
        CHECK(std::abs(eee_residual(model, data, shifts, 0)) > 1e-4);
    }
}

TEST_CASE("refit reports an unbracketed fluctuation") {
    Dataset data = tiny_dataset(13, Family::Gaussian, 32);
    for (double& y : data.y) y += 100.0;  // optimum far outside [-30, 30]
    const ShiftFamily shifts({ShiftSpec::percent(0.2)});
    TresnetModel model = seeded_model(tiny_config(), data, 1, 37);
    CHECK_THROWS_AS((void)refit_epsilon(model, data, shifts), NumericError);
}

TEST_CASE("training a constant outcome converges to the constant") {
    Dataset data = tiny_dataset(14, Family::Gaussian, 64);
    for (double& y : data.y) y = 3.0;
    const ShiftFamily shifts({ShiftSpec::percent(0.0)});
    ModelConfig mcfg = tiny_config();
    TrainConfig tcfg;
    tcfg.epochs = 400;
    tcfg.learning_rate = 1e-2;
    tcfg.seed = 5;
    const TrainResult result = train(data, shifts, mcfg, tcfg);
    const ad::Tensor x = ad::Tensor::matrix(data.n, data.d, data.x);
    const auto mu = result.model.predict_mean(x, data.a);
    for (double m : mu) CHECK(m == doctest::Approx(3.0).epsilon(0.05));
}

TEST_CASE("objective trends downward over the first epochs") {
    const Dataset data = gen_nonlinear(400, 21, Family::Gaussian);
    const ShiftFamily shifts({ShiftSpec::percent(0.25)});
    ModelConfig mcfg = tiny_config();
    mcfg.backbone_width = 16;
    mcfg.head_width = 16;
    TrainConfig tcfg;
    tcfg.epochs = 50;
    tcfg.seed = 3;
    const TrainResult result = train(data, shifts, mcfg, tcfg);
    const double initial = result.history.front().total;
    double best = initial;
    for (const EpochStats& s : result.history) {
        CHECK(s.total <= best + 0.05 * std::abs(initial));
        best = std::min(best, s.total);
    }
    CHECK(result.history.back().total < initial);
}

TEST_CASE("trained risk approaches the irreducible noise level") {
    const Dataset data = gen_linear(2000, 33);
    const Split parts = split(data, 0.2, 101);
    const ShiftFamily shifts({ShiftSpec::percent(0.5)});
    ModelConfig mcfg;
    mcfg.backbone_layers = 2;
    mcfg.backbone_width = 16;
    mcfg.head_hidden_layers = 1;
    mcfg.head_width = 16;
    TrainConfig tcfg;
    tcfg.epochs = 400;
    tcfg.learning_rate = 3e-3;
    tcfg.seed = 9;
    const TrainResult result = train(parts.train, shifts, mcfg, tcfg);

    TrainBatch test_batch = TrainBatch::from_dataset(parts.test, shifts);
    const double test_risk = outcome_risk(result.model, test_batch);
    // Oracle risk on the same test rows.
    double floor = 0.0;
    for (std::int64_t i = 0; i < parts.test.n; ++i) {
        const double eta = parts.test.oracle_eta(parts.test.x_row(i), parts.test.a[i]);
        floor += nll(Family::Gaussian, eta, parts.test.y[i]);
    }
    floor /= static_cast<double>(parts.test.n);
    CHECK(std::abs(test_risk - floor) < 0.1 * std::abs(floor));
}

TEST_CASE("training is deterministic given the seed") {
    const Dataset data = gen_nonlinear(200, 4, Family::Gaussian);
    const ShiftFamily shifts({ShiftSpec::percent(0.3)});
    ModelConfig mcfg = tiny_config();
    TrainConfig tcfg;
    tcfg.epochs = 30;
    tcfg.seed = 77;
    const TrainResult r1 = train(data, shifts, mcfg, tcfg);
    const TrainResult r2 = train(data, shifts, mcfg, tcfg);
    REQUIRE(r1.history.size() == r2.history.size());
    for (std::size_t e = 0; e < r1.history.size(); ++e) {
        CHECK(r1.history[e].total == r2.history[e].total);
        CHECK(r1.history[e].outcome == r2.history[e].outcome);
        CHECK(r1.history[e].ratio == r2.history[e].ratio);
        CHECK(r1.history[e].tr == r2.history[e].tr);
    }
    CHECK(r1.model.epsilon_values() == r2.model.epsilon_values());
}

TEST_CASE("divergent training aborts with a diagnostic") {
    Dataset data = tiny_dataset(15, Family::Poisson, 32);
    for (double& y : data.y) y = 1e6;  // forces exploding natural parameters
    const ShiftFamily shifts({ShiftSpec::percent(0.2)});
    ModelConfig mcfg = tiny_config(Family::Poisson);
    TrainConfig tcfg;
    tcfg.epochs = 2000;
    tcfg.learning_rate = 10.0;
    CHECK_THROWS_AS((void)train(data, shifts, mcfg, tcfg), NumericError);
}

TEST_CASE("bernoulli outcomes ride the same training path") {
    Rng rng(91);
    Dataset data;
    data.n = 200;
    data.d = 2;
    data.family = Family::Bernoulli;
    for (std::int64_t i = 0; i < data.n; ++i) {
        const double x0 = rng.uniform(-1.0, 1.0);
        const double x1 = rng.uniform(-1.0, 1.0);
        const double a = rng.uniform(0.0, 1.0);
        const double p = 1.0 / (1.0 + std::exp(-(x0 + a)));
        data.x.push_back(x0);
        data.x.push_back(x1);
        data.a.push_back(a);
        data.y.push_back(rng.uniform01() < p ? 1.0 : 0.0);
    }
    const ShiftFamily shifts({ShiftSpec::percent(0.2)});
    ModelConfig mcfg = tiny_config(Family::Bernoulli);
    TrainConfig tcfg;
    tcfg.epochs = 60;
    tcfg.seed = 91;
    const TrainResult fit = train(data, shifts, mcfg, tcfg);
    const auto psi = tr_srf(fit.model, data, shifts);
    CHECK(psi[0] > 0.0);
    CHECK(psi[0] < 1.0);
    const double sd = test_util::sample_sd(data.y);
    CHECK(std::abs(eee_residual(fit.model, data, shifts, 0)) < 1e-8 * sd);
}

TEST_CASE("minibatch epochs cover every row deterministically") {
    const Dataset data = gen_nonlinear(600, 6, Family::Gaussian);
    const ShiftFamily shifts({ShiftSpec::percent(0.3)});
    ModelConfig mcfg = tiny_config();
    TrainConfig tcfg;
    tcfg.epochs = 8;
    tcfg.batch_size = 128;
    tcfg.seed = 123;
    const TrainResult r1 = train(data, shifts, mcfg, tcfg);
    const TrainResult r2 = train(data, shifts, mcfg, tcfg);
    for (std::size_t e = 0; e < r1.history.size(); ++e) CHECK(r1.history[e].total == r2.history[e].total);
}
