#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "tresnet/model.hpp"
#include "tresnet/rng.hpp"

using namespace tresnet;

namespace {

ModelConfig small_config(BasisKind basis = BasisKind::Spline) {
    ModelConfig cfg;
    cfg.backbone_layers = 2;
    cfg.backbone_width = 8;
    cfg.head_hidden_layers = 1;
    cfg.head_width = 8;
    cfg.basis = basis;
    return cfg;
}

TresnetModel fitted_model(const ModelConfig& cfg, std::int64_t in_dim, std::size_t n_shifts,
                          std::uint64_t seed) {
    TresnetModel model(cfg, in_dim, n_shifts, seed);
    const std::vector<double> range{0.0, 1.0};
    model.fit_exposure_range(range);
    return model;
}

ad::Tensor random_matrix(std::int64_t r, std::int64_t c, Rng& rng) {
    ad::Tensor t = ad::Tensor::zeros({r, c});
    for (double& v : t.values) v = rng.uniform(-1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("basis values at the knots") {
    double spline[5];
    eval_basis(BasisKind::Spline, 0.0, spline);
    CHECK(spline[0] == 1.0);
    CHECK(spline[1] == 0.0);
    CHECK(spline[2] == 0.0);
    CHECK(spline[3] == 0.0);
    CHECK(spline[4] == 0.0);
    eval_basis(BasisKind::Spline, 1.0, spline);
    CHECK(spline[0] == 1.0);
    CHECK(spline[1] == 1.0);
    CHECK(spline[2] == 1.0);
    CHECK(spline[3] == doctest::Approx((2.0 / 3.0) * (2.0 / 3.0)));
    CHECK(spline[4] == doctest::Approx((1.0 / 3.0) * (1.0 / 3.0)));
    eval_basis(BasisKind::Spline, 1.0 / 3.0, spline);
    CHECK(spline[3] == doctest::Approx(0.0));
    eval_basis(BasisKind::Spline, 2.0 / 3.0, spline);
    CHECK(spline[3] == doctest::Approx((1.0 / 3.0) * (1.0 / 3.0)));
    CHECK(spline[4] == doctest::Approx(0.0));

    double pl[4];
    eval_basis(BasisKind::PiecewiseLinear, 1.0, pl);
    CHECK(pl[0] == 1.0);
    CHECK(pl[1] == 1.0);
    CHECK(pl[2] == doctest::Approx(2.0 / 3.0));
    CHECK(pl[3] == doctest::Approx(1.0 / 3.0));

    CHECK(basis_dim(BasisKind::Spline) == 5);
    CHECK(basis_dim(BasisKind::PiecewiseLinear) == 4);
}

TEST_CASE("basis functions are finite and continuous on the unit interval") {
    for (BasisKind k : {BasisKind::Spline, BasisKind::PiecewiseLinear}) {
        const int nb = basis_dim(k);
        std::vector<double> prev(static_cast<std::size_t>(nb));
        std::vector<double> cur(static_cast<std::size_t>(nb));
        eval_basis(k, 0.0, prev);
        for (int step = 1; step <= 1000; ++step) {
            eval_basis(k, step / 1000.0, cur);
            for (int b = 0; b < nb; ++b) {
                CHECK(std::isfinite(cur[static_cast<std::size_t>(b)]));
                CHECK(std::abs(cur[static_cast<std::size_t>(b)] - prev[static_cast<std::size_t>(b)]) < 5e-3);
            }
            prev = cur;
        }
    }
}

TEST_CASE("exposure normalization clamps and counts") {
    TresnetModel model = fitted_model(small_config(), 2, 1, 0);
    const std::vector<double> range{2.0, 6.0};
    model.fit_exposure_range(range);
    CHECK(model.normalize_exposure(2.0) == 0.0);
    CHECK(model.normalize_exposure(6.0) == 1.0);
    CHECK(model.normalize_exposure(4.0) == doctest::Approx(0.5));
    model.reset_positivity_clamps();
    CHECK(model.normalize_exposure(7.0) == 1.0);
    CHECK(model.normalize_exposure(1.0) == 0.0);
    CHECK(model.positivity_clamps() == 2);

    TresnetModel unfitted(small_config(), 2, 1, 0);
    CHECK_THROWS_AS((void)unfitted.normalize_exposure(1.0), NumericError);
}

TEST_CASE("zero coefficients produce the null natural parameter") {
    TresnetModel model = fitted_model(small_config(), 3, 2, 1);
    for (auto& p : model.parameters()) {
        for (double& v : p.tensor->values) v = 0.0;
    }
    Rng rng(2);
    const ad::Tensor x = random_matrix(5, 3, rng);
    const std::vector<double> a{0.1, 0.3, 0.5, 0.7, 0.9};
    const ad::Tensor eta = model.outcome_forward(x, a);
    for (double v : eta.values) CHECK(v == 0.0);
    const auto mu = model.predict_mean(x, a);
    for (double v : mu) CHECK(v == doctest::Approx(mean_from_natural(model.config().family, 0.0)));

    const ad::Tensor log_w = model.ratio_forward(x, a);
    for (double v : log_w.values) CHECK(v == 0.0);
}

TEST_CASE("ratio outputs are clamped to the log bound exactly") {
    ModelConfig cfg = small_config();
    cfg.ratio_clamp = 50.0;
    const double bound = std::log(50.0);
    Rng rng(4);
    const ad::Tensor x = random_matrix(20, 2, rng);
    std::vector<double> a(20);
    for (double& v : a) v = rng.uniform01();

    for (double sign : {1.0, -1.0}) {
        TresnetModel model = fitted_model(cfg, 2, 1, 3);
        // Zero backbone, huge constant-sign head coefficients: only the
        // constant input column feeds the head, so the raw log ratio
        // saturates at +-1e13 before the clamp.
        for (auto& p : model.parameters()) {
            const bool is_ratio = p.name.rfind("ratio", 0) == 0;
            const bool is_final = is_ratio && p.name.find(".1.") != std::string::npos;
            for (double& v : p.tensor->values) {
                if (!is_ratio) v = 0.0;
                else v = is_final ? sign * 1e6 : 1e6;
            }
        }
        const ad::Tensor log_w = model.ratio_forward(x, a);
        for (double v : log_w.values) {
            CHECK(std::abs(v) <= bound);
            CHECK(std::abs(v - sign * bound) < 1e-12);
        }
    }
}

TEST_CASE("natural parameter is continuous in the exposure") {
    Rng rng(6);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        TresnetModel model = fitted_model(small_config(), 4, 1, seed);
        const ad::Tensor x = random_matrix(1, 4, rng);
        for (int i = 0; i < 20; ++i) {
            const double a = rng.uniform(0.05, 0.95);
            const std::vector<double> a0{a}, a1{a + 1e-6};
            const double e0 = model.outcome_forward(x, a0).scalar_value();
            const double e1 = model.outcome_forward(x, a1).scalar_value();
            CHECK(std::abs(e1 - e0) < 1e-3);
        }
    }
}

TEST_CASE("different exposures give different outputs on almost every seeded model") {
    Rng rng(8);
    int distinct = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        TresnetModel model = fitted_model(small_config(), 3, 1, seed);
        const ad::Tensor x = random_matrix(1, 3, rng);
        const std::vector<double> a0{0.2}, a1{0.8};
        const double e0 = model.outcome_forward(x, a0).scalar_value();
        const double e1 = model.outcome_forward(x, a1).scalar_value();
        if (std::abs(e0 - e1) > 0.0) ++distinct;
    }
    CHECK(distinct >= 99);
}

TEST_CASE("parameter enumeration is complete and unique") {
    ModelConfig cfg = small_config();
    TresnetModel model(cfg, 3, 2, 0);
    auto params = model.parameters();
    std::set<std::string> names;
    std::set<const ad::Tensor*> tensors;
    for (const auto& p : params) {
        names.insert(p.name);
        tensors.insert(p.tensor);
    }
    CHECK(names.size() == params.size());
    CHECK(tensors.size() == params.size());
    // backbone (2 layers x weight+bias) + 3 head stacks x 2 layers x 5 bases + 2 fluctuations
    const std::size_t expected = 2 * 2 + 3 * 2 * 5 + 2;
    CHECK(params.size() == expected);
}

TEST_CASE("model save and load round trips bit for bit") {
    ModelConfig cfg = small_config(BasisKind::PiecewiseLinear);
    cfg.family = Family::Poisson;
    TresnetModel model = fitted_model(cfg, 3, 2, 9);
    model.set_shift_label("percent:0.1;percent:0.2");
    model.set_epsilon({0.25, -0.5});
    const std::string path =
        (std::filesystem::temp_directory_path() / "tresnet_test_model.txt").string();
    model.save(path);
    TresnetModel back = TresnetModel::load(path);

    CHECK(back.config().family == Family::Poisson);
    CHECK(back.config().basis == BasisKind::PiecewiseLinear);
    CHECK(back.shift_label() == model.shift_label());
    CHECK(back.fluctuation_ready());
    CHECK(back.epsilon_values() == model.epsilon_values());

    auto p0 = model.parameters();
    auto p1 = back.parameters();
    REQUIRE(p0.size() == p1.size());
    for (std::size_t i = 0; i < p0.size(); ++i) {
        CHECK(p0[i].name == p1[i].name);
        CHECK(p0[i].tensor->values == p1[i].tensor->values);
    }

    Rng rng(10);
    const ad::Tensor x = random_matrix(7, 3, rng);
    std::vector<double> a(7);
    for (double& v : a) v = rng.uniform01();
    CHECK(model.outcome_forward(x, a).values == back.outcome_forward(x, a).values);
    std::remove(path.c_str());

    CHECK_THROWS_AS((void)TresnetModel::load(path), IoError);
}

TEST_CASE("forward passes on finite inputs stay finite") {
    Rng rng(12);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        TresnetModel model = fitted_model(small_config(), 5, 3, seed);
        const ad::Tensor x = random_matrix(16, 5, rng);
        std::vector<double> a(16);
        for (double& v : a) v = rng.uniform01();
        CHECK(model.outcome_forward(x, a).all_finite());
        CHECK(model.ratio_forward(x, a).all_finite());
    }
}
