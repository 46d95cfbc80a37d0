#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "tresnet/data.hpp"

using namespace tresnet;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("generators are seed deterministic") {
    const Dataset a = gen_linear(500, 42);
    const Dataset b = gen_linear(500, 42);
    CHECK(a.x == b.x);
    CHECK(a.a == b.a);
    CHECK(a.y == b.y);
    const Dataset c = gen_linear(500, 43);
    CHECK(a.y != c.y);

    const Dataset p1 = gen_nonlinear(300, 7, Family::Poisson);
    const Dataset p2 = gen_nonlinear(300, 7, Family::Poisson);
    CHECK(p1.y == p2.y);
}

TEST_CASE("linear generator ground truth") {
    const Dataset data = gen_linear(1000000, 1);
    // Halving shift: the counterfactual mean tends to 0.5.
    const ShiftFamily shifts({ShiftSpec::percent(0.5), ShiftSpec::percent(0.0)});
    const auto psi = oracle_srf(data, shifts);
    CHECK(psi[0] == doctest::Approx(0.5).epsilon(0.02));
    // Identity shift: mean of A*X tends to Var(X) = 1.
    CHECK(psi[1] == doctest::Approx(1.0).epsilon(0.02));
    // Fixed-exposure curve is identically zero: mean(a * X) -> a * 0.
    double xbar = test_util::mean(data.x);
    CHECK(std::abs(3.0 * xbar) < 0.01);
}

TEST_CASE("nonlinear generator formula value") {
    std::vector<double> x(6, 0.5);
    CHECK(nonlinear_eta(x, 0.5) == doctest::Approx(1.95));
}

TEST_CASE("nonlinear exposures stay inside the open unit interval scaled to (0.1, 0.9)") {
    const Dataset data = gen_nonlinear(20000, 3, Family::Gaussian);
    for (double a : data.a) {
        CHECK(a > 0.1);
        CHECK(a < 0.9);
    }
}

TEST_CASE("nonlinear poisson rates stay below 40") {
    // Monte-Carlo range check over a large draw.
    const Dataset data = gen_nonlinear(1000000, 11, Family::Poisson);
    double max_rate = 0.0;
    for (std::int64_t i = 0; i < data.n; ++i) {
        max_rate = std::max(max_rate, std::exp(nonlinear_eta(data.x_row(i), data.a[i])));
    }
    CHECK(max_rate < 40.0);
    CHECK(max_rate > 1.0);
}

TEST_CASE("nonlinear generator actually confounds") {
    const Dataset data = gen_nonlinear(10000, 5, Family::Gaussian);
    std::vector<double> x2(static_cast<std::size_t>(data.n));
    for (std::int64_t i = 0; i < data.n; ++i) x2[static_cast<std::size_t>(i)] = data.x_row(i)[1];
    CHECK(test_util::pearson(data.a, x2) > 0.3);
}

TEST_CASE("oracle curve on the identity shift is the mean oracle outcome") {
    const Dataset data = gen_nonlinear(2000, 9, Family::Gaussian);
    const ShiftFamily shifts({ShiftSpec::percent(0.0)});
    const auto psi = oracle_srf(data, shifts);
    double acc = 0.0;
    for (std::int64_t i = 0; i < data.n; ++i) acc += data.oracle_mean(i, data.a[i]);
    CHECK(psi[0] == doctest::Approx(acc / static_cast<double>(data.n)).epsilon(1e-14));
}

TEST_CASE("constant oracle gives a flat curve") {
    Dataset data = gen_linear(100, 2);
    data.oracle_eta = [](std::span<const double>, double) { return 1.25; };
    const ShiftFamily shifts({ShiftSpec::percent(0.0), ShiftSpec::percent(0.3), ShiftSpec::cutoff(0.5)});
    const auto psi = oracle_srf(data, shifts);
    for (double p : psi) CHECK(p == doctest::Approx(1.25));
}

TEST_CASE("mise analytic values") {
    CHECK(mise({{1.0, 2.0}}, {{1.0, 2.0}}) == doctest::Approx(0.0));
    CHECK(mise({{1.5, 2.5}, {0.5, 1.5}}, {{1.0, 2.0}, {0.0, 1.0}}) == doctest::Approx(0.25));
    CHECK_THROWS_AS((void)mise({{1.0}}, {{1.0, 2.0}}), ShapeError);
}

TEST_CASE("csv round trip is lossless") {
    Dataset data = gen_linear(100, 21);
    data.pairwise_columns["cut9"] = std::vector<double>(100, 9.0);
    const std::string path = temp_path("tresnet_test_roundtrip.csv");
    save_csv(data, path);
    const Dataset back = load_csv(path);
    REQUIRE(back.n == data.n);
    REQUIRE(back.d == data.d);
    double worst = 0.0;
    for (std::size_t i = 0; i < data.x.size(); ++i) worst = std::max(worst, std::abs(data.x[i] - back.x[i]));
    for (std::size_t i = 0; i < data.a.size(); ++i) worst = std::max(worst, std::abs(data.a[i] - back.a[i]));
    for (std::size_t i = 0; i < data.y.size(); ++i) worst = std::max(worst, std::abs(data.y[i] - back.y[i]));
    CHECK(worst < 1e-12);
    REQUIRE(back.pairwise_columns.count("cut9") == 1);
    CHECK(back.pairwise_columns.at("cut9") == data.pairwise_columns.at("cut9"));
    std::remove(path.c_str());
}

TEST_CASE("csv loader reports missing and malformed input precisely") {
    const std::string path = temp_path("tresnet_test_bad.csv");
    {
        std::ofstream out(path);
        out << "x_1,a\n1.0,2.0\n";
    }
    CHECK_THROWS_WITH_AS((void)load_csv(path), doctest::Contains("missing mandatory column 'y'"), IoError);
    {
        std::ofstream out(path);
        out << "x_1,a,y\n1.0,2.0,3.0\n1.0,oops,3.0\n";
    }
    CHECK_THROWS_WITH_AS((void)load_csv(path), doctest::Contains("line 3"), IoError);
    {
        std::ofstream out(path);
        out << "x_1,a,y\n1.0,2.0\n";
    }
    CHECK_THROWS_WITH_AS((void)load_csv(path), doctest::Contains("line 2"), IoError);
    {
        std::ofstream out(path);
        out << "x_1,x_3,a,y\n1.0,2.0,3.0,4.0\n";
    }
    CHECK_THROWS_WITH_AS((void)load_csv(path), doctest::Contains("x_2"), IoError);
    std::remove(path.c_str());
    CHECK_THROWS_AS((void)load_csv(path), IoError);
}

TEST_CASE("pairwise csv columns drive pairwise shifts end to end") {
    const std::string path = temp_path("tresnet_test_pairwise.csv");
    {
        std::ofstream out(path);
        out << "x_1,a,y,a_tilde_cut9\n0.5,10.0,1.0,9.0\n0.6,8.0,2.0,8.0\n";
    }
    const Dataset data = load_csv(path);
    const auto shifted = shifted_exposures(data, ShiftSpec::pairwise("cut9"));
    CHECK(shifted == std::vector<double>{9.0, 8.0});
    CHECK_THROWS_AS((void)shifted_exposures(data, ShiftSpec::pairwise("missing")), ConfigError);
    std::remove(path.c_str());
}

TEST_CASE("metadata sidecar lists the dataset descriptors") {
    const Dataset data = gen_nonlinear(50, 2, Family::Poisson);
    const std::string path = temp_path("tresnet_test_meta.txt");
    save_metadata(data, path);
    std::ifstream in(path);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(content.find("n=50") != std::string::npos);
    CHECK(content.find("d=6") != std::string::npos);
    CHECK(content.find("family=poisson") != std::string::npos);
    std::remove(path.c_str());
}

TEST_CASE("split sizes, determinism, and partition") {
    const Dataset data = gen_linear(10, 5);
    const Split s1 = split(data, 0.2, 99);
    CHECK(s1.test.n == 2);
    CHECK(s1.train.n == 8);
    const Split s2 = split(data, 0.2, 99);
    CHECK(s1.test_rows == s2.test_rows);
    std::vector<bool> seen(10, false);
    for (auto r : s1.test_rows) seen[static_cast<std::size_t>(r)] = true;
    for (auto r : s1.train_rows) {
        CHECK(!seen[static_cast<std::size_t>(r)]);
        seen[static_cast<std::size_t>(r)] = true;
    }
    for (bool b : seen) CHECK(b);
    CHECK_THROWS_AS((void)split(data, 0.01, 1), ConfigError);
    CHECK_THROWS_AS((void)split(data, 1.0, 1), ConfigError);
}

TEST_CASE("poisson dataset validation rejects fractional outcomes") {
    Dataset data = gen_nonlinear(20, 1, Family::Poisson);
    CHECK_NOTHROW(data.validate());
    data.y[3] = 1.5;
    CHECK_THROWS_AS(data.validate(), DomainError);
}

TEST_CASE("nonlinear density-ratio oracle integrates to one against the observed law") {
    // E[w(X, A)] over the observed joint law equals 1 for each percent shift.
    const Dataset data = gen_nonlinear(200000, 17, Family::Gaussian);
    for (double c : {0.1, 0.3}) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < data.n; ++i) {
            acc += std::exp(data.oracle_log_w_percent(c, data.x_row(i), data.a[i]));
        }
        CHECK(acc / static_cast<double>(data.n) == doctest::Approx(1.0).epsilon(0.02));
    }
}
