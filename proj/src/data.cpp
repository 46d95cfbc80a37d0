#include "tresnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tresnet/rng.hpp"

namespace tresnet {

namespace {

constexpr double kPi = 3.14159265358979323846;

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

std::string format_full(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

Dataset take_rows(const Dataset& data, std::span<const std::int64_t> rows) {
    Dataset out;
    out.n = static_cast<std::int64_t>(rows.size());
    out.d = data.d;
    out.family = data.family;
    out.oracle_eta = data.oracle_eta;
    out.oracle_log_w_percent = data.oracle_log_w_percent;
    out.generator_label = data.generator_label;
    out.x.reserve(rows.size() * static_cast<std::size_t>(data.d));
    out.a.reserve(rows.size());
    out.y.reserve(rows.size());
    for (auto& [name, col] : data.pairwise_columns) out.pairwise_columns[name].reserve(rows.size());
    for (std::int64_t r : rows) {
        auto row = data.x_row(r);
        out.x.insert(out.x.end(), row.begin(), row.end());
        out.a.push_back(data.a[static_cast<std::size_t>(r)]);
        out.y.push_back(data.y[static_cast<std::size_t>(r)]);
        for (auto& [name, col] : data.pairwise_columns) {
            out.pairwise_columns[name].push_back(col[static_cast<std::size_t>(r)]);
        }
    }
    return out;
}

}  // namespace

void Dataset::validate() const {
    if (n < 1) throw ConfigError("dataset is empty");
    if (d < 1) throw ConfigError("dataset has no covariates");
    if (static_cast<std::int64_t>(x.size()) != n * d || static_cast<std::int64_t>(a.size()) != n ||
        static_cast<std::int64_t>(y.size()) != n) {
        throw ShapeError("dataset columns have inconsistent lengths");
    }
    for (double v : x) {
        if (!std::isfinite(v)) throw DomainError("dataset covariates contain non-finite values");
    }
    for (double v : a) {
        if (!std::isfinite(v)) throw DomainError("dataset exposures contain non-finite values");
    }
    for (double v : y) check_outcome_domain(family, v);
    if (family == Family::Poisson) {
        for (double v : y) {
            if (v != std::floor(v)) {
                throw DomainError("poisson outcomes must be nonnegative integers, got " + std::to_string(v));
            }
        }
    }
    for (const auto& [name, col] : pairwise_columns) {
        if (static_cast<std::int64_t>(col.size()) != n) {
            throw ShapeError("pairwise column '" + name + "' has wrong length");
        }
    }
}

std::vector<double> shifted_exposures(const Dataset& data, const ShiftSpec& spec) {
    if (spec.kind == ShiftKind::Pairwise) {
        auto it = data.pairwise_columns.find(spec.pairwise_column);
        if (it == data.pairwise_columns.end()) {
            throw ConfigError("dataset has no pairwise shift column '" + spec.pairwise_column +
                              "' (expected CSV column a_tilde_" + spec.pairwise_column + ")");
        }
        return apply_shift(spec, data.a, it->second);
    }
    return apply_shift(spec, data.a);
}

Dataset gen_linear(std::int64_t n, std::uint64_t seed, double noise_sd) {
    if (n < 1) throw ConfigError("generator needs n >= 1");
    if (noise_sd < 0.0) throw ConfigError("noise sd must be nonnegative");
    Rng rng(seed);
    Dataset data;
    data.n = n;
    data.d = 1;
    data.family = Family::Gaussian;
    data.x.resize(static_cast<std::size_t>(n));
    data.a.resize(static_cast<std::size_t>(n));
    data.y.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = rng.normal();
        const double a = x + rng.normal();
        const double y = a * x + noise_sd * rng.normal();
        data.x[static_cast<std::size_t>(i)] = x;
        data.a[static_cast<std::size_t>(i)] = a;
        data.y[static_cast<std::size_t>(i)] = y;
    }
    data.oracle_eta = [](std::span<const double> x, double a) { return a * x[0]; };
    // A | X=x is N(x, 1), so the percent-shift density ratio has a closed form.
    data.oracle_log_w_percent = [](double c, std::span<const double> x, double a) {
        return oracle_log_ratio_percent(c, x[0], 1.0, a);
    };
    std::ostringstream label;
    label << "linear n=" << n << " seed=" << seed << " noise_sd=" << noise_sd;
    data.generator_label = label.str();
    return data;
}

double nonlinear_eta(std::span<const double> x, double a) {
    return 0.2 + (x[0] + x[1] + x[4]) / 3.0 + 4.0 * a * (1.0 - a) + std::sin(2.0 * kPi * a) * (x[2] - 0.5) +
           a * x[3];
}

namespace {

double nonlinear_confounder_score(std::span<const double> x) {
    return x[0] + 2.0 * x[1] - x[2] - 0.5 * x[3] - 0.75;
}

// Density of A | X for the nonlinear generator: A = 0.1 + 0.8*sigmoid(t + z/2)
// with z standard normal, i.e. a change of variables through the logit.
double nonlinear_log_density_a(std::span<const double> x, double a) {
    const double u = (a - 0.1) / 0.8;
    if (u <= 0.0 || u >= 1.0) return -std::numeric_limits<double>::infinity();
    const double t = nonlinear_confounder_score(x);
    const double z = (std::log(u / (1.0 - u)) - t) / 0.5;
    const double log_phi = -0.5 * z * z - 0.5 * std::log(2.0 * kPi);
    const double log_jacobian = -std::log(0.5) - std::log(0.8) - std::log(u) - std::log1p(-u);
    return log_phi + log_jacobian;
}

}  // namespace

Dataset gen_nonlinear(std::int64_t n, std::uint64_t seed, Family family) {
    if (n < 1) throw ConfigError("generator needs n >= 1");
    if (family == Family::Bernoulli) throw ConfigError("nonlinear generator supports gaussian|poisson");
    Rng rng(seed);
    Dataset data;
    data.n = n;
    data.d = 6;
    data.family = family;
    data.x.resize(static_cast<std::size_t>(n * 6));
    data.a.resize(static_cast<std::size_t>(n));
    data.y.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        double* row = data.x.data() + i * 6;
        for (int j = 0; j < 6; ++j) row[j] = rng.uniform01();
        const double t = nonlinear_confounder_score({row, 6});
        const double a = 0.1 + 0.8 * sigmoid(t + 0.5 * rng.normal());
        const double eta = nonlinear_eta({row, 6}, a);
        data.a[static_cast<std::size_t>(i)] = a;
        if (family == Family::Gaussian) {
            data.y[static_cast<std::size_t>(i)] = eta + 0.5 * rng.normal();
        } else {
            data.y[static_cast<std::size_t>(i)] = static_cast<double>(rng.poisson(std::exp(eta)));
        }
    }
    data.oracle_eta = [](std::span<const double> x, double a) { return nonlinear_eta(x, a); };
    data.oracle_log_w_percent = [](double c, std::span<const double> x, double a) {
        if (!(c >= 0.0 && c < 1.0)) throw DomainError("percent parameter out of range");
        if (c == 0.0) return 0.0;
        const double scale = 1.0 - c;
        const double shifted_density = nonlinear_log_density_a(x, a / scale) - std::log(scale);
        const double observed_density = nonlinear_log_density_a(x, a);
        return shifted_density - observed_density;  // -inf when a lies outside the shifted support
    };
    std::ostringstream label;
    label << "nonlinear n=" << n << " seed=" << seed << " family=" << family_name(family);
    data.generator_label = label.str();
    return data;
}

std::vector<double> oracle_srf(const Dataset& data, const ShiftFamily& shifts) {
    if (!data.has_oracle()) throw ConfigError("dataset carries no ground-truth mean");
    std::vector<double> psi(shifts.size(), 0.0);
    for (std::size_t j = 0; j < shifts.size(); ++j) {
        const std::vector<double> a_tilde = shifted_exposures(data, shifts[j]);
        double acc = 0.0;
        for (std::int64_t i = 0; i < data.n; ++i) {
            acc += data.oracle_mean(i, a_tilde[static_cast<std::size_t>(i)]);
        }
        psi[j] = acc / static_cast<double>(data.n);
    }
    return psi;
}

double mise(const std::vector<std::vector<double>>& estimates, const std::vector<std::vector<double>>& truths) {
    if (estimates.size() != truths.size() || estimates.empty()) {
        throw ShapeError("mise: estimate and truth seed counts differ or are empty");
    }
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < estimates.size(); ++s) {
        if (estimates[s].size() != truths[s].size() || estimates[s].empty()) {
            throw ShapeError("mise: per-seed shift counts differ or are empty");
        }
        for (std::size_t j = 0; j < estimates[s].size(); ++j) {
            const double e = estimates[s][j] - truths[s][j];
            acc += e * e;
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    cells.push_back(cur);
    return cells;
}

double parse_cell(const std::string& cell, std::size_t line_no, const std::string& column) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(cell, &pos);
        if (pos != cell.size()) throw std::invalid_argument(cell);
        return v;
    } catch (const std::exception&) {
        throw IoError("line " + std::to_string(line_no) + ": non-numeric cell '" + cell + "' in column " +
                      column);
    }
}

}  // namespace

Dataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "' for reading");

    std::string header;
    if (!std::getline(in, header)) throw IoError("'" + path + "' is empty");
    const auto columns = split_line(header);

    std::int64_t d = 0;
    std::int64_t a_col = -1, y_col = -1;
    std::vector<std::pair<std::int64_t, std::string>> pairwise;  // column index, name
    std::vector<std::int64_t> x_cols(columns.size(), -1);
    for (std::size_t c = 0; c < columns.size(); ++c) {
        const std::string& name = columns[c];
        if (name == "a") {
            a_col = static_cast<std::int64_t>(c);
        } else if (name == "y") {
            y_col = static_cast<std::int64_t>(c);
        } else if (name.rfind("a_tilde_", 0) == 0) {
            pairwise.emplace_back(static_cast<std::int64_t>(c), name.substr(8));
        } else if (name.rfind("x_", 0) == 0) {
            std::int64_t idx = 0;
            try {
                idx = std::stoll(name.substr(2));
            } catch (const std::exception&) {
                throw IoError("unrecognized column '" + name + "' in '" + path + "'");
            }
            if (idx < 1) throw IoError("covariate columns start at x_1, got '" + name + "'");
            d = std::max(d, idx);
            if (static_cast<std::size_t>(idx) > x_cols.size()) x_cols.resize(static_cast<std::size_t>(idx), -1);
            x_cols[static_cast<std::size_t>(idx - 1)] = static_cast<std::int64_t>(c);
        } else {
            throw IoError("unrecognized column '" + name + "' in '" + path + "'");
        }
    }
    if (a_col < 0) throw IoError("'" + path + "' is missing mandatory column 'a'");
    if (y_col < 0) throw IoError("'" + path + "' is missing mandatory column 'y'");
    if (d == 0) throw IoError("'" + path + "' has no covariate columns x_1..x_d");
    for (std::int64_t j = 0; j < d; ++j) {
        if (x_cols[static_cast<std::size_t>(j)] < 0) {
            throw IoError("'" + path + "' is missing covariate column x_" + std::to_string(j + 1));
        }
    }

    Dataset data;
    data.d = d;
    for (auto& [c, name] : pairwise) data.pairwise_columns[name] = {};

    std::string line;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split_line(line);
        if (cells.size() != columns.size()) {
            throw IoError("line " + std::to_string(line_no) + ": expected " + std::to_string(columns.size()) +
                          " cells, got " + std::to_string(cells.size()));
        }
        for (std::int64_t j = 0; j < d; ++j) {
            const auto c = static_cast<std::size_t>(x_cols[static_cast<std::size_t>(j)]);
            data.x.push_back(parse_cell(cells[c], line_no, columns[c]));
        }
        data.a.push_back(parse_cell(cells[static_cast<std::size_t>(a_col)], line_no, "a"));
        data.y.push_back(parse_cell(cells[static_cast<std::size_t>(y_col)], line_no, "y"));
        for (auto& [c, name] : pairwise) {
            data.pairwise_columns[name].push_back(
                parse_cell(cells[static_cast<std::size_t>(c)], line_no, "a_tilde_" + name));
        }
        ++data.n;
    }
    if (data.n == 0) throw IoError("'" + path + "' contains a header but no rows");
    data.generator_label = "csv " + path;
    return data;
}

void save_csv(const Dataset& data, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (std::int64_t j = 0; j < data.d; ++j) out << "x_" << (j + 1) << ",";
    out << "a,y";
    for (const auto& [name, col] : data.pairwise_columns) out << ",a_tilde_" << name;
    out << "\n";
    for (std::int64_t i = 0; i < data.n; ++i) {
        for (std::int64_t j = 0; j < data.d; ++j) {
            out << format_full(data.x[static_cast<std::size_t>(i * data.d + j)]) << ",";
        }
        out << format_full(data.a[static_cast<std::size_t>(i)]) << ","
            << format_full(data.y[static_cast<std::size_t>(i)]);
        for (const auto& [name, col] : data.pairwise_columns) {
            out << "," << format_full(col[static_cast<std::size_t>(i)]);
        }
        out << "\n";
    }
    if (!out) throw IoError("write to '" + path + "' failed");
}

void save_metadata(const Dataset& data, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "n=" << data.n << "\n";
    out << "d=" << data.d << "\n";
    out << "family=" << family_name(data.family) << "\n";
    out << "generator=" << data.generator_label << "\n";
    for (const auto& [name, col] : data.pairwise_columns) out << "pairwise_column=" << name << "\n";
    if (!out) throw IoError("write to '" + path + "' failed");
}

Split split(const Dataset& data, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw ConfigError("test fraction must lie strictly between 0 and 1");
    }
    std::vector<std::int64_t> order(static_cast<std::size_t>(data.n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    const auto n_test = static_cast<std::int64_t>(std::llround(test_fraction * static_cast<double>(data.n)));
    if (n_test == 0 || n_test == data.n) {
        throw ConfigError("split leaves one side empty (n=" + std::to_string(data.n) +
                          ", fraction=" + std::to_string(test_fraction) + ")");
    }
    Split result;
    result.test_rows.assign(order.begin(), order.begin() + n_test);
    result.train_rows.assign(order.begin() + n_test, order.end());
    std::sort(result.test_rows.begin(), result.test_rows.end());
    std::sort(result.train_rows.begin(), result.train_rows.end());
    result.train = take_rows(data, result.train_rows);
    result.test = take_rows(data, result.test_rows);
    return result;
}

Dataset resample(const Dataset& data, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::int64_t> rows(static_cast<std::size_t>(data.n));
    for (auto& r : rows) r = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(data.n)));
    return take_rows(data, rows);
}

}  // namespace tresnet
