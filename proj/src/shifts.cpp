#include "tresnet/shifts.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tresnet {

const std::string& shift_kind_name(ShiftKind k) {
    static const std::string names[] = {"percent", "cutoff", "pairwise"};
    return names[static_cast<int>(k)];
}

ShiftSpec ShiftSpec::percent(double c) {
    if (!(c >= 0.0 && c < 1.0)) {
        throw ConfigError("percent shift parameter must lie in [0, 1), got " + std::to_string(c));
    }
    ShiftSpec s;
    s.kind = ShiftKind::PercentReduction;
    s.param = c;
    return s;
}

ShiftSpec ShiftSpec::cutoff(double c) {
    if (!std::isfinite(c)) throw ConfigError("cutoff shift parameter must be finite");
    ShiftSpec s;
    s.kind = ShiftKind::Cutoff;
    s.param = c;
    return s;
}

ShiftSpec ShiftSpec::pairwise(std::string column) {
    if (column.empty()) throw ConfigError("pairwise shift needs a column name");
    ShiftSpec s;
    s.kind = ShiftKind::Pairwise;
    s.pairwise_column = std::move(column);
    return s;
}

std::string ShiftSpec::label() const {
    if (kind == ShiftKind::Pairwise) return "pairwise:" + pairwise_column;
    std::ostringstream os;
    os << shift_kind_name(kind) << ":" << param;
    return os.str();
}

bool ShiftSpec::operator==(const ShiftSpec& other) const {
    if (kind != other.kind) return false;
    if (kind == ShiftKind::Pairwise) return pairwise_column == other.pairwise_column;
    return param == other.param;
}

namespace {

double parse_real(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("cannot parse " + what + " from '" + s + "'");
    }
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    parts.push_back(cur);
    return parts;
}

ShiftKind kind_from_name(const std::string& name) {
    if (name == "percent") return ShiftKind::PercentReduction;
    if (name == "cutoff") return ShiftKind::Cutoff;
    if (name == "pairwise") return ShiftKind::Pairwise;
    throw ConfigError("unknown shift kind '" + name + "' (expected percent|cutoff|pairwise)");
}

}  // namespace

std::vector<ShiftSpec> parse_shift_grammar(const std::string& token) {
    const auto parts = split(token, ':');
    if (parts.size() == 5 && parts[0] == "grid") {
        const ShiftKind kind = kind_from_name(parts[1]);
        if (kind == ShiftKind::Pairwise) throw ConfigError("grid of pairwise shifts is not expressible");
        const double lo = parse_real(parts[2], "grid lower bound");
        const double hi = parse_real(parts[3], "grid upper bound");
        const double kf = parse_real(parts[4], "grid size");
        if (kf < 1.0 || kf != std::floor(kf)) throw ConfigError("grid size must be a positive integer");
        return shift_grid(kind, lo, hi, static_cast<std::size_t>(kf));
    }
    if (parts.size() != 2) {
        throw ConfigError("cannot parse shift '" + token +
                          "' (expected kind:param, pairwise:column, or grid:kind:lo:hi:k)");
    }
    const ShiftKind kind = kind_from_name(parts[0]);
    switch (kind) {
        case ShiftKind::PercentReduction: return {ShiftSpec::percent(parse_real(parts[1], "percent parameter"))};
        case ShiftKind::Cutoff: return {ShiftSpec::cutoff(parse_real(parts[1], "cutoff parameter"))};
        case ShiftKind::Pairwise: return {ShiftSpec::pairwise(parts[1])};
    }
    throw ConfigError("unreachable shift kind");
}

ShiftFamily::ShiftFamily(std::vector<ShiftSpec> specs) : specs_(std::move(specs)) {
    if (specs_.empty()) throw ConfigError("shift family must contain at least one shift");
    for (std::size_t i = 0; i < specs_.size(); ++i) {
        for (std::size_t j = i + 1; j < specs_.size(); ++j) {
            if (specs_[i] == specs_[j]) {
                throw ConfigError("duplicate shift '" + specs_[i].label() + "' in shift family");
            }
        }
    }
}

std::string ShiftFamily::label() const {
    std::string out;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
        if (i) out += ';';
        out += specs_[i].label();
    }
    return out;
}

ShiftFamily ShiftFamily::from_label(const std::string& label) {
    std::vector<ShiftSpec> specs;
    std::istringstream is(label);
    std::string token;
    while (std::getline(is, token, ';')) {
        if (token.empty()) continue;
        auto parsed = parse_shift_grammar(token);
        specs.insert(specs.end(), parsed.begin(), parsed.end());
    }
    return ShiftFamily(std::move(specs));
}

std::vector<double> apply_shift(const ShiftSpec& spec, std::span<const double> a,
                                std::span<const double> pairwise_source) {
    if (spec.kind == ShiftKind::Pairwise) {
        if (pairwise_source.empty()) {
            throw ConfigError("pairwise shift '" + spec.pairwise_column + "' has no source column");
        }
        if (pairwise_source.size() != a.size()) {
            throw ShapeError("pairwise column length " + std::to_string(pairwise_source.size()) +
                             " does not match exposure length " + std::to_string(a.size()));
        }
        return std::vector<double>(pairwise_source.begin(), pairwise_source.end());
    }
    if (!pairwise_source.empty()) {
        throw ConfigError("pairwise source supplied for a non-pairwise shift");
    }
    std::vector<double> out(a.size());
    if (spec.kind == ShiftKind::PercentReduction) {
        const double scale = 1.0 - spec.param;
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = scale * a[i];
    } else {
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::min(a[i], spec.param);
    }
    return out;
}

std::vector<ShiftSpec> shift_grid(ShiftKind kind, double lo, double hi, std::size_t k) {
    if (k == 0) throw ConfigError("shift grid needs at least one point");
    if (lo > hi) throw ConfigError("shift grid bounds are inverted");
    std::vector<ShiftSpec> specs;
    specs.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        const double c = (k == 1) ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(k - 1);
        specs.push_back(kind == ShiftKind::PercentReduction ? ShiftSpec::percent(c) : ShiftSpec::cutoff(c));
    }
    return specs;
}

double oracle_log_ratio_percent(double c, double m, double s, double a) {
    if (!(c >= 0.0 && c < 1.0)) {
        throw DomainError("percent-shift density ratio needs c in [0, 1), got " + std::to_string(c));
    }
    if (!(s > 0.0)) throw DomainError("conditional sd must be positive");
    // Shifted exposure (1-c)A of a N(m, s^2) variable has density
    // N(a/(1-c); m, s^2) / (1-c); the ratio against N(a; m, s^2) follows.
    const double scale = 1.0 - c;
    const double z_shift = (a / scale - m) / s;
    const double z_obs = (a - m) / s;
    return -0.5 * z_shift * z_shift + 0.5 * z_obs * z_obs - std::log(scale);
}

PositivityReport screen_positivity(std::span<const double> observed, std::span<const double> shifted) {
    PositivityReport report;
    report.total = shifted.size();
    if (observed.empty()) return report;
    double lo = observed[0], hi = observed[0];
    for (double v : observed) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double margin = 0.05 * (hi - lo);
    report.lo = lo - margin;
    report.hi = hi + margin;
    for (double v : shifted) {
        if (v < report.lo || v > report.hi) ++report.violations;
    }
    return report;
}

}  // namespace tresnet
