#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tresnet/errors.hpp"

namespace tresnet {

enum class ShiftKind { PercentReduction, Cutoff, Pairwise };

const std::string& shift_kind_name(ShiftKind k);

/// Declarative description of an exposure shift. Percent reduction maps
/// a -> (1-c)a with 0 <= c < 1; cutoff maps a -> min(a, c); pairwise takes a
/// precomputed column of shifted exposures verbatim.
struct ShiftSpec {
    ShiftKind kind = ShiftKind::PercentReduction;
    double param = 0.0;
    std::string pairwise_column;

    static ShiftSpec percent(double c);
    static ShiftSpec cutoff(double c);
    static ShiftSpec pairwise(std::string column);

    /// Grammar form, e.g. "percent:0.3", "cutoff:9", "pairwise:cut9".
    std::string label() const;

    bool operator==(const ShiftSpec& other) const;
};

/// Parse a single grammar token ("percent:0.3" | "cutoff:9" | "pairwise:col")
/// or expand "grid:<kind>:<lo>:<hi>:<k>".
std::vector<ShiftSpec> parse_shift_grammar(const std::string& token);

/// Ordered, non-empty set of pairwise-distinct shifts.
class ShiftFamily {
  public:
    explicit ShiftFamily(std::vector<ShiftSpec> specs);

    const std::vector<ShiftSpec>& specs() const { return specs_; }
    std::size_t size() const { return specs_.size(); }
    const ShiftSpec& operator[](std::size_t i) const { return specs_[i]; }
    auto begin() const { return specs_.begin(); }
    auto end() const { return specs_.end(); }

    /// Joined grammar labels, ';'-separated; inverse of from_label.
    std::string label() const;
    static ShiftFamily from_label(const std::string& label);

  private:
    std::vector<ShiftSpec> specs_;
};

/// Apply one shift to an exposure vector. `pairwise_source` must be present
/// exactly when the spec is pairwise.
std::vector<double> apply_shift(const ShiftSpec& spec, std::span<const double> a,
                                std::span<const double> pairwise_source = {});

/// k shift parameters equally spaced on [lo, hi] inclusive.
std::vector<ShiftSpec> shift_grid(ShiftKind kind, double lo, double hi, std::size_t k);

/// Closed-form log density ratio for a percent-reduction shift when the
/// conditional exposure law is Gaussian with mean m and standard deviation s:
/// log of the shifted conditional density over the observed one at `a`.
double oracle_log_ratio_percent(double c, double m, double s, double a);

struct PositivityReport {
    std::size_t violations = 0;
    std::size_t total = 0;
    double lo = 0.0;
    double hi = 0.0;
};

/// Count shifted exposures outside the observed range widened by 5% on each
/// side. A nonzero count is a practical warning sign for the bounded density
/// ratio assumption.
PositivityReport screen_positivity(std::span<const double> observed, std::span<const double> shifted);

}  // namespace tresnet
