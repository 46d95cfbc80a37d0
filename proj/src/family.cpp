#include "tresnet/family.hpp"

#include <cmath>

namespace tresnet {

Family family_from_name(const std::string& name) {
    if (name == "gaussian") return Family::Gaussian;
    if (name == "poisson") return Family::Poisson;
    if (name == "bernoulli") return Family::Bernoulli;
    throw ConfigError("unknown family '" + name + "' (expected gaussian|poisson|bernoulli)");
}

const std::string& family_name(Family f) {
    static const std::string names[] = {"gaussian", "poisson", "bernoulli"};
    return names[static_cast<int>(f)];
}

double cumulant(Family f, double eta) {
    switch (f) {
        case Family::Gaussian: return 0.5 * eta * eta;
        case Family::Poisson: return std::exp(eta);
        case Family::Bernoulli: return std::max(eta, 0.0) + std::log1p(std::exp(-std::abs(eta)));
    }
    return 0.0;
}

double mean_from_natural(Family f, double eta) {
    switch (f) {
        case Family::Gaussian: return eta;
        case Family::Poisson: return std::exp(eta);
        case Family::Bernoulli:
            if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
            {
                const double e = std::exp(eta);
                return e / (1.0 + e);
            }
    }
    return 0.0;
}

double natural_from_mean(Family f, double mu) {
    switch (f) {
        case Family::Gaussian: return mu;
        case Family::Poisson:
            if (mu <= 0.0) throw DomainError("poisson mean must be positive, got " + std::to_string(mu));
            return std::log(mu);
        case Family::Bernoulli:
            if (mu <= 0.0 || mu >= 1.0) {
                throw DomainError("bernoulli mean must lie in (0,1), got " + std::to_string(mu));
            }
            return std::log(mu / (1.0 - mu));
    }
    return 0.0;
}

void check_outcome_domain(Family f, double y) {
    switch (f) {
        case Family::Gaussian:
            if (!std::isfinite(y)) throw DomainError("gaussian outcome must be finite");
            return;
        case Family::Poisson:
            if (!(y >= 0.0)) throw DomainError("poisson outcome must be nonnegative, got " + std::to_string(y));
            return;
        case Family::Bernoulli:
            if (y != 0.0 && y != 1.0) {
                throw DomainError("bernoulli outcome must be 0 or 1, got " + std::to_string(y));
            }
            return;
    }
}

double nll(Family f, double eta, double y) {
    check_outcome_domain(f, y);
    return cumulant(f, eta) - y * eta;
}

ad::Tensor cumulant_expr(ad::Tape& tape, Family f, const ad::Tensor& eta) {
    switch (f) {
        case Family::Gaussian: return tape.mul(tape.square(eta), ad::Tensor::scalar(0.5));
        case Family::Poisson: return tape.exp(eta);
        case Family::Bernoulli: return tape.softplus(eta);
    }
    throw DomainError("cumulant_expr: unknown family");
}

}  // namespace tresnet
