#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tresnet/autodiff.hpp"
#include "tresnet/family.hpp"

namespace tresnet {

/// Bases over the normalized exposure t in [0,1]. Spline is the truncated
/// power basis of degree 2 with knots {1/3, 2/3}; piecewise-linear is the
/// hinge basis on the same knots.
enum class BasisKind { Spline, PiecewiseLinear };

BasisKind basis_from_name(const std::string& name);
const std::string& basis_name(BasisKind k);
int basis_dim(BasisKind k);
void eval_basis(BasisKind k, double t, std::span<double> out);

struct ModelConfig {
    int backbone_layers = 2;
    int backbone_width = 32;
    int head_hidden_layers = 1;
    int head_width = 32;
    BasisKind basis = BasisKind::Spline;
    Family family = Family::Gaussian;
    double ratio_clamp = 50.0;  // bound M on the density ratio

    void validate() const;
};

/// Dense layer whose effective weight is an exposure-dependent combination of
/// basis functions: W(a) = sum_b coeff[b] * phi_b(t(a)). One coefficient
/// matrix per basis function, each of shape {in, out}.
struct VCLayer {
    std::vector<ad::Tensor> coeff;
    bool activation = false;

    std::int64_t in_dim() const { return coeff.front().shape[0]; }
    std::int64_t out_dim() const { return coeff.front().shape[1]; }
};

struct DenseLayer {
    ad::Tensor weight;  // {in, out}
    ad::Tensor bias;    // {1, out}
};

struct ParamRef {
    std::string name;
    ad::Tensor* tensor;
};

/// Shared confounder backbone, one varying-coefficient outcome head, one
/// varying-coefficient log-density-ratio head per shift, and one fluctuation
/// parameter per shift.
class TresnetModel {
  public:
    TresnetModel(ModelConfig cfg, std::int64_t in_dim, std::size_t n_shifts, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    std::int64_t in_dim() const { return in_dim_; }
    std::size_t n_shifts() const { return ratio_heads_.size(); }

    /// Affine exposure normalization fitted from training exposures.
    void fit_exposure_range(std::span<const double> a);
    bool exposure_fitted() const { return exposure_fitted_; }
    /// t = clamp((a - min) / (max - min), 0, 1). Out-of-range inputs are
    /// clamped and counted as positivity warnings.
    double normalize_exposure(double a) const;
    long positivity_clamps() const { return positivity_clamps_; }
    void reset_positivity_clamps() { positivity_clamps_ = 0; }

    // Recorded forward passes. With the tape's recording disabled these are
    // plain evaluations.
    ad::Tensor backbone(ad::Tape& tape, const ad::Tensor& x) const;
    ad::Tensor outcome_head(ad::Tape& tape, const ad::Tensor& z, std::span<const double> a) const;
    /// Clamped log density ratio for one shift.
    ad::Tensor ratio_head(ad::Tape& tape, const ad::Tensor& z, std::span<const double> a,
                          std::size_t shift) const;

    /// Natural parameter eta(X, A), shape {n, 1}; evaluation only.
    ad::Tensor outcome_forward(const ad::Tensor& x, std::span<const double> a) const;
    /// Log density ratios, shape {n, n_shifts}; evaluation only.
    ad::Tensor ratio_forward(const ad::Tensor& x, std::span<const double> a) const;
    /// Convenience: mean predictions g^{-1}(eta(X, A)).
    std::vector<double> predict_mean(const ad::Tensor& x, std::span<const double> a) const;

    /// Every trainable tensor exactly once: backbone, heads, fluctuations.
    std::vector<ParamRef> parameters();

    std::vector<double> epsilon_values() const;
    const ad::Tensor& epsilon_tensor(std::size_t shift) const { return epsilon_.at(shift); }
    void set_epsilon(std::vector<double> eps);
    bool fluctuation_ready() const { return fluctuation_ready_; }
    void mark_fluctuation_stale() { fluctuation_ready_ = false; }

    const std::string& shift_label() const { return shift_label_; }
    void set_shift_label(std::string label) { shift_label_ = std::move(label); }

    void save(const std::string& path) const;
    static TresnetModel load(const std::string& path);

  private:
    ad::Tensor vc_stack(ad::Tape& tape, const std::vector<VCLayer>& stack, const ad::Tensor& z,
                        std::span<const double> a) const;

    ModelConfig cfg_;
    std::int64_t in_dim_ = 0;
    std::vector<DenseLayer> backbone_;
    std::vector<VCLayer> outcome_head_;
    std::vector<std::vector<VCLayer>> ratio_heads_;
    std::vector<ad::Tensor> epsilon_;  // scalar tensors, one per shift
    double a_min_ = 0.0;
    double a_max_ = 1.0;
    bool exposure_fitted_ = false;
    bool fluctuation_ready_ = false;
    std::string shift_label_;
    mutable long positivity_clamps_ = 0;
};

}  // namespace tresnet
