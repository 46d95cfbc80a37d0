#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tresnet/errors.hpp"

namespace tresnet::ad {

using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

class Tape;

/// Dense row-major tensor of doubles. When produced by a recording tape the
/// `node` handle points back into that tape; tensors detached from any tape
/// (parameters between steps, dataset columns, constants) carry kNoNode.
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> values;
    NodeId node = kNoNode;
    const Tape* owner = nullptr;

    Tensor() = default;
    Tensor(std::vector<std::int64_t> s, std::vector<double> v);

    static Tensor zeros(std::vector<std::int64_t> shape);
    static Tensor full(std::vector<std::int64_t> shape, double value);
    static Tensor scalar(double value);
    static Tensor column(std::span<const double> v);             // {n, 1}
    static Tensor row(std::span<const double> v);                // {1, n}
    static Tensor matrix(std::int64_t r, std::int64_t c, std::vector<double> v);

    std::int64_t numel() const;
    bool is_scalar() const { return numel() == 1; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
    std::int64_t rows() const;
    std::int64_t cols() const;

    double& at(std::int64_t i, std::int64_t j);
    double at(std::int64_t i, std::int64_t j) const;
    double scalar_value() const;
    bool all_finite() const;
};

enum class OpKind : std::uint8_t {
    Leaf,
    Matmul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Relu,
    Square,
    Sum,
    Mean,
    RowGather,
    ColConcat,
    BroadcastRow,
};

const char* op_name(OpKind k);

/// Evaluate a primitive without any tape involvement. Shape and domain rules
/// are identical to the recorded path.
Tensor eval_primitive(OpKind kind, std::span<const Tensor* const> inputs,
                      std::span<const std::int64_t> aux = {});

using GradientMap = std::unordered_map<NodeId, Tensor>;

/// Records primitive applications for reverse-mode differentiation. A tape is
/// single-owner while recording; the tensors it hands out stay valid until
/// reset(). With recording disabled, apply() computes values and leaves the
/// tape untouched.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    /// Register an explicit differentiation root/leaf. Returns a copy of `t`
    /// bound to this tape (passthrough when recording is off).
    Tensor leaf(const Tensor& t);

    Tensor apply(OpKind kind, std::span<const Tensor* const> inputs,
                 std::span<const std::int64_t> aux = {});

    // Convenience wrappers over apply().
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor div(const Tensor& a, const Tensor& b);
    Tensor neg(const Tensor& a);
    Tensor exp(const Tensor& a);
    Tensor log(const Tensor& a);
    Tensor sigmoid(const Tensor& a);
    Tensor softplus(const Tensor& a);
    Tensor relu(const Tensor& a);
    Tensor square(const Tensor& a);
    Tensor sum(const Tensor& a);
    Tensor mean(const Tensor& a);
    Tensor row_gather(const Tensor& a, std::span<const std::int64_t> rows);
    Tensor col_concat(std::span<const Tensor* const> parts);
    Tensor col_concat(const Tensor& a, const Tensor& b);
    Tensor broadcast_row(const Tensor& a, std::int64_t rows);

    /// clamp(x, lo, hi) composed from the primitive set:
    /// lo + relu(x - lo) - relu(x - hi). Exact at and beyond the bounds.
    Tensor clamp(const Tensor& x, double lo, double hi);

    /// Reverse sweep from a scalar root. Returns the gradient of the root with
    /// respect to every leaf; leaves the root does not depend on map to zero
    /// tensors of the leaf's shape.
    GradientMap backward(const Tensor& root) const;
    GradientMap backward(NodeId root) const;

    std::size_t size() const { return nodes_.size(); }
    void reset();

    /// Re-runs every recorded primitive forward and compares against the
    /// cached outputs bit for bit. Test hook for the tape invariant.
    bool replay_matches() const;

    const Tensor& node_value(NodeId id) const;

  private:
    struct Node {
        OpKind kind;
        std::vector<NodeId> inputs;
        std::vector<std::int64_t> aux;
        Tensor out;
    };

    NodeId record(OpKind kind, std::vector<NodeId> inputs,
                  std::vector<std::int64_t> aux, Tensor out);
    NodeId node_of(const Tensor& t);

    std::vector<Node> nodes_;
    bool recording_ = true;
};

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued tensor function. `step` is the half-width of the
/// central difference.
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& function,
                  const Tensor& point, double step);

}  // namespace tresnet::ad
