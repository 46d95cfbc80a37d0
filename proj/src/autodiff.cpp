#include "tresnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace tresnet::ad {

namespace {

std::string shape_str(const std::vector<std::int64_t>& s) {
    std::ostringstream os;
    os << "{";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "}";
    return os.str();
}

[[noreturn]] void shape_fail(OpKind k, const std::string& detail) {
    throw ShapeError(std::string(op_name(k)) + ": " + detail);
}

std::int64_t product(const std::vector<std::int64_t>& s) {
    std::int64_t p = 1;
    for (auto d : s) p *= d;
    return p;
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> s, std::vector<double> v)
    : shape(std::move(s)), values(std::move(v)) {
    if (product(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape) {
    auto n = product(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
    auto n = product(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::column(std::span<const double> v) {
    return Tensor({static_cast<std::int64_t>(v.size()), 1}, std::vector<double>(v.begin(), v.end()));
}

Tensor Tensor::row(std::span<const double> v) {
    return Tensor({1, static_cast<std::int64_t>(v.size())}, std::vector<double>(v.begin(), v.end()));
}

Tensor Tensor::matrix(std::int64_t r, std::int64_t c, std::vector<double> v) {
    return Tensor({r, c}, std::move(v));
}

std::int64_t Tensor::numel() const { return product(shape); }

std::int64_t Tensor::rows() const {
    if (shape.empty()) return 1;
    return shape[0];
}

std::int64_t Tensor::cols() const {
    if (shape.size() < 2) return 1;
    return shape[1];
}

double& Tensor::at(std::int64_t i, std::int64_t j) { return values[static_cast<std::size_t>(i * cols() + j)]; }

double Tensor::at(std::int64_t i, std::int64_t j) const {
    return values[static_cast<std::size_t>(i * cols() + j)];
}

double Tensor::scalar_value() const {
    if (!is_scalar()) throw ShapeError("scalar_value: tensor has " + std::to_string(numel()) + " elements");
    return values[0];
}

bool Tensor::all_finite() const {
    for (double v : values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Matmul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::Neg: return "neg";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Softplus: return "softplus";
        case OpKind::Relu: return "relu";
        case OpKind::Square: return "square";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::RowGather: return "row-gather";
        case OpKind::ColConcat: return "column-concat";
        case OpKind::BroadcastRow: return "broadcast-row";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Forward kernels
// ---------------------------------------------------------------------------

namespace {

double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Overflow-safe form: softplus(x) = max(x, 0) + log1p(exp(-|x|)).
double softplus_scalar(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// C = A(m,k) * B(k,n), accumulating row-wise so the inner loop vectorizes.
Tensor matmul_kernel(const Tensor& a, const Tensor& b) {
    const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor c = Tensor::zeros({m, n});
    const double* pa = a.values.data();
    const double* pb = b.values.data();
    double* pc = c.values.data();
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        double* crow = pc + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = pb + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// A(m,k) * B(n,k)^T -> (m,n); used by the matmul reverse rule.
Tensor matmul_nt_kernel(const Tensor& a, const Tensor& b) {
    const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
    Tensor c = Tensor::zeros({m, n});
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a.values.data() + i * k;
        double* crow = c.values.data() + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const double* brow = b.values.data() + j * k;
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    }
    return c;
}

// A(m,k)^T * B(m,n) -> (k,n); used by the matmul reverse rule.
Tensor matmul_tn_kernel(const Tensor& a, const Tensor& b) {
    const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor c = Tensor::zeros({k, n});
    for (std::int64_t p = 0; p < m; ++p) {
        const double* arow = a.values.data() + p * k;
        const double* brow = b.values.data() + p * n;
        for (std::int64_t i = 0; i < k; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c.values.data() + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

enum class Elementwise { Add, Sub, Mul, Div };

// Binary elementwise kinds conform when shapes match exactly or when one
// operand is a scalar.
Tensor elementwise_kernel(OpKind kind, const Tensor& a, const Tensor& b) {
    const bool a_scalar = a.is_scalar();
    const bool b_scalar = b.is_scalar();
    if (!a_scalar && !b_scalar && a.shape != b.shape) {
        shape_fail(kind, "shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) + " do not conform");
    }
    const Tensor& big = (a_scalar && !b_scalar) ? b : a;
    Tensor out = Tensor::zeros(big.shape);
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = a_scalar ? a.values[0] : a.values[static_cast<std::size_t>(i)];
        const double y = b_scalar ? b.values[0] : b.values[static_cast<std::size_t>(i)];
        double r = 0.0;
        switch (kind) {
            case OpKind::Add: r = x + y; break;
            case OpKind::Sub: r = x - y; break;
            case OpKind::Mul: r = x * y; break;
            case OpKind::Div:
                if (y == 0.0) throw DomainError("div: division by zero");
                r = x / y;
                break;
            default: break;
        }
        out.values[static_cast<std::size_t>(i)] = r;
    }
    return out;
}

Tensor unary_kernel(OpKind kind, const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape);
    const std::size_t n = a.values.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a.values[i];
        double r = 0.0;
        switch (kind) {
            case OpKind::Neg: r = -x; break;
            case OpKind::Exp:
                if (x > 709.0) throw DomainError("exp: argument " + std::to_string(x) + " overflows");
                r = std::exp(x);
                break;
            case OpKind::Log:
                if (x <= 0.0) throw DomainError("log: non-positive argument " + std::to_string(x));
                r = std::log(x);
                break;
            case OpKind::Sigmoid: r = sigmoid_scalar(x); break;
            case OpKind::Softplus: r = softplus_scalar(x); break;
            case OpKind::Relu: r = x > 0.0 ? x : 0.0; break;
            case OpKind::Square: r = x * x; break;
            default: break;
        }
        out.values[i] = r;
    }
    return out;
}

Tensor reduce_kernel(OpKind kind, const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values) acc += v;
    if (kind == OpKind::Mean) {
        if (a.numel() == 0) shape_fail(kind, "empty tensor");
        acc /= static_cast<double>(a.numel());
    }
    return Tensor::scalar(acc);
}

Tensor row_gather_kernel(const Tensor& a, std::span<const std::int64_t> rows) {
    if (a.rank() != 2) shape_fail(OpKind::RowGather, "rank-2 input required, got " + shape_str(a.shape));
    const std::int64_t m = a.shape[0], c = a.shape[1];
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(rows.size()), c});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::int64_t src = rows[r];
        if (src < 0 || src >= m) {
            throw ShapeError("row-gather: index " + std::to_string(src) + " out of range [0, " +
                             std::to_string(m) + ")");
        }
        std::memcpy(out.values.data() + r * c, a.values.data() + src * c,
                    static_cast<std::size_t>(c) * sizeof(double));
    }
    return out;
}

Tensor col_concat_kernel(std::span<const Tensor* const> inputs) {
    if (inputs.size() < 2) shape_fail(OpKind::ColConcat, "needs at least two inputs");
    const std::int64_t m = inputs[0]->shape.empty() ? 0 : inputs[0]->shape[0];
    std::int64_t total = 0;
    for (const Tensor* t : inputs) {
        if (t->rank() != 2) shape_fail(OpKind::ColConcat, "rank-2 inputs required");
        if (t->shape[0] != m) shape_fail(OpKind::ColConcat, "row counts differ");
        total += t->shape[1];
    }
    Tensor out = Tensor::zeros({m, total});
    std::int64_t offset = 0;
    for (const Tensor* t : inputs) {
        const std::int64_t c = t->shape[1];
        for (std::int64_t i = 0; i < m; ++i) {
            std::memcpy(out.values.data() + i * total + offset, t->values.data() + i * c,
                        static_cast<std::size_t>(c) * sizeof(double));
        }
        offset += c;
    }
    return out;
}

Tensor broadcast_row_kernel(const Tensor& a, std::int64_t m) {
    if (!(a.rank() == 1 || (a.rank() == 2 && a.shape[0] == 1))) {
        shape_fail(OpKind::BroadcastRow, "row vector required, got " + shape_str(a.shape));
    }
    if (m < 1) shape_fail(OpKind::BroadcastRow, "row count must be positive");
    const std::int64_t c = a.numel();
    Tensor out = Tensor::zeros({m, c});
    for (std::int64_t i = 0; i < m; ++i) {
        std::memcpy(out.values.data() + i * c, a.values.data(), static_cast<std::size_t>(c) * sizeof(double));
    }
    return out;
}

void check_matmul_shapes(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        shape_fail(OpKind::Matmul, "rank-2 operands required, got " + shape_str(a.shape) + " and " +
                                       shape_str(b.shape));
    }
    if (a.shape[1] != b.shape[0]) {
        shape_fail(OpKind::Matmul, "inner dimensions differ: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
}

Tensor eval_kernel(OpKind kind, std::span<const Tensor* const> inputs, std::span<const std::int64_t> aux) {
    auto need = [&](std::size_t n) {
        if (inputs.size() != n) {
            shape_fail(kind, "expected " + std::to_string(n) + " inputs, got " + std::to_string(inputs.size()));
        }
    };
    switch (kind) {
        case OpKind::Matmul:
            need(2);
            check_matmul_shapes(*inputs[0], *inputs[1]);
            return matmul_kernel(*inputs[0], *inputs[1]);
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul:
        case OpKind::Div:
            need(2);
            return elementwise_kernel(kind, *inputs[0], *inputs[1]);
        case OpKind::Neg:
        case OpKind::Exp:
        case OpKind::Log:
        case OpKind::Sigmoid:
        case OpKind::Softplus:
        case OpKind::Relu:
        case OpKind::Square:
            need(1);
            return unary_kernel(kind, *inputs[0]);
        case OpKind::Sum:
        case OpKind::Mean:
            need(1);
            return reduce_kernel(kind, *inputs[0]);
        case OpKind::RowGather:
            need(1);
            return row_gather_kernel(*inputs[0], aux);
        case OpKind::ColConcat:
            return col_concat_kernel(inputs);
        case OpKind::BroadcastRow:
            need(1);
            if (aux.size() != 1) shape_fail(kind, "row count argument missing");
            return broadcast_row_kernel(*inputs[0], aux[0]);
        case OpKind::Leaf:
            shape_fail(kind, "leaf is not applicable");
    }
    shape_fail(kind, "unknown primitive");
}

}  // namespace

Tensor eval_primitive(OpKind kind, std::span<const Tensor* const> inputs, std::span<const std::int64_t> aux) {
    return eval_kernel(kind, inputs, aux);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

NodeId Tape::record(OpKind kind, std::vector<NodeId> inputs, std::vector<std::int64_t> aux, Tensor out) {
    const NodeId id = static_cast<NodeId>(nodes_.size());
    out.node = id;
    out.owner = this;
    nodes_.push_back(Node{kind, std::move(inputs), std::move(aux), std::move(out)});
    return id;
}

NodeId Tape::node_of(const Tensor& t) {
    if (t.owner == this && t.node != kNoNode) return t.node;
    // Tensors from outside this tape become constant leaves on first use.
    Tensor copy = t;
    copy.node = kNoNode;
    copy.owner = nullptr;
    return record(OpKind::Leaf, {}, {}, std::move(copy));
}

Tensor Tape::leaf(const Tensor& t) {
    if (!recording_) {
        Tensor copy = t;
        copy.node = kNoNode;
        copy.owner = nullptr;
        return copy;
    }
    Tensor copy = t;
    copy.node = kNoNode;
    copy.owner = nullptr;
    const NodeId id = record(OpKind::Leaf, {}, {}, std::move(copy));
    return nodes_[static_cast<std::size_t>(id)].out;
}

Tensor Tape::apply(OpKind kind, std::span<const Tensor* const> inputs, std::span<const std::int64_t> aux) {
    Tensor out = eval_kernel(kind, inputs, aux);
    if (!recording_) return out;
    std::vector<NodeId> ids;
    ids.reserve(inputs.size());
    for (const Tensor* t : inputs) ids.push_back(node_of(*t));
    const NodeId id = record(kind, std::move(ids), std::vector<std::int64_t>(aux.begin(), aux.end()),
                             std::move(out));
    return nodes_[static_cast<std::size_t>(id)].out;
}

namespace {
template <typename... Ts>
std::array<const Tensor*, sizeof...(Ts)> pack(const Ts&... ts) {
    return {&ts...};
}
}  // namespace

Tensor Tape::matmul(const Tensor& a, const Tensor& b) { auto in = pack(a, b); return apply(OpKind::Matmul, in); }
Tensor Tape::add(const Tensor& a, const Tensor& b) { auto in = pack(a, b); return apply(OpKind::Add, in); }
Tensor Tape::sub(const Tensor& a, const Tensor& b) { auto in = pack(a, b); return apply(OpKind::Sub, in); }
Tensor Tape::mul(const Tensor& a, const Tensor& b) { auto in = pack(a, b); return apply(OpKind::Mul, in); }
Tensor Tape::div(const Tensor& a, const Tensor& b) { auto in = pack(a, b); return apply(OpKind::Div, in); }
Tensor Tape::neg(const Tensor& a) { auto in = pack(a); return apply(OpKind::Neg, in); }
Tensor Tape::exp(const Tensor& a) { auto in = pack(a); return apply(OpKind::Exp, in); }
Tensor Tape::log(const Tensor& a) { auto in = pack(a); return apply(OpKind::Log, in); }
Tensor Tape::sigmoid(const Tensor& a) { auto in = pack(a); return apply(OpKind::Sigmoid, in); }
Tensor Tape::softplus(const Tensor& a) { auto in = pack(a); return apply(OpKind::Softplus, in); }
Tensor Tape::relu(const Tensor& a) { auto in = pack(a); return apply(OpKind::Relu, in); }
Tensor Tape::square(const Tensor& a) { auto in = pack(a); return apply(OpKind::Square, in); }
Tensor Tape::sum(const Tensor& a) { auto in = pack(a); return apply(OpKind::Sum, in); }
Tensor Tape::mean(const Tensor& a) { auto in = pack(a); return apply(OpKind::Mean, in); }

Tensor Tape::row_gather(const Tensor& a, std::span<const std::int64_t> rows) {
    auto in = pack(a);
    return apply(OpKind::RowGather, in, rows);
}

Tensor Tape::col_concat(std::span<const Tensor* const> parts) { return apply(OpKind::ColConcat, parts); }

Tensor Tape::col_concat(const Tensor& a, const Tensor& b) {
    auto in = pack(a, b);
    return apply(OpKind::ColConcat, in);
}

Tensor Tape::broadcast_row(const Tensor& a, std::int64_t rows) {
    auto in = pack(a);
    const std::int64_t aux[1] = {rows};
    return apply(OpKind::BroadcastRow, in, aux);
}

Tensor Tape::clamp(const Tensor& x, double lo, double hi) {
    if (!(lo < hi)) throw DomainError("clamp: lo must be below hi");
    // Two one-sided caps, upper(z, b) = b - relu(b - z). Each saturates to its
    // bound exactly even for inputs far beyond it, unlike the naive
    // lo + relu(x-lo) - relu(x-hi) whose large terms cancel with rounding.
    auto upper = [this](const Tensor& z, double b) {
        const Tensor bound = Tensor::scalar(b);
        return sub(bound, relu(sub(bound, z)));
    };
    return neg(upper(neg(upper(x, hi)), -lo));
}

const Tensor& Tape::node_value(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
        throw ShapeError("tape: node " + std::to_string(id) + " is not on this tape");
    }
    return nodes_[static_cast<std::size_t>(id)].out;
}

void Tape::reset() { nodes_.clear(); }

bool Tape::replay_matches() const {
    for (const Node& node : nodes_) {
        if (node.kind == OpKind::Leaf) continue;
        std::vector<const Tensor*> ins;
        ins.reserve(node.inputs.size());
        for (NodeId id : node.inputs) ins.push_back(&nodes_[static_cast<std::size_t>(id)].out);
        const Tensor redo = eval_kernel(node.kind, ins, node.aux);
        if (redo.shape != node.out.shape || redo.values != node.out.values) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Reverse sweep
// ---------------------------------------------------------------------------

namespace {

// Add `g`, reduced to `target_shape` (identity or scalar), into `acc`.
void accumulate(Tensor& acc, const Tensor& g, const std::vector<std::int64_t>& target_shape) {
    if (acc.values.empty()) acc = Tensor::zeros(target_shape);
    if (g.shape == target_shape || g.numel() == acc.numel()) {
        for (std::size_t i = 0; i < acc.values.size(); ++i) acc.values[i] += g.values[i];
        return;
    }
    // Scalar operand of a broadcasted elementwise op: fold everything down.
    double total = 0.0;
    for (double v : g.values) total += v;
    acc.values[0] += total;
}

}  // namespace

GradientMap Tape::backward(const Tensor& root) const {
    if (root.owner != this || root.node == kNoNode) {
        throw ShapeError("backward: root tensor is not on this tape");
    }
    return backward(root.node);
}

GradientMap Tape::backward(NodeId root) const {
    if (root < 0 || static_cast<std::size_t>(root) >= nodes_.size()) {
        throw ShapeError("backward: root node " + std::to_string(root) + " is not on this tape");
    }
    const Tensor& root_val = nodes_[static_cast<std::size_t>(root)].out;
    if (!root_val.is_scalar()) {
        throw ShapeError("backward: root must be scalar, got shape " + shape_str(root_val.shape));
    }

    std::vector<Tensor> adj(nodes_.size());
    adj[static_cast<std::size_t>(root)] = Tensor::full(root_val.shape, 1.0);

    for (NodeId id = root; id >= 0; --id) {
        Node const& node = nodes_[static_cast<std::size_t>(id)];
        Tensor& g = adj[static_cast<std::size_t>(id)];
        if (g.values.empty() || node.kind == OpKind::Leaf) continue;

        auto in_val = [&](std::size_t i) -> const Tensor& {
            return nodes_[static_cast<std::size_t>(node.inputs[i])].out;
        };
        auto in_adj = [&](std::size_t i) -> Tensor& { return adj[static_cast<std::size_t>(node.inputs[i])]; };
        auto in_shape = [&](std::size_t i) -> const std::vector<std::int64_t>& { return in_val(i).shape; };

        switch (node.kind) {
            case OpKind::Matmul: {
                accumulate(in_adj(0), matmul_nt_kernel(g, in_val(1)), in_shape(0));
                accumulate(in_adj(1), matmul_tn_kernel(in_val(0), g), in_shape(1));
                break;
            }
            case OpKind::Add: {
                accumulate(in_adj(0), g, in_shape(0));
                accumulate(in_adj(1), g, in_shape(1));
                break;
            }
            case OpKind::Sub: {
                accumulate(in_adj(0), g, in_shape(0));
                Tensor neg_g = g;
                for (double& v : neg_g.values) v = -v;
                accumulate(in_adj(1), neg_g, in_shape(1));
                break;
            }
            case OpKind::Mul: {
                const Tensor& a = in_val(0);
                const Tensor& b = in_val(1);
                Tensor ga = Tensor::zeros(node.out.shape);
                Tensor gb = Tensor::zeros(node.out.shape);
                const bool a_scalar = a.is_scalar();
                const bool b_scalar = b.is_scalar();
                for (std::size_t i = 0; i < g.values.size(); ++i) {
                    const double av = a_scalar ? a.values[0] : a.values[i];
                    const double bv = b_scalar ? b.values[0] : b.values[i];
                    ga.values[i] = g.values[i] * bv;
                    gb.values[i] = g.values[i] * av;
                }
                accumulate(in_adj(0), ga, in_shape(0));
                accumulate(in_adj(1), gb, in_shape(1));
                break;
            }
            case OpKind::Div: {
                const Tensor& a = in_val(0);
                const Tensor& b = in_val(1);
                Tensor ga = Tensor::zeros(node.out.shape);
                Tensor gb = Tensor::zeros(node.out.shape);
                const bool a_scalar = a.is_scalar();
                const bool b_scalar = b.is_scalar();
                for (std::size_t i = 0; i < g.values.size(); ++i) {
                    const double av = a_scalar ? a.values[0] : a.values[i];
                    const double bv = b_scalar ? b.values[0] : b.values[i];
                    ga.values[i] = g.values[i] / bv;
                    gb.values[i] = -g.values[i] * av / (bv * bv);
                }
                accumulate(in_adj(0), ga, in_shape(0));
                accumulate(in_adj(1), gb, in_shape(1));
                break;
            }
            case OpKind::Neg: {
                Tensor ga = g;
                for (double& v : ga.values) v = -v;
                accumulate(in_adj(0), ga, in_shape(0));
                break;
            }
            case OpKind::Exp: {
                Tensor ga = g;
                for (std::size_t i = 0; i < ga.values.size(); ++i) ga.values[i] *= node.out.values[i];
                accumulate(in_adj(0), ga, in_shape(0));
                break;
            }
            case OpKind::Log: {
                const Tensor& a = in_val(0);
                Tensor ga = g;
                for (std::size_t i = 0; i < ga.values.size(); ++i) ga.values[i] /= a.values[i];
                accumulate(in_adj(0), ga, in_shape(0));
                break;
            }
            case OpKind::Sigmoid: {
                Tensor ga = g;
                for (std::size_t i = 0; i < ga.values.size(); ++i) {
                    const double s = node.out.values[i];
                    ga.values[i] *= s * (1.0 - s);
                }
                accumulate(in_adj(0), ga, in_shape(0));
                break;
            }
            case OpKind::Softplus: {
                const Tensor& a = in_val(0);
                Tensor ga = g;
                for (std::size_t i = 0; i < ga.values.size(); ++i) ga.values[i] *= sigmoid_scalar(a.values[i]);
                accumulate(in_adj(0), ga, in_shape(0));
                break;
            }
            case OpKind::Relu: {
                const Tensor& a = in_val(0);
                Tensor ga = g;
                for (std::size_t i = 0; i < ga.values.size(); ++i) {
                    if (a.values[i] <= 0.0) ga.values[i] = 0.0;
                }
                accumulate(in_adj(0), ga, in_shape(0));
                break;
            }
            case OpKind::Square: {
                const Tensor& a = in_val(0);
                Tensor ga = g;
                for (std::size_t i = 0; i < ga.values.size(); ++i) ga.values[i] *= 2.0 * a.values[i];
                accumulate(in_adj(0), ga, in_shape(0));
                break;
            }
            case OpKind::Sum: {
                accumulate(in_adj(0), Tensor::full(in_shape(0), g.values[0]), in_shape(0));
                break;
            }
            case OpKind::Mean: {
                const double scale = g.values[0] / static_cast<double>(in_val(0).numel());
                accumulate(in_adj(0), Tensor::full(in_shape(0), scale), in_shape(0));
                break;
            }
            case OpKind::RowGather: {
                Tensor ga = Tensor::zeros(in_shape(0));
                const std::int64_t c = in_val(0).shape[1];
                for (std::size_t r = 0; r < node.aux.size(); ++r) {
                    const std::int64_t src = node.aux[r];
                    for (std::int64_t j = 0; j < c; ++j) {
                        ga.values[static_cast<std::size_t>(src * c + j)] +=
                            g.values[static_cast<std::size_t>(static_cast<std::int64_t>(r) * c + j)];
                    }
                }
                accumulate(in_adj(0), ga, in_shape(0));
                break;
            }
            case OpKind::ColConcat: {
                const std::int64_t m = node.out.shape[0];
                const std::int64_t total = node.out.shape[1];
                std::int64_t offset = 0;
                for (std::size_t part = 0; part < node.inputs.size(); ++part) {
                    const std::int64_t c = in_val(part).shape[1];
                    Tensor ga = Tensor::zeros(in_shape(part));
                    for (std::int64_t i = 0; i < m; ++i) {
                        for (std::int64_t j = 0; j < c; ++j) {
                            ga.values[static_cast<std::size_t>(i * c + j)] =
                                g.values[static_cast<std::size_t>(i * total + offset + j)];
                        }
                    }
                    accumulate(in_adj(part), ga, in_shape(part));
                    offset += c;
                }
                break;
            }
            case OpKind::BroadcastRow: {
                const std::int64_t m = node.out.shape[0];
                const std::int64_t c = node.out.shape[1];
                Tensor ga = Tensor::zeros(in_shape(0));
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t j = 0; j < c; ++j) {
                        ga.values[static_cast<std::size_t>(j)] += g.values[static_cast<std::size_t>(i * c + j)];
                    }
                }
                accumulate(in_adj(0), ga, in_shape(0));
                break;
            }
            case OpKind::Leaf:
                break;
        }
        // Adjoint of this node is no longer needed; free eagerly to bound peak memory.
        g = Tensor();
    }

    GradientMap grads;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        if (nodes_[id].kind != OpKind::Leaf) continue;
        Tensor& a = adj[id];
        if (a.values.empty()) a = Tensor::zeros(nodes_[id].out.shape);
        a.node = kNoNode;
        a.owner = nullptr;
        grads.emplace(static_cast<NodeId>(id), std::move(a));
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Finite-difference check
// ---------------------------------------------------------------------------

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& function, const Tensor& point,
                  double step) {
    if (step <= 0.0) throw DomainError("grad_check: step must be positive");

    Tape tape;
    Tensor x = tape.leaf(point);
    Tensor out = function(tape, x);
    if (!out.is_scalar()) throw ShapeError("grad_check: function output must be scalar");
    GradientMap grads = tape.backward(out);
    const Tensor& analytic = grads.at(x.node);

    auto eval_at = [&](const Tensor& p) {
        Tape scratch;
        scratch.set_recording(false);
        Tensor px = scratch.leaf(p);
        return function(scratch, px).scalar_value();
    };

    double worst = 0.0;
    Tensor probe = point;
    for (std::size_t i = 0; i < point.values.size(); ++i) {
        const double saved = probe.values[i];
        probe.values[i] = saved + step;
        const double hi = eval_at(probe);
        probe.values[i] = saved - step;
        const double lo = eval_at(probe);
        probe.values[i] = saved;
        const double numeric = (hi - lo) / (2.0 * step);
        const double a = analytic.values[i];
        const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace tresnet::ad
