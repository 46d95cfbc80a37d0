#include "tresnet/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "tresnet/rng.hpp"

namespace tresnet {

BasisKind basis_from_name(const std::string& name) {
    if (name == "spline") return BasisKind::Spline;
    if (name == "piecewise-linear") return BasisKind::PiecewiseLinear;
    throw ConfigError("unknown basis '" + name + "' (expected spline|piecewise-linear)");
}

const std::string& basis_name(BasisKind k) {
    static const std::string names[] = {"spline", "piecewise-linear"};
    return names[static_cast<int>(k)];
}

int basis_dim(BasisKind k) { return k == BasisKind::Spline ? 5 : 4; }

void eval_basis(BasisKind k, double t, std::span<double> out) {
    const double h1 = std::max(t - 1.0 / 3.0, 0.0);
    const double h2 = std::max(t - 2.0 / 3.0, 0.0);
    if (k == BasisKind::Spline) {
        out[0] = 1.0;
        out[1] = t;
        out[2] = t * t;
        out[3] = h1 * h1;
        out[4] = h2 * h2;
    } else {
        out[0] = 1.0;
        out[1] = t;
        out[2] = h1;
        out[3] = h2;
    }
}

void ModelConfig::validate() const {
    if (backbone_layers < 1 || backbone_width < 1) throw ConfigError("backbone needs >= 1 layer of width >= 1");
    if (head_hidden_layers < 0 || head_width < 1) throw ConfigError("head layer spec invalid");
    if (!(ratio_clamp > 1.0)) throw ConfigError("ratio clamp must exceed 1");
}

namespace {

ad::Tensor init_tensor(std::vector<std::int64_t> shape, double bound, Rng& rng) {
    ad::Tensor t = ad::Tensor::zeros(std::move(shape));
    for (double& v : t.values) v = rng.uniform(-bound, bound);
    return t;
}

std::vector<VCLayer> init_head(const ModelConfig& cfg, std::int64_t in_dim, Rng& rng) {
    const int nb = basis_dim(cfg.basis);
    std::vector<VCLayer> head;
    std::int64_t in = in_dim;
    for (int l = 0; l <= cfg.head_hidden_layers; ++l) {
        const bool last = l == cfg.head_hidden_layers;
        const std::int64_t out = last ? 1 : cfg.head_width;
        VCLayer layer;
        layer.activation = !last;
        // Every layer sees an appended constant input column, so each level
        // can carry purely exposure-driven terms through the basis.
        const double bound = 1.0 / std::sqrt(static_cast<double>((in + 1) * nb));
        for (int b = 0; b < nb; ++b) layer.coeff.push_back(init_tensor({in + 1, out}, bound, rng));
        head.push_back(std::move(layer));
        in = out;
    }
    return head;
}

}  // namespace

TresnetModel::TresnetModel(ModelConfig cfg, std::int64_t in_dim, std::size_t n_shifts, std::uint64_t seed)
    : cfg_(cfg), in_dim_(in_dim) {
    cfg_.validate();
    if (in_dim < 1) throw ConfigError("model input dimension must be >= 1");
    if (n_shifts < 1) throw ConfigError("model needs at least one shift head");
    Rng rng(seed);
    std::int64_t in = in_dim;
    for (int l = 0; l < cfg_.backbone_layers; ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        DenseLayer layer;
        layer.weight = init_tensor({in, cfg_.backbone_width}, bound, rng);
        layer.bias = init_tensor({1, cfg_.backbone_width}, bound, rng);
        backbone_.push_back(std::move(layer));
        in = cfg_.backbone_width;
    }
    outcome_head_ = init_head(cfg_, in, rng);
    for (std::size_t j = 0; j < n_shifts; ++j) ratio_heads_.push_back(init_head(cfg_, in, rng));
    for (std::size_t j = 0; j < n_shifts; ++j) epsilon_.push_back(ad::Tensor::scalar(0.0));
}

void TresnetModel::fit_exposure_range(std::span<const double> a) {
    if (a.empty()) throw ConfigError("cannot fit exposure range on an empty vector");
    a_min_ = a[0];
    a_max_ = a[0];
    for (double v : a) {
        a_min_ = std::min(a_min_, v);
        a_max_ = std::max(a_max_, v);
    }
    exposure_fitted_ = true;
}

double TresnetModel::normalize_exposure(double a) const {
    if (!exposure_fitted_) throw NumericError("exposure normalization has not been fitted");
    const double range = a_max_ - a_min_;
    if (range <= 0.0) return 0.5;
    const double t = (a - a_min_) / range;
    if (t < 0.0 || t > 1.0) {
        ++positivity_clamps_;
        return t < 0.0 ? 0.0 : 1.0;
    }
    return t;
}

ad::Tensor TresnetModel::backbone(ad::Tape& tape, const ad::Tensor& x) const {
    if (x.rank() != 2 || x.shape[1] != in_dim_) {
        throw ShapeError("backbone: expected {n, " + std::to_string(in_dim_) + "} covariates");
    }
    ad::Tensor h = x;
    for (const DenseLayer& layer : backbone_) {
        ad::Tensor pre = tape.add(tape.matmul(h, layer.weight), tape.broadcast_row(layer.bias, h.shape[0]));
        h = tape.relu(pre);
    }
    return h;
}

ad::Tensor TresnetModel::vc_stack(ad::Tape& tape, const std::vector<VCLayer>& stack, const ad::Tensor& z,
                                  std::span<const double> a) const {
    const std::int64_t m = z.shape[0];
    if (static_cast<std::int64_t>(a.size()) != m) {
        throw ShapeError("varying-coefficient stack: exposure length does not match row count");
    }
    const int nb = basis_dim(cfg_.basis);

    // Per-sample basis values, one column per basis function.
    std::vector<ad::Tensor> phi;
    phi.reserve(static_cast<std::size_t>(nb));
    for (int b = 0; b < nb; ++b) phi.push_back(ad::Tensor::zeros({m, 1}));
    std::vector<double> basis_row(static_cast<std::size_t>(nb));
    for (std::int64_t i = 0; i < m; ++i) {
        eval_basis(cfg_.basis, normalize_exposure(a[static_cast<std::size_t>(i)]), basis_row);
        for (int b = 0; b < nb; ++b) phi[static_cast<std::size_t>(b)].values[static_cast<std::size_t>(i)] =
            basis_row[static_cast<std::size_t>(b)];
    }

    ad::Tensor ones_col = ad::Tensor::full({m, 1}, 1.0);
    ad::Tensor h = z;
    for (const VCLayer& layer : stack) {
        h = tape.col_concat(h, ones_col);
        const std::int64_t out = layer.out_dim();
        ad::Tensor ones_row = ad::Tensor::full({1, out}, 1.0);
        ad::Tensor acc;
        for (int b = 0; b < nb; ++b) {
            ad::Tensor term = tape.matmul(h, layer.coeff[static_cast<std::size_t>(b)]);
            const ad::Tensor& phi_b = phi[static_cast<std::size_t>(b)];
            ad::Tensor weight = out == 1 ? phi_b : tape.matmul(phi_b, ones_row);
            term = tape.mul(term, weight);
            acc = b == 0 ? term : tape.add(acc, term);
        }
        h = layer.activation ? tape.relu(acc) : acc;
    }
    return h;
}

ad::Tensor TresnetModel::outcome_head(ad::Tape& tape, const ad::Tensor& z, std::span<const double> a) const {
    return vc_stack(tape, outcome_head_, z, a);
}

ad::Tensor TresnetModel::ratio_head(ad::Tape& tape, const ad::Tensor& z, std::span<const double> a,
                                    std::size_t shift) const {
    if (shift >= ratio_heads_.size()) {
        throw ShapeError("ratio head " + std::to_string(shift) + " does not exist");
    }
    ad::Tensor raw = vc_stack(tape, ratio_heads_[shift], z, a);
    const double bound = std::log(cfg_.ratio_clamp);
    return tape.clamp(raw, -bound, bound);
}

ad::Tensor TresnetModel::outcome_forward(const ad::Tensor& x, std::span<const double> a) const {
    ad::Tape tape;
    tape.set_recording(false);
    return outcome_head(tape, backbone(tape, x), a);
}

ad::Tensor TresnetModel::ratio_forward(const ad::Tensor& x, std::span<const double> a) const {
    ad::Tape tape;
    tape.set_recording(false);
    ad::Tensor z = backbone(tape, x);
    ad::Tensor out = ad::Tensor::zeros({x.shape[0], static_cast<std::int64_t>(n_shifts())});
    for (std::size_t j = 0; j < n_shifts(); ++j) {
        ad::Tensor col = ratio_head(tape, z, a, j);
        for (std::int64_t i = 0; i < x.shape[0]; ++i) {
            out.at(i, static_cast<std::int64_t>(j)) = col.values[static_cast<std::size_t>(i)];
        }
    }
    return out;
}

std::vector<double> TresnetModel::predict_mean(const ad::Tensor& x, std::span<const double> a) const {
    ad::Tensor eta = outcome_forward(x, a);
    std::vector<double> mu(eta.values.size());
    for (std::size_t i = 0; i < mu.size(); ++i) mu[i] = mean_from_natural(cfg_.family, eta.values[i]);
    return mu;
}

std::vector<ParamRef> TresnetModel::parameters() {
    std::vector<ParamRef> params;
    for (std::size_t l = 0; l < backbone_.size(); ++l) {
        params.push_back({"backbone." + std::to_string(l) + ".weight", &backbone_[l].weight});
        params.push_back({"backbone." + std::to_string(l) + ".bias", &backbone_[l].bias});
    }
    auto add_head = [&params](const std::string& prefix, std::vector<VCLayer>& head) {
        for (std::size_t l = 0; l < head.size(); ++l) {
            for (std::size_t b = 0; b < head[l].coeff.size(); ++b) {
                params.push_back({prefix + "." + std::to_string(l) + ".coeff" + std::to_string(b),
                                  &head[l].coeff[b]});
            }
        }
    };
    add_head("outcome", outcome_head_);
    for (std::size_t j = 0; j < ratio_heads_.size(); ++j) {
        add_head("ratio" + std::to_string(j), ratio_heads_[j]);
    }
    for (std::size_t j = 0; j < epsilon_.size(); ++j) {
        params.push_back({"epsilon." + std::to_string(j), &epsilon_[j]});
    }
    return params;
}

std::vector<double> TresnetModel::epsilon_values() const {
    std::vector<double> out;
    out.reserve(epsilon_.size());
    for (const ad::Tensor& e : epsilon_) out.push_back(e.values[0]);
    return out;
}

void TresnetModel::set_epsilon(std::vector<double> eps) {
    if (eps.size() != epsilon_.size()) {
        throw ShapeError("epsilon vector length " + std::to_string(eps.size()) + " does not match " +
                         std::to_string(epsilon_.size()) + " shifts");
    }
    for (std::size_t j = 0; j < eps.size(); ++j) epsilon_[j] = ad::Tensor::scalar(eps[j]);
    fluctuation_ready_ = true;
}

// ---------------------------------------------------------------------------
// Serialization: a flat text container of named tensors plus a config echo.
// ---------------------------------------------------------------------------

namespace {

std::string format_full(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void TresnetModel::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "tresnet-model v1\n";
    out << "family " << family_name(cfg_.family) << "\n";
    out << "basis " << basis_name(cfg_.basis) << "\n";
    out << "in_dim " << in_dim_ << "\n";
    out << "backbone_layers " << cfg_.backbone_layers << "\n";
    out << "backbone_width " << cfg_.backbone_width << "\n";
    out << "head_hidden_layers " << cfg_.head_hidden_layers << "\n";
    out << "head_width " << cfg_.head_width << "\n";
    out << "ratio_clamp " << format_full(cfg_.ratio_clamp) << "\n";
    out << "n_shifts " << ratio_heads_.size() << "\n";
    out << "shift_label " << shift_label_ << "\n";
    out << "exposure_fitted " << (exposure_fitted_ ? 1 : 0) << "\n";
    out << "a_min " << format_full(a_min_) << "\n";
    out << "a_max " << format_full(a_max_) << "\n";
    out << "fluctuation_ready " << (fluctuation_ready_ ? 1 : 0) << "\n";
    auto params = const_cast<TresnetModel*>(this)->parameters();
    for (const ParamRef& p : params) {
        out << "tensor " << p.name;
        for (auto d : p.tensor->shape) out << " " << d;
        out << "\n";
        for (std::size_t i = 0; i < p.tensor->values.size(); ++i) {
            out << (i ? " " : "") << format_full(p.tensor->values[i]);
        }
        out << "\n";
    }
    out << "end\n";
    if (!out) throw IoError("write to '" + path + "' failed");
}

TresnetModel TresnetModel::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::string line;
    if (!std::getline(in, line) || line != "tresnet-model v1") {
        throw IoError("'" + path + "' is not a model file (bad magic line)");
    }

    ModelConfig cfg;
    std::int64_t in_dim = 0;
    std::size_t n_shifts = 0;
    std::string shift_label;
    bool exposure_fitted = false, fluctuation_ready = false;
    double a_min = 0.0, a_max = 1.0;

    auto fail = [&](const std::string& msg) -> void { throw IoError("'" + path + "': " + msg); };

    while (std::getline(in, line)) {
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key == "tensor" || key == "end") break;
        std::string value;
        std::getline(is, value);
        if (!value.empty() && value[0] == ' ') value.erase(0, 1);
        if (key == "family") cfg.family = family_from_name(value);
        else if (key == "basis") cfg.basis = basis_from_name(value);
        else if (key == "in_dim") in_dim = std::stoll(value);
        else if (key == "backbone_layers") cfg.backbone_layers = std::stoi(value);
        else if (key == "backbone_width") cfg.backbone_width = std::stoi(value);
        else if (key == "head_hidden_layers") cfg.head_hidden_layers = std::stoi(value);
        else if (key == "head_width") cfg.head_width = std::stoi(value);
        else if (key == "ratio_clamp") cfg.ratio_clamp = std::stod(value);
        else if (key == "n_shifts") n_shifts = static_cast<std::size_t>(std::stoull(value));
        else if (key == "shift_label") shift_label = value;
        else if (key == "exposure_fitted") exposure_fitted = value == "1";
        else if (key == "a_min") a_min = std::stod(value);
        else if (key == "a_max") a_max = std::stod(value);
        else if (key == "fluctuation_ready") fluctuation_ready = value == "1";
        else fail("unknown header key '" + key + "'");
    }

    if (in_dim < 1 || n_shifts < 1) fail("incomplete header");
    TresnetModel model(cfg, in_dim, n_shifts, /*seed=*/0);
    model.shift_label_ = shift_label;
    model.exposure_fitted_ = exposure_fitted;
    model.a_min_ = a_min;
    model.a_max_ = a_max;
    model.fluctuation_ready_ = fluctuation_ready;

    auto params = model.parameters();
    std::size_t next = 0;
    // `line` currently holds the first tensor header (or "end").
    while (line.rfind("tensor ", 0) == 0) {
        std::istringstream is(line);
        std::string tag, name;
        is >> tag >> name;
        std::vector<std::int64_t> shape;
        std::int64_t dim = 0;
        while (is >> dim) shape.push_back(dim);
        if (next >= params.size()) fail("more tensors than the architecture defines");
        if (params[next].name != name) {
            fail("tensor '" + name + "' out of order (expected '" + params[next].name + "')");
        }
        if (params[next].tensor->shape != shape) fail("tensor '" + name + "' has unexpected shape");
        if (!std::getline(in, line)) fail("missing values for tensor '" + name + "'");
        std::istringstream vs(line);
        for (double& v : params[next].tensor->values) {
            if (!(vs >> v)) fail("too few values for tensor '" + name + "'");
        }
        double extra = 0.0;
        if (vs >> extra) fail("too many values for tensor '" + name + "'");
        ++next;
        if (!std::getline(in, line)) fail("unterminated tensor section");
    }
    if (line != "end") fail("missing end marker");
    if (next != params.size()) fail("missing tensors (got " + std::to_string(next) + ")");
    return model;
}

}  // namespace tresnet
