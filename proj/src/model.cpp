#include "lmd/model.hpp"

#include <cmath>

namespace lmd {

void ModelConfig::validate() const {
    if (input_dim == 0) throw ValidationError("model: input_dim must be positive");
    if (feature_dim == 0) throw ValidationError("model: feature_dim must be positive");
    if (num_classes < 2) throw ValidationError("model: num_classes must be >= 2");
    for (auto h : hidden)
        if (h == 0) throw ValidationError("model: hidden sizes must be positive");
}

Tensor& ParamSet::at(const std::string& name) {
    for (auto& it : items)
        if (it.name == name) return it.tensor;
    throw StateError("parameter not found: " + name);
}

const Tensor& ParamSet::at(const std::string& name) const {
    for (const auto& it : items)
        if (it.name == name) return it.tensor;
    throw StateError("parameter not found: " + name);
}

void ParamSet::zero_grads() {
    for (auto& it : items) it.tensor.zero_grad();
}

bool ParamSet::any_grad_missing() const {
    for (const auto& it : items)
        if (!it.tensor.has_grad()) return true;
    return false;
}

void SgdConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ValidationError("sgd: learning_rate must be > 0");
    if (max_grad_norm && !(*max_grad_norm > 0.0))
        throw ValidationError("sgd: max_grad_norm must be > 0");
}

namespace {

Tensor init_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng,
                   double gain = 1.0) {
    // He-style scaling; fine for both the ReLU stack and the linear head.
    const double s = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
    Tensor w = Tensor::zeros({fan_in, fan_out});
    for (auto& v : w.data) v = s * rng.normal();
    return w;
}

// The feature head starts small so the Gram matrices of an untrained
// encoder stay O(1); the relation losses are quartic in the feature scale.
constexpr double kFeatureInitGain = 0.2;

ParamSet make_encoder(const ModelConfig& arch, Rng& rng) {
    ParamSet enc;
    std::vector<std::size_t> dims;
    dims.push_back(arch.input_dim);
    for (auto h : arch.hidden) dims.push_back(h);
    dims.push_back(arch.feature_dim);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const bool output_layer = (l + 2 == dims.size());
        enc.items.push_back({"enc.w" + std::to_string(l),
                             init_weight(dims[l], dims[l + 1], rng,
                                         output_layer ? kFeatureInitGain : 1.0)});
        enc.items.push_back({"enc.b" + std::to_string(l),
                             Tensor::zeros({dims[l + 1]})});
    }
    return enc;
}

} // namespace

ParamSet init_classifier(const ModelConfig& arch, std::uint64_t seed) {
    Rng rng(seed);
    ParamSet cls;
    cls.items.push_back({"cls.w", init_weight(arch.feature_dim, arch.num_classes, rng)});
    cls.items.push_back({"cls.b", Tensor::zeros({arch.num_classes})});
    return cls;
}

ModelState init_model(const ModelConfig& arch, std::uint64_t seed) {
    arch.validate();
    ModelState st;
    st.arch = arch;
    Rng rng(derive_seed(seed, seed_tag("encoder-init")));
    st.encoder = make_encoder(arch, rng);
    st.classifier = init_classifier(arch, derive_seed(seed, seed_tag("classifier-init")));
    // Teacher starts as an exact copy of the student.
    st.teacher_encoder = st.encoder;
    st.teacher_classifier = st.classifier;
    return st;
}

namespace {

Graph::Node bind(Graph& g, Tensor& t, bool trainable) {
    return trainable ? g.param(t) : g.constant(t);
}

} // namespace

Graph::Node encoder_forward(Graph& g, Graph::Node x, ParamSet& params, bool trainable) {
    Graph::Node h = x;
    const std::size_t layers = params.items.size() / 2;
    for (std::size_t l = 0; l < layers; ++l) {
        Graph::Node w = bind(g, params.at("enc.w" + std::to_string(l)), trainable);
        Graph::Node b = bind(g, params.at("enc.b" + std::to_string(l)), trainable);
        h = g.add_rowvec(g.matmul(h, w), b);
        if (l + 1 < layers) h = g.relu(h);
    }
    return h;
}

Graph::Node classifier_forward(Graph& g, Graph::Node features, ParamSet& params,
                               bool trainable) {
    Graph::Node w = bind(g, params.at("cls.w"), trainable);
    Graph::Node b = bind(g, params.at("cls.b"), trainable);
    return g.add_rowvec(g.matmul(features, w), b);
}

Tensor encoder_forward_value(const Tensor& x, const ParamSet& params) {
    Tensor h = x;
    const std::size_t layers = params.items.size() / 2;
    for (std::size_t l = 0; l < layers; ++l) {
        const Tensor& w = params.at("enc.w" + std::to_string(l));
        const Tensor& b = params.at("enc.b" + std::to_string(l));
        h = matmul(h, w);
        const std::size_t k = h.cols();
        for (std::size_t i = 0; i < h.rows(); ++i)
            for (std::size_t j = 0; j < k; ++j) h.data[i * k + j] += b.data[j];
        if (l + 1 < layers)
            for (auto& v : h.data) v = v > 0.0 ? v : 0.0;
    }
    return h;
}

Tensor classifier_forward_value(const Tensor& features, const ParamSet& params) {
    const Tensor& w = params.at("cls.w");
    const Tensor& b = params.at("cls.b");
    Tensor logits = matmul(features, w);
    const std::size_t k = logits.cols();
    for (std::size_t i = 0; i < logits.rows(); ++i)
        for (std::size_t j = 0; j < k; ++j) logits.data[i * k + j] += b.data[j];
    return logits;
}

void sgd_step(ModelState& state, ParamGroup which, const SgdConfig& cfg) {
    cfg.validate();
    std::vector<ParamSet*> sets;
    if (which == ParamGroup::encoder || which == ParamGroup::both)
        sets.push_back(&state.encoder);
    if (which == ParamGroup::classifier || which == ParamGroup::both)
        sets.push_back(&state.classifier);

    for (const auto* set : sets)
        if (set->any_grad_missing())
            throw StateError("sgd_step: gradients missing for selected parameters");

    double clip_scale = 1.0;
    if (cfg.max_grad_norm) {
        double sq = 0.0;
        for (const auto* set : sets)
            for (const auto& it : set->items)
                for (double gv : it.tensor.grad) sq += gv * gv;
        const double norm = std::sqrt(sq);
        if (norm > *cfg.max_grad_norm) clip_scale = *cfg.max_grad_norm / norm;
    }

    for (auto* set : sets)
        for (auto& it : set->items) {
            Tensor& t = it.tensor;
            for (std::size_t i = 0; i < t.data.size(); ++i)
                t.data[i] -= cfg.learning_rate * clip_scale * t.grad[i];
            check_finite(t.data, "sgd_step parameters");
            t.zero_grad();
        }
}

namespace {

void ema_blend(ParamSet& teacher, const ParamSet& student, double m) {
    if (teacher.items.size() != student.items.size())
        throw StateError("ema_update: teacher/student parameter sets differ");
    for (std::size_t i = 0; i < teacher.items.size(); ++i) {
        Tensor& t = teacher.items[i].tensor;
        const Tensor& s = student.items[i].tensor;
        if (teacher.items[i].name != student.items[i].name || !t.same_shape(s))
            throw StateError("ema_update: mirror mismatch at " + teacher.items[i].name);
        for (std::size_t j = 0; j < t.data.size(); ++j)
            t.data[j] = m * t.data[j] + (1.0 - m) * s.data[j];
    }
}

} // namespace

void ema_update(ModelState& state) {
    const double m = state.ema_momentum;
    if (!(m > 0.0 && m < 1.0))
        throw ValidationError("ema_update: momentum must be in (0, 1)");
    ema_blend(state.teacher_encoder, state.encoder, m);
    ema_blend(state.teacher_classifier, state.classifier, m);
}

std::uint64_t param_hash(const ParamSet& params) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& it : params.items) {
        h = fnv1a64(it.name.data(), it.name.size(), h);
        h = fnv1a64(it.tensor.data.data(), it.tensor.data.size() * sizeof(double), h);
    }
    return h;
}

} // namespace lmd
