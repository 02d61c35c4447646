#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lmd/graph.hpp"
#include "lmd/tensor.hpp"

namespace lmd {

// MLP encoder: input_dim -> hidden (ReLU) -> feature_dim, then a single
// linear classifier feature_dim -> num_classes.
struct ModelConfig {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden{64};
    std::size_t feature_dim = 32;
    std::size_t num_classes = 0;

    bool operator==(const ModelConfig&) const = default;
    void validate() const;
};

// Ordered named tensors; order is fixed so serialization and EMA walk
// parameters deterministically.
struct ParamSet {
    struct Item {
        std::string name;
        Tensor tensor;
    };
    std::vector<Item> items;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    void zero_grads();
    bool any_grad_missing() const;
};

struct SgdConfig {
    double learning_rate = 0.01;
    std::optional<double> max_grad_norm;

    void validate() const;
};

enum class ParamGroup { encoder, classifier, both };

// Student encoder/classifier plus same-shaped teacher mirrors. Teacher
// tensors never carry gradient buffers.
struct ModelState {
    ModelConfig arch;
    ParamSet encoder;
    ParamSet classifier;
    ParamSet teacher_encoder;
    ParamSet teacher_classifier;
    double ema_momentum = 0.99;
};

ModelState init_model(const ModelConfig& arch, std::uint64_t seed);
// Fresh random classifier with the stage-1 init scheme (used by the
// second-stage re-initialization and the decoupling comparator).
ParamSet init_classifier(const ModelConfig& arch, std::uint64_t seed);

// Graph forwards. `trainable` binds parameters as leaves; otherwise they
// enter as constants (teacher passes, frozen sub-networks).
Graph::Node encoder_forward(Graph& g, Graph::Node x, ParamSet& params, bool trainable);
Graph::Node classifier_forward(Graph& g, Graph::Node features, ParamSet& params,
                               bool trainable);

// Plain forwards for evaluation paths (no tape).
Tensor encoder_forward_value(const Tensor& x, const ParamSet& params);
Tensor classifier_forward_value(const Tensor& features, const ParamSet& params);

// p <- p - lr * grad for the selected group; optional global-norm clip
// over the selected set; gradients zeroed afterwards. Missing gradients
// raise StateError.
void sgd_step(ModelState& state, ParamGroup which, const SgdConfig& cfg);

// teacher <- m * teacher + (1 - m) * student, elementwise, both mirrors.
void ema_update(ModelState& state);

// FNV hash over a parameter set's raw bytes; used by freeze-contract checks.
std::uint64_t param_hash(const ParamSet& params);

} // namespace lmd
