#pragma once

#include <cstdint>
#include <vector>

#include "lmd/datagen.hpp"
#include "lmd/graph.hpp"
#include "lmd/model.hpp"

namespace lmd {

struct Stage1Config {
    double lambda1 = 10.0;
    int epochs = 100;
    int batch_size = 128;
    double lr = 0.01;
    double ema_momentum = 0.99;
    PerturbConfig perturb_strong = PerturbConfig::strong_defaults();
    PerturbConfig perturb_weak = PerturbConfig::weak_defaults();
    // KL argument order is not fixed by the notation; student-first is the
    // literal reading, the switch gives the reversed direction.
    bool kl_student_first = true;
    // The printed loss takes the CE term on the weak view.
    bool ce_on_strong_view = false;
    // Global gradient-norm clip; the Gram terms are quartic in the feature
    // scale and can spike early in training. <= 0 disables.
    double max_grad_norm = 5.0;
    std::uint64_t seed = 1;

    void validate() const;
};

struct Stage1Trace {
    std::vector<double> l_ce;
    std::vector<double> l_prob;
    std::vector<double> l_sample;
    std::vector<double> l_channel;
    std::vector<double> l_total;
    std::vector<double> val_bacc;

    bool operator==(const Stage1Trace&) const = default;
};

struct Stage1Breakdown {
    double ce = 0.0;
    double prob = 0.0;
    double sample = 0.0;
    double channel = 0.0;
    double total = 0.0;
};

// Prediction-consistency term: mean KL between student and teacher
// softmax rows. The teacher node must be a constant (stop-gradient).
Graph::Node loss_prob(Graph& g, Graph::Node student_logits, Graph::Node teacher_logits,
                      bool kl_student_first = true);
// (1/B) sum (S_b(z_s) - S_b(z_w))^2 over the sample Gram matrices.
Graph::Node loss_sample(Graph& g, Graph::Node z_student, Graph::Node z_teacher);
// (1/C) sum (S_c(z_s) - S_c(z_w))^2 over the channel Gram matrices.
Graph::Node loss_channel(Graph& g, Graph::Node z_student, Graph::Node z_teacher);

// Forward-only values for oracle tests.
double loss_prob_value(const Tensor& student_logits, const Tensor& teacher_logits,
                       bool kl_student_first = true);
double loss_sample_value(const Tensor& z_student, const Tensor& z_teacher);
double loss_channel_value(const Tensor& z_student, const Tensor& z_teacher);

// Builds the strong/weak views from the raw batch and assembles
// CE + lambda1 * (sample + channel + prob/2). Student parameters enter as
// trainable leaves; teacher passes are constants.
Graph::Node loss_stage1(Graph& g, const Tensor& batch_features,
                        const std::vector<int>& labels, ModelState& state,
                        const Stage1Config& cfg, std::uint64_t batch_index,
                        Stage1Breakdown* breakdown = nullptr);

// Full stage-1 loop: per step, backward + SGD on the student, then the
// teacher EMA. Instance-uniform sampling over the imbalanced stream.
struct Stage1Result {
    ModelState state;
    Stage1Trace trace;
};
Stage1Result train_stage1(const Dataset& train, const Dataset& val,
                          const ModelConfig& arch, const Stage1Config& cfg);

// Plain cross-entropy training of encoder+classifier on raw inputs (no
// teacher, no consistency, no views): the CE/RS baselines, the decoupling
// first stage, and the RRL-ablated first stage.
Stage1Result train_ce_only(const Dataset& train, const Dataset& val,
                           const ModelConfig& arch, const Stage1Config& cfg,
                           bool class_balanced_sampling);

// Argmax predictions and softmax scores of the student.
struct EvalOutput {
    std::vector<int> preds;
    Tensor scores; // N x K row-stochastic
};
EvalOutput predict(const ModelState& state, const Tensor& features);
double eval_bacc(const ModelState& state, const Dataset& ds);

} // namespace lmd
