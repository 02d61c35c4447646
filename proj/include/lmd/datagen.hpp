#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lmd/tensor.hpp"

namespace lmd {

// Pareto long-tail layout: counts[c] = max(1, round(N0 * r^(-c/(K-1)))),
// so counts[K-1] == round(N0 / r) and r is the head/tail ratio.
struct LongTailSpec {
    int num_classes = 8;
    int head_count = 1000;
    double imbalance_factor = 100.0;
    int feature_dim = 10;
    double class_separation = 3.0;
    int noise_dims = 0;
    std::uint64_t seed = 1;

    void validate() const;
};

enum class Split { train, val, test };

struct Dataset {
    Tensor features; // N x C0
    std::vector<int> labels;
    std::vector<int> class_counts;
    Split split_tag = Split::train;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return features.ndim() == 2 ? features.cols() : 0; }
    int num_classes() const { return static_cast<int>(class_counts.size()); }
    void validate() const;
};

// Vector-space stand-ins for strong/weak image augmentation: additive
// Gaussian noise, coordinate masking, and a per-sample scale jitter.
struct PerturbConfig {
    double gauss_sigma = 0.0;
    double mask_prob = 0.0;
    double scale_jitter = 0.0;
    std::uint64_t seed = 0;

    static PerturbConfig weak_defaults(std::uint64_t seed = 0);
    static PerturbConfig strong_defaults(std::uint64_t seed = 0);
    void validate() const;
};

// Weak must be strictly gentler than strong on all three knobs.
void validate_perturb_pair(const PerturbConfig& strong, const PerturbConfig& weak);

std::vector<int> pareto_counts(const LongTailSpec& spec);
Dataset synth_longtail(const LongTailSpec& spec);

struct SplitResult {
    Dataset train, val, test;
};
SplitResult split(const Dataset& ds, std::array<double, 3> ratios, std::uint64_t seed);

// Deterministic in (cfg.seed, batch_index); batch rows keep their order.
Tensor perturb(const Tensor& batch, const PerturbConfig& cfg,
               std::uint64_t batch_index = 0);

// Uniform-over-instances epoch sampler (shuffles without replacement).
class InstanceSampler {
public:
    InstanceSampler(std::size_t n, std::uint64_t seed);
    // A full epoch of indices, reshuffled each call.
    std::vector<int> next_epoch();

private:
    std::vector<int> order_;
    Rng rng_;
};

// Class-balanced stream: class uniform, then instance uniform within the
// class, with replacement (p_k = 1/K).
class ClassBalancedSampler {
public:
    ClassBalancedSampler(const Dataset& ds, std::uint64_t seed);
    int next();
    std::vector<int> next_batch(std::size_t batch);

private:
    std::vector<std::vector<int>> by_class_;
    Rng rng_;
};

// Per-dimension affine normalization fitted on the training split and
// applied to every split (the vector analogue of the normalization step
// in the augmentation stack). Keeps the Gram-based losses well scaled.
struct Standardizer {
    std::vector<double> mean;
    std::vector<double> inv_std; // 1/std, floored to avoid blow-ups

    static Standardizer fit(const Tensor& features);
    void apply(Tensor& features) const;
    void apply(Dataset& ds) const { apply(ds.features); }
};

// Binary .lmds and .csv round trips; dispatch on the extension.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

} // namespace lmd
