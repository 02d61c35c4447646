#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "lmd/datagen.hpp"
#include "lmd/graph.hpp"
#include "lmd/model.hpp"

namespace lmd {

enum class MahalanobisMode { inverse, as_printed };
enum class SamplingMode { uniform, class_balanced };

// Per-class Gaussian moments. sigma holds the raw symmetrized estimate;
// chol factors sigma + ridge_used * I, where ridge_used scales the ridge
// knob by trace(sigma)/C (absolute ridge when a class degenerates).
struct ClassMoments {
    std::size_t num_classes = 0;
    std::size_t dim = 0;
    std::vector<Tensor> mu;           // K x [C]
    std::vector<Tensor> sigma;        // K x [C x C]
    std::vector<Tensor> chol;         // K x [C x C], lower triangular
    std::vector<double> ridge_used;   // K
    std::vector<long long> sample_counts;
    double ema_momentum = 0.9;
    double ridge = 1e-4;

    static ClassMoments from_parameters(std::vector<Tensor> mu,
                                        std::vector<Tensor> sigma, double ridge,
                                        double ema_momentum = 0.9);
    void validate() const;
};

struct VirtualFeatureBank {
    Tensor features; // (R*K) x C, class-major
    std::vector<int> labels;
    long long per_class = 0;

    std::size_t size() const { return labels.size(); }
};

struct IccConfig {
    int iterations = 5;            // J
    long long r_virtual = 50000;   // R
    double lambda_e = 1e-4;
    double lr_classifier = 1e-5;
    double lr_encoder = 1e-6;
    int m_epochs = 10;
    int e_epochs = 5;
    int batch_size = 128;
    MahalanobisMode mahalanobis_mode = MahalanobisMode::inverse;
    SamplingMode e_step_sampling = SamplingMode::uniform;
    SamplingMode m_step_stats_sampling = SamplingMode::class_balanced;
    double moment_momentum = 0.9;
    double ridge = 1e-4;
    bool use_virtual = true; // false swaps VFC for resampled real features
    // Global gradient-norm clip for both steps; the repulsion term is an
    // unbounded objective and can spike. <= 0 disables.
    double max_grad_norm = 10.0;
    std::uint64_t seed = 1;

    void validate() const;
};

// Lower-triangular Cholesky factor; NumericError if not positive definite.
Tensor cholesky_lower(const Tensor& a);

// Exact per-class mean and unbiased covariance in uniform mode; in
// class_balanced mode the same statistics over a balanced resampled
// stream of N draws (class uniform, instance uniform, with replacement).
ClassMoments estimate_class_moments(const Tensor& features, std::span<const int> labels,
                                    int num_classes, SamplingMode mode,
                                    double ridge = 1e-4, double ema_momentum = 0.9,
                                    std::uint64_t seed = 0);

// prev-weighted blend of mu and sigma; Cholesky refactored from the blend.
ClassMoments ema_moments(const ClassMoments& prev, const ClassMoments& next);

// R draws per class of mu_k + chol_k * xi, xi standard normal.
VirtualFeatureBank vfc_sample(const ClassMoments& moments, long long r_per_class,
                              std::uint64_t seed);

// R draws per class with replacement from real features (the VFC-off bank).
VirtualFeatureBank real_feature_bank(const Tensor& features, std::span<const int> labels,
                                     int num_classes, long long r_per_class,
                                     std::uint64_t seed);

// Per-class quadratic-form metrics: (sigma + ridge I)^-1 in inverse mode,
// the symmetrized sigma itself in as_printed mode.
std::vector<Tensor> metric_matrices(const ClassMoments& moments, MahalanobisMode mode);

// Mean own-class quadratic form (attraction).
double attraction_psi(const Tensor& features, std::span<const int> labels,
                      const ClassMoments& moments,
                      MahalanobisMode mode = MahalanobisMode::inverse);
// Mean foreign-class quadratic form, averaged over the K-1 other classes.
double repulsion_phi(const Tensor& features, std::span<const int> labels,
                     const ClassMoments& moments,
                     MahalanobisMode mode = MahalanobisMode::inverse);

struct FdcBreakdown {
    double psi = 0.0;
    double phi = 0.0;
    double ce = 0.0;
    double total = 0.0;
};

// lambda_e * (psi - phi) + CE(f(g(x)), y) with the classifier frozen;
// gradient reaches the encoder only.
Graph::Node fdc_loss(Graph& g, const Tensor& batch_features,
                     const std::vector<int>& labels, ModelState& state,
                     const ClassMoments& moments, const IccConfig& cfg,
                     FdcBreakdown* breakdown = nullptr,
                     const std::vector<Tensor>* precomputed_metrics = nullptr);

// Classifier training on the bank, encoder untouched. Returns the final
// epoch's mean loss.
double m_step(const VirtualFeatureBank& bank, ModelState& state, const IccConfig& cfg,
              std::uint64_t seed);

// Encoder fine-tuning under the FDC loss, classifier untouched. Returns
// the final epoch's mean loss (0 when e_epochs == 0).
double e_step(const Dataset& train, ModelState& state, const ClassMoments& moments,
              const IccConfig& cfg, std::uint64_t seed);

struct IccIterationRecord {
    int iteration = 0;
    double m_loss = 0.0;
    double e_loss = 0.0;
    double val_bacc = 0.0;

    bool operator==(const IccIterationRecord&) const = default;
};

// entries are deterministic per seed; wall_clock_seconds (cumulative,
// per iteration) is the only timing channel and is kept out of equality.
struct IccTrace {
    std::vector<IccIterationRecord> entries;
    std::vector<double> wall_clock_seconds;
};

struct IccResult {
    ModelState state;
    IccTrace trace;
};

// Algorithm: re-initialize the classifier, keep the stage-1 encoder, then
// J rounds of {estimate moments -> EMA -> sample bank -> M-step -> E-step}.
IccResult run_icc(const Dataset& train, const Dataset& val,
                  const ModelState& stage1_state, const IccConfig& cfg);

} // namespace lmd
