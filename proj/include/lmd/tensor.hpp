#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "lmd/common.hpp"

namespace lmd {

// Dense row-major tensor of 64-bit floats. Values are plain data; the
// optional grad buffer is used for trainable parameters and is filled by
// Graph::backward. product(shape) == data.size() always holds.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad; // empty, or same length as data

    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> values);
    static Tensor scalar(double v);
    static Tensor eye(std::size_t n);

    std::size_t size() const { return data.size(); }
    std::size_t ndim() const { return shape.size(); }
    std::size_t rows() const;
    std::size_t cols() const;
    bool is_scalar() const { return data.size() == 1; }
    double item() const;

    double& at(std::size_t i, std::size_t j);
    double at(std::size_t i, std::size_t j) const;

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    std::string shape_str() const;

    void ensure_grad();
    void zero_grad();
    bool has_grad() const { return !grad.empty(); }
};

// ------------------------------------------------------------
// Forward-only ops (no tape). The Graph wraps these for autodiff;
// evaluation paths call them directly.
// ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// Row-stable softmax: per-row max subtraction, rows sum to 1.
Tensor softmax_rows(const Tensor& z);
// z z^T: relations among samples of a B x C feature batch.
Tensor gram_sample(const Tensor& z);
// z^T z: relations among channels.
Tensor gram_channel(const Tensor& z);
// Per-row (x_i - mu) A (x_i - mu)^T for symmetric A.
Tensor quadratic_form(const Tensor& x, const Tensor& mu, const Tensor& a);

// Mean over the batch of -log softmax(logits)[label].
double cross_entropy_value(const Tensor& logits, std::span<const int> labels);
// (1/B) sum_b sum_k p log(p/q), q clamped below by 1e-12.
double kl_rows_value(const Tensor& p, const Tensor& q);

inline constexpr double kProbEps = 1e-12;

// Validates labels in [0, K); throws ValidationError otherwise.
void check_labels(std::span<const int> labels, std::size_t num_classes);

} // namespace lmd
