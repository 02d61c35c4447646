#include "lmd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lmd {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

} // namespace

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    Tensor t;
    t.data.assign(shape_product(shape), 0.0);
    t.shape = std::move(shape);
    return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    Tensor t;
    t.data.assign(shape_product(shape), value);
    t.shape = std::move(shape);
    return t;
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> values) {
    if (shape_product(shape) != values.size())
        throw ValidationError("Tensor::from: shape does not match value count");
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::move(values);
    return t;
}

Tensor Tensor::scalar(double v) {
    return from({1}, {v});
}

Tensor Tensor::eye(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0;
    return t;
}

std::size_t Tensor::rows() const {
    if (shape.empty()) throw ValidationError("Tensor::rows on 0-dim tensor");
    return shape[0];
}

std::size_t Tensor::cols() const {
    if (shape.size() != 2) throw ValidationError("Tensor::cols needs a 2-d tensor");
    return shape[1];
}

double Tensor::item() const {
    if (data.size() != 1) throw ValidationError("Tensor::item on non-scalar");
    return data[0];
}

double& Tensor::at(std::size_t i, std::size_t j) {
    return data[i * cols() + j];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    return data[i * cols() + j];
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    std::fill(grad.begin(), grad.end(), 0.0);
}

// ------------------------------------------------------------
// Forward ops
// ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw ValidationError("matmul: expects 2-d tensors, got " + a.shape_str() +
                              " and " + b.shape_str());
    if (a.cols() != b.rows())
        throw ValidationError("matmul: inner dimensions disagree: " + a.shape_str() +
                              " vs " + b.shape_str());
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = &a.data[i * k];
        double* oi = &out.data[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = &b.data[p * n];
            for (std::size_t j = 0; j < n; ++j) oi[j] += av * bp[j];
        }
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw ValidationError("transpose: expects a 2-d tensor");
    Tensor out = Tensor::zeros({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            out.at(j, i) = a.at(i, j);
    return out;
}

Tensor softmax_rows(const Tensor& z) {
    if (z.ndim() != 2) throw ValidationError("softmax_rows: expects a 2-d tensor");
    const std::size_t b = z.rows(), k = z.cols();
    Tensor out = Tensor::zeros({b, k});
    for (std::size_t i = 0; i < b; ++i) {
        const double* zi = &z.data[i * k];
        double m = zi[0];
        for (std::size_t j = 1; j < k; ++j) m = std::max(m, zi[j]);
        double sum = 0.0;
        double* oi = &out.data[i * k];
        for (std::size_t j = 0; j < k; ++j) {
            oi[j] = std::exp(zi[j] - m);
            sum += oi[j];
        }
        for (std::size_t j = 0; j < k; ++j) oi[j] /= sum;
    }
    return out;
}

Tensor gram_sample(const Tensor& z) {
    if (z.ndim() != 2) throw ValidationError("gram_sample: expects a 2-d tensor");
    const std::size_t b = z.rows(), c = z.cols();
    Tensor out = Tensor::zeros({b, b});
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = i; j < b; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < c; ++p) s += z.at(i, p) * z.at(j, p);
            out.at(i, j) = s;
            out.at(j, i) = s;
        }
    return out;
}

Tensor gram_channel(const Tensor& z) {
    if (z.ndim() != 2) throw ValidationError("gram_channel: expects a 2-d tensor");
    const std::size_t b = z.rows(), c = z.cols();
    Tensor out = Tensor::zeros({c, c});
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = i; j < c; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < b; ++p) s += z.at(p, i) * z.at(p, j);
            out.at(i, j) = s;
            out.at(j, i) = s;
        }
    return out;
}

Tensor quadratic_form(const Tensor& x, const Tensor& mu, const Tensor& a) {
    if (x.ndim() != 2) throw ValidationError("quadratic_form: x must be B x C");
    const std::size_t b = x.rows(), c = x.cols();
    if (mu.size() != c)
        throw ValidationError("quadratic_form: mu length does not match feature dim");
    if (a.ndim() != 2 || a.rows() != c || a.cols() != c)
        throw ValidationError("quadratic_form: A must be C x C");
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = i + 1; j < c; ++j)
            if (std::abs(a.at(i, j) - a.at(j, i)) > 1e-9)
                throw ValidationError("quadratic_form: A is not symmetric");
    Tensor out = Tensor::zeros({b});
    std::vector<double> d(c), ad(c);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t p = 0; p < c; ++p) d[p] = x.at(i, p) - mu.data[p];
        for (std::size_t p = 0; p < c; ++p) {
            double s = 0.0;
            for (std::size_t q = 0; q < c; ++q) s += a.at(p, q) * d[q];
            ad[p] = s;
        }
        double v = 0.0;
        for (std::size_t p = 0; p < c; ++p) v += d[p] * ad[p];
        out.data[i] = v;
    }
    return out;
}

void check_labels(std::span<const int> labels, std::size_t num_classes) {
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
            throw ValidationError("label " + std::to_string(y) + " out of range [0, " +
                                  std::to_string(num_classes) + ")");
}

double cross_entropy_value(const Tensor& logits, std::span<const int> labels) {
    if (logits.ndim() != 2) throw ValidationError("cross_entropy: logits must be B x K");
    if (labels.size() != logits.rows())
        throw ValidationError("cross_entropy: label count does not match batch");
    check_labels(labels, logits.cols());
    const Tensor p = softmax_rows(logits);
    const std::size_t b = logits.rows();
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i)
        loss -= std::log(std::max(p.at(i, static_cast<std::size_t>(labels[i])), kProbEps));
    return loss / static_cast<double>(b);
}

double kl_rows_value(const Tensor& p, const Tensor& q) {
    if (p.ndim() != 2 || !p.same_shape(q))
        throw ValidationError("kl_rows: p and q must be equal-shape 2-d tensors");
    const std::size_t b = p.rows(), k = p.cols();
    for (std::size_t i = 0; i < b; ++i) {
        double sp = 0.0, sq = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            if (p.at(i, j) < -1e-9 || q.at(i, j) < -1e-9)
                throw ValidationError("kl_rows: negative probability entry");
            sp += p.at(i, j);
            sq += q.at(i, j);
        }
        if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
            throw ValidationError("kl_rows: rows are not stochastic within 1e-6");
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const double pv = p.at(i, j);
            if (pv <= 0.0) continue;
            const double qv = std::max(q.at(i, j), kProbEps);
            kl += pv * std::log(pv / qv);
        }
    return kl / static_cast<double>(b);
}

} // namespace lmd
