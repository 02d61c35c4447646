#include "lmd/graph.hpp"

#include <algorithm>
#include <cmath>

namespace lmd {

Graph::Node Graph::push(Tensor val, std::function<void(Graph&, NodeRec&)> back,
                        Tensor* bound) {
    check_finite(val.data, "graph forward pass");
    NodeRec r;
    r.val = std::move(val);
    r.back = std::move(back);
    r.bound = bound;
    nodes_.push_back(std::move(r));
    return static_cast<Node>(nodes_.size() - 1);
}

std::vector<double>& Graph::grad_buf(Node n) {
    auto& r = rec(n);
    if (r.grad.size() != r.val.size()) r.grad.assign(r.val.size(), 0.0);
    return r.grad;
}

std::span<const double> Graph::grad(Node n) const {
    const auto& r = nodes_[static_cast<std::size_t>(n)];
    return {r.grad.data(), r.grad.size()};
}

Graph::Node Graph::constant(Tensor t) {
    return push(std::move(t), nullptr);
}

Graph::Node Graph::param(Tensor& t) {
    return push(t, [](Graph&, NodeRec& self) {
        self.bound->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            self.bound->grad[i] += self.grad[i];
    }, &t);
}

Graph::Node Graph::matmul(Node a, Node b) {
    Tensor out = lmd::matmul(value(a), value(b));
    return push(std::move(out), [a, b](Graph& g, NodeRec& self) {
        const Tensor& av = g.value(a);
        const Tensor& bv = g.value(b);
        const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
        auto& ga = g.grad_buf(a);
        auto& gb = g.grad_buf(b);
        // dA += G B^T ; dB += A^T G
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    s += self.grad[i * n + j] * bv.data[p * n + j];
                ga[i * k + p] += s;
            }
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t i = 0; i < m; ++i)
                    s += av.data[i * k + p] * self.grad[i * n + j];
                gb[p * n + j] += s;
            }
    });
}

Graph::Node Graph::add(Node a, Node b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (!av.same_shape(bv))
        throw ValidationError("graph add: shape mismatch " + av.shape_str() + " vs " +
                              bv.shape_str());
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
    return push(std::move(out), [a, b](Graph& g, NodeRec& self) {
        auto& ga = g.grad_buf(a);
        auto& gb = g.grad_buf(b);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            ga[i] += self.grad[i];
            gb[i] += self.grad[i];
        }
    });
}

Graph::Node Graph::sub(Node a, Node b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (!av.same_shape(bv))
        throw ValidationError("graph sub: shape mismatch " + av.shape_str() + " vs " +
                              bv.shape_str());
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv.data[i];
    return push(std::move(out), [a, b](Graph& g, NodeRec& self) {
        auto& ga = g.grad_buf(a);
        auto& gb = g.grad_buf(b);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            ga[i] += self.grad[i];
            gb[i] -= self.grad[i];
        }
    });
}

Graph::Node Graph::mul(Node a, Node b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (!av.same_shape(bv))
        throw ValidationError("graph mul: shape mismatch");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
    return push(std::move(out), [a, b](Graph& g, NodeRec& self) {
        const Tensor& avv = g.value(a);
        const Tensor& bvv = g.value(b);
        auto& ga = g.grad_buf(a);
        auto& gb = g.grad_buf(b);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            ga[i] += self.grad[i] * bvv.data[i];
            gb[i] += self.grad[i] * avv.data[i];
        }
    });
}

Graph::Node Graph::add_rowvec(Node a, Node b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.ndim() != 2 || bv.size() != av.cols())
        throw ValidationError("add_rowvec: expects [BxK] + [K]");
    Tensor out = av;
    const std::size_t rows = av.rows(), k = av.cols();
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < k; ++j) out.data[i * k + j] += bv.data[j];
    return push(std::move(out), [a, b, rows, k](Graph& g, NodeRec& self) {
        auto& ga = g.grad_buf(a);
        auto& gb = g.grad_buf(b);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                ga[i * k + j] += self.grad[i * k + j];
                gb[j] += self.grad[i * k + j];
            }
    });
}

Graph::Node Graph::relu(Node a) {
    Tensor out = value(a);
    for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
    return push(std::move(out), [a](Graph& g, NodeRec& self) {
        const Tensor& av = g.value(a);
        auto& ga = g.grad_buf(a);
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (av.data[i] > 0.0) ga[i] += self.grad[i];
    });
}

Graph::Node Graph::square(Node a) {
    Tensor out = value(a);
    for (auto& v : out.data) v *= v;
    return push(std::move(out), [a](Graph& g, NodeRec& self) {
        const Tensor& av = g.value(a);
        auto& ga = g.grad_buf(a);
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            ga[i] += 2.0 * av.data[i] * self.grad[i];
    });
}

Graph::Node Graph::scale(Node a, double s) {
    Tensor out = value(a);
    for (auto& v : out.data) v *= s;
    return push(std::move(out), [a, s](Graph& g, NodeRec& self) {
        auto& ga = g.grad_buf(a);
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            ga[i] += s * self.grad[i];
    });
}

Graph::Node Graph::sum(Node a) {
    double s = 0.0;
    for (double v : value(a).data) s += v;
    return push(Tensor::scalar(s), [a](Graph& g, NodeRec& self) {
        auto& ga = g.grad_buf(a);
        for (auto& gv : ga) gv += self.grad[0];
    });
}

Graph::Node Graph::mean(Node a) {
    const std::size_t n = value(a).size();
    double s = 0.0;
    for (double v : value(a).data) s += v;
    return push(Tensor::scalar(s / static_cast<double>(n)),
                [a, n](Graph& g, NodeRec& self) {
        auto& ga = g.grad_buf(a);
        const double gv = self.grad[0] / static_cast<double>(n);
        for (auto& x : ga) x += gv;
    });
}

Graph::Node Graph::softmax_rows(Node z) {
    Tensor out = lmd::softmax_rows(value(z));
    return push(std::move(out), [z](Graph& g, NodeRec& self) {
        const Tensor& p = self.val;
        const std::size_t b = p.rows(), k = p.cols();
        auto& gz = g.grad_buf(z);
        for (std::size_t i = 0; i < b; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < k; ++j)
                dot += self.grad[i * k + j] * p.data[i * k + j];
            for (std::size_t j = 0; j < k; ++j)
                gz[i * k + j] += p.data[i * k + j] * (self.grad[i * k + j] - dot);
        }
    });
}

Graph::Node Graph::cross_entropy(Node logits, std::vector<int> labels) {
    const Tensor& lv = value(logits);
    if (lv.ndim() != 2) throw ValidationError("cross_entropy: logits must be B x K");
    if (labels.size() != lv.rows())
        throw ValidationError("cross_entropy: label count does not match batch");
    check_labels(labels, lv.cols());
    Tensor probs = lmd::softmax_rows(lv);
    const std::size_t b = lv.rows();
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i)
        loss -= std::log(std::max(probs.at(i, static_cast<std::size_t>(labels[i])), kProbEps));
    loss /= static_cast<double>(b);
    return push(Tensor::scalar(loss),
                [logits, labels = std::move(labels), probs = std::move(probs)](
                    Graph& g, NodeRec& self) {
        const std::size_t b2 = probs.rows(), k = probs.cols();
        auto& gz = g.grad_buf(logits);
        const double gv = self.grad[0] / static_cast<double>(b2);
        for (std::size_t i = 0; i < b2; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                double d = probs.data[i * k + j];
                if (static_cast<std::size_t>(labels[i]) == j) d -= 1.0;
                gz[i * k + j] += gv * d;
            }
    });
}

Graph::Node Graph::kl_rows(Node p, Node q) {
    const double kl = kl_rows_value(value(p), value(q));
    return push(Tensor::scalar(kl), [p, q](Graph& g, NodeRec& self) {
        const Tensor& pv = g.value(p);
        const Tensor& qv = g.value(q);
        const std::size_t b = pv.rows(), k = pv.cols();
        auto& gp = g.grad_buf(p);
        auto& gq = g.grad_buf(q);
        const double gv = self.grad[0] / static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                const double pij = std::max(pv.data[i * k + j], kProbEps);
                const double qij = std::max(qv.data[i * k + j], kProbEps);
                gp[i * k + j] += gv * (std::log(pij / qij) + 1.0);
                gq[i * k + j] -= gv * pij / qij;
            }
    });
}

Graph::Node Graph::gram_sample(Node z) {
    Tensor out = lmd::gram_sample(value(z));
    return push(std::move(out), [z](Graph& g, NodeRec& self) {
        const Tensor& zv = g.value(z);
        const std::size_t b = zv.rows(), c = zv.cols();
        auto& gz = g.grad_buf(z);
        // dZ += (G + G^T) Z
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t p = 0; p < c; ++p) {
                double s = 0.0;
                for (std::size_t j = 0; j < b; ++j)
                    s += (self.grad[i * b + j] + self.grad[j * b + i]) * zv.data[j * c + p];
                gz[i * c + p] += s;
            }
    });
}

Graph::Node Graph::gram_channel(Node z) {
    Tensor out = lmd::gram_channel(value(z));
    return push(std::move(out), [z](Graph& g, NodeRec& self) {
        const Tensor& zv = g.value(z);
        const std::size_t b = zv.rows(), c = zv.cols();
        auto& gz = g.grad_buf(z);
        // dZ += Z (G + G^T)
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t p = 0; p < c; ++p) {
                double s = 0.0;
                for (std::size_t q = 0; q < c; ++q)
                    s += zv.data[i * c + q] * (self.grad[q * c + p] + self.grad[p * c + q]);
                gz[i * c + p] += s;
            }
    });
}

Graph::Node Graph::quadratic_form(Node x, Tensor mu, Tensor metric) {
    Tensor out = lmd::quadratic_form(value(x), mu, metric);
    return push(std::move(out),
                [x, mu = std::move(mu), metric = std::move(metric)](
                    Graph& g, NodeRec& self) {
        const Tensor& xv = g.value(x);
        const std::size_t b = xv.rows(), c = xv.cols();
        auto& gx = g.grad_buf(x);
        std::vector<double> d(c);
        // d/dx_i = 2 g_i A (x_i - mu) for symmetric A.
        for (std::size_t i = 0; i < b; ++i) {
            const double gi = self.grad[i];
            if (gi == 0.0) continue;
            for (std::size_t p = 0; p < c; ++p) d[p] = xv.data[i * c + p] - mu.data[p];
            for (std::size_t p = 0; p < c; ++p) {
                double s = 0.0;
                for (std::size_t q = 0; q < c; ++q) s += metric.data[p * c + q] * d[q];
                gx[i * c + p] += 2.0 * gi * s;
            }
        }
    });
}

Graph::Node Graph::gather_rows(Node a, std::vector<std::size_t> rows) {
    const Tensor& av = value(a);
    if (av.ndim() != 2) throw ValidationError("gather_rows: expects a 2-d tensor");
    const std::size_t c = av.cols();
    Tensor out = Tensor::zeros({rows.size(), c});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= av.rows()) throw ValidationError("gather_rows: index out of range");
        std::copy_n(&av.data[rows[i] * c], c, &out.data[i * c]);
    }
    return push(std::move(out), [a, rows = std::move(rows), c](Graph& g, NodeRec& self) {
        auto& ga = g.grad_buf(a);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t p = 0; p < c; ++p)
                ga[rows[i] * c + p] += self.grad[i * c + p];
    });
}

void Graph::backward(Node root) {
    auto& r = rec(root);
    if (!r.val.is_scalar())
        throw ValidationError("backward: root must be a scalar node");
    for (auto& n : nodes_) n.grad.assign(n.val.size(), 0.0);
    r.grad[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        auto& n = nodes_[i];
        if (n.back) n.back(*this, n);
    }
    for (const auto& n : nodes_) {
        check_finite(n.grad, "graph backward pass");
        if (n.bound) check_finite(n.bound->grad, "parameter gradient");
    }
}

} // namespace lmd
