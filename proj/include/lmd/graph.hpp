#pragma once

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "lmd/tensor.hpp"

namespace lmd {

// Reverse-mode tape, rebuilt per forward pass. Nodes are appended in
// topological order; backward() sweeps them in reverse. Parameters are
// bound leaves: their accumulated gradient lands in Tensor::grad so the
// optimizer can consume it. Every node value is checked finite on
// creation and every gradient after backward; NaN/Inf raises NumericError.
class Graph {
public:
    using Node = int;

    Node constant(Tensor t);
    // Leaf bound to an external parameter; backward adds into t.grad.
    Node param(Tensor& t);

    Node matmul(Node a, Node b);
    Node add(Node a, Node b);
    Node sub(Node a, Node b);
    Node mul(Node a, Node b); // elementwise
    // [B x K] + [K], broadcast over rows (bias add).
    Node add_rowvec(Node a, Node b);
    Node relu(Node a);
    Node square(Node a);
    Node scale(Node a, double s);
    Node sum(Node a);
    Node mean(Node a);
    Node softmax_rows(Node z);
    Node cross_entropy(Node logits, std::vector<int> labels);
    Node kl_rows(Node p, Node q);
    Node gram_sample(Node z);
    Node gram_channel(Node z);
    // mu and metric are constants of the pass; gradient flows to x only.
    Node quadratic_form(Node x, Tensor mu, Tensor metric);
    Node gather_rows(Node a, std::vector<std::size_t> rows);

    // Node storage is a deque, so returned references stay valid while
    // further nodes are appended.
    const Tensor& value(Node n) const { return nodes_[static_cast<std::size_t>(n)].val; }
    std::span<const double> grad(Node n) const;

    // Root must be scalar. Clears previous node gradients, then sweeps.
    void backward(Node root);

    std::size_t size() const { return nodes_.size(); }

private:
    struct NodeRec {
        Tensor val;
        std::vector<double> grad;
        std::function<void(Graph&, NodeRec&)> back; // may be empty (constants)
        Tensor* bound = nullptr;
    };

    NodeRec& rec(Node n) { return nodes_[static_cast<std::size_t>(n)]; }
    Node push(Tensor val, std::function<void(Graph&, NodeRec&)> back,
              Tensor* bound = nullptr);
    std::vector<double>& grad_buf(Node n);

    std::deque<NodeRec> nodes_;
};

} // namespace lmd
