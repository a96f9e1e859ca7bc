#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "l2aed/tensor.hpp"

namespace l2aed {

class Graph;

/// Handle to a value recorded in a Graph.
///
/// Cheap to copy. Valid for the lifetime of the Graph that issued it.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t id() const noexcept { return id_; }
    Graph* graph() const noexcept { return graph_; }
    bool requires_grad() const;

private:
    friend class Graph;
    Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// Tape of recorded operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so insertion order is a valid
/// topological order and `backward` is a single reverse sweep. A Graph is
/// single-threaded; independent episodes use independent graphs.
class Graph {
public:
    /// Receives the output gradient and accumulates into input gradients
    /// through `Graph::grad_buffer`.
    using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Append an op result. `backward` is dropped when no input needs grad.
    Var record(const char* kind, Tensor value, std::span<const Var> inputs, BackwardFn backward);

    /// Reverse sweep from a one-element loss. Leaf gradients accumulate, so
    /// a second call without `zero_grad` adds to the first.
    void backward(const Var& loss);
    void zero_grad();

    /// Gradient of the loss w.r.t. `v`; zeros if `v` did not influence it.
    Tensor grad(const Var& v) const;

    /// Mutable gradient accumulator for node `id` (allocated on first use).
    Tensor& grad_buffer(std::size_t id);

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    const char* kind(std::size_t id) const { return nodes_.at(id).kind; }
    std::vector<std::size_t> inputs(std::size_t id) const { return nodes_.at(id).inputs; }
    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        const char* kind;
        Tensor value;
        Tensor grad;
        bool requires_grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
    };

    void check_owned(const Var& v) const;

    std::deque<Node> nodes_;  // deque keeps value references stable as the graph grows
};

// ---------------------------------------------------------------------------
// Layer ops used by the few-shot network. All are differentiable w.r.t. every
// Var argument unless stated otherwise.

/// 3x3 convolution, stride 1, zero padding 1.
/// x: [N,Cin,H,W], kernel: [Cout,Cin,3,3], bias: [Cout] -> [N,Cout,H,W].
Var conv2d(const Var& x, const Var& kernel, const Var& bias);

/// Batch normalization with the statistics of `x` itself (population
/// variance over N*H*W per channel). No running statistics exist.
Var batchnorm_batch(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

Var relu(const Var& x);

/// 2x2 max pooling, stride 2, floor semantics. Gradient goes to the first
/// maximal element of each window in row-major order.
Var maxpool2(const Var& x);

/// x: [N,D], weight: [M,D], bias: [M] -> x * weight^T + bias.
Var linear(const Var& x, const Var& weight, const Var& bias);

/// Softmax along the last axis (max-shifted).
Var softmax(const Var& x);
Var log_softmax(const Var& x);

/// Inverted channel dropout: out[n,c] = x[n,c] * mask[c] / keep.
/// `mask` is a constant {0,1} vector of length C.
Var dropout_apply(const Var& x, const Tensor& mask, double keep);

/// Number of dropout_apply calls made on this thread (instrumentation).
std::size_t dropout_apply_calls() noexcept;

// ---------------------------------------------------------------------------
// Structural and reduction ops.

Var reshape(const Var& x, Shape shape);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var sum(const Var& x);

/// Stack equal-shaped values along a new leading axis.
Var stack(std::span<const Var> parts);

/// Zero-pad axis 1 of [N,C,h,w] up to `width` channels.
Var pad_channels(const Var& x, std::size_t width);

/// First `m` columns of a [R,M] matrix.
Var take_cols(const Var& x, std::size_t m);

/// embs: [N,C,h,w] -> [C,m,h,w] with out[k,i] = embs[index[i],k];
/// a negative index yields an all-zero map.
Var gather_channel_stacks(const Var& embs, std::span<const int> index);

/// stacks: [C,m,h,w], weights: [C,m] -> [C,h,w], out[k] = sum_i w[k,i]*stacks[k,i].
Var weighted_channel_sum(const Var& stacks, const Var& weights);

/// a: [Q,D], b: [P,D] -> [Q,P] Euclidean distances. Gradient at d=0 is 0.
Var pairwise_distance(const Var& a, const Var& b);

/// Mean negative log-likelihood of `labels` under row-wise log-probs [Q,C].
Var nll_mean(const Var& log_probs, std::span<const int> labels);

}  // namespace l2aed
