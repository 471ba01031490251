#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "mdist/tensor.hpp"

namespace mdist {

// Reverse-mode automatic differentiation over a flat tape of primitive
// applications. Nodes are appended in topological order; backward() walks
// the tape once in reverse. One Tape per forward/backward pass.
class Tape {
public:
    using NodeId = std::size_t;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaves.
    NodeId leaf(Tensor v);
    NodeId constant(double v) { return leaf(Tensor::scalar(v)); }

    const Tensor& value(NodeId id) const;
    std::size_t size() const { return nodes_.size(); }

    // Elementwise binary primitives with trailing-axis broadcasting.
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId div(NodeId a, NodeId b);

    // 2-D matrix product.
    NodeId matmul(NodeId a, NodeId b);

    // Elementwise unary primitives.
    NodeId relu(NodeId a);    // max(0, x); subgradient 0 at x == 0
    NodeId square(NodeId a);
    NodeId sqrt(NodeId a);    // rejects negative inputs
    NodeId abs(NodeId a);

    // Reductions. Axes are removed from the output shape; reducing over all
    // axes yields a scalar.
    NodeId sum(NodeId a, std::vector<std::size_t> axes);
    NodeId mean(NodeId a, std::vector<std::size_t> axes);
    NodeId sum_all(NodeId a);
    NodeId mean_all(NodeId a);

    // L2 norm over one axis: sqrt(sum(x^2, axis) + eps).
    NodeId l2norm(NodeId a, std::size_t axis, double eps = 0.0);

    // Explicit broadcast of a (typically scalar) tensor to a larger shape.
    NodeId broadcast_to(NodeId a, Shape shape);

    // Select rows (leading axis) by index; duplicates allowed.
    NodeId gather_rows(NodeId a, std::vector<std::size_t> rows);

    // Row-major reinterpretation; element count must be preserved.
    NodeId reshape(NodeId a, Shape shape);

    // 2-D convolution over B x C x H x W with odd kernel, zero padding
    // kernel/2 and stride 1 or 2. Weights are OC x IC x K x K, bias OC.
    NodeId conv2d(NodeId x, NodeId w, NodeId b, std::size_t stride);

    // B x C x H x W -> B x C spatial mean.
    NodeId global_avg_pool(NodeId x);

    // Gradients of a scalar root with respect to every node on the tape.
    // Nodes unreachable from the root get zero gradients.
    std::vector<Tensor> backward(NodeId root) const;

private:
    struct Node {
        Tensor value;
        std::vector<NodeId> inputs;
        // Accumulates input gradients given the output gradient. Null for leaves.
        std::function<void(const Tensor& gout, std::vector<Tensor>& grads)> back;
    };

    NodeId push(Tensor value, std::vector<NodeId> inputs,
                std::function<void(const Tensor&, std::vector<Tensor>&)> back);
    const Tensor& in(NodeId id, const char* op) const;

    // deque keeps value() references stable while the tape grows
    std::deque<Node> nodes_;
};

}  // namespace mdist
