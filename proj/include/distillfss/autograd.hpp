#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "distillfss/tensor.hpp"

namespace distillfss {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Backward callback: receives the output gradient and the node's parents,
// and accumulates into the parents that require grad.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<const NodePtr> parents)>;

struct Node {
    Tensor value;
    Tensor grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    BackwardFn backward;

    void accumulate(const Tensor& g);
    // Adds g scaled by `scale` without allocating a temporary.
    void accumulate_scaled(const Tensor& g, double scale);
    Tensor& grad_buffer();
};

// Handle to a value in the computation graph. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    static Var constant(Tensor value);
    static Var leaf(Tensor value, bool requires_grad);

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    void zero_grad() { node_->grad = Tensor(); }

    const Shape& shape() const { return node_->value.shape(); }
    int dim(int axis) const { return node_->value.dim(axis); }

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

// Disables graph recording on this thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// Builds an op result. Records the graph edge only when recording is on and
// some input requires grad; otherwise the result is a plain constant.
Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn fn);

// Reverse-mode sweep from a scalar (1-element) output.
void backward(const Var& output);

}  // namespace distillfss
