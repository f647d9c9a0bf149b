#include "distillfss/autograd.hpp"

#include <stdexcept>
#include <unordered_set>

namespace distillfss {

namespace {
thread_local bool t_grad_enabled = true;
}

Tensor& Node::grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
}

void Node::accumulate(const Tensor& g) { accumulate_scaled(g, 1.0); }

void Node::accumulate_scaled(const Tensor& g, double scale) {
    if (g.size() != value.size()) {
        throw std::logic_error("gradient size " + shape_str(g.shape()) + " does not match value " +
                               shape_str(value.shape()));
    }
    Tensor& dst = grad_buffer();
    double* d = dst.data();
    const double* s = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) d[i] += scale * s[i];
}

Var Var::constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var Var::leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (!t_grad_enabled) return Var(std::move(n));
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return Var(std::move(n));
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(in.node());
    n->backward = std::move(fn);
    return Var(std::move(n));
}

void backward(const Var& output) {
    if (!output.defined() || output.value().size() != 1) {
        throw std::invalid_argument("backward() needs a scalar output");
    }
    if (!output.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(output.node().get(), 0);
    seen.insert(output.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !p->parents.empty() && seen.insert(p).second) stack.emplace_back(p, 0);
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    output.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->grad.empty() || !n->backward) continue;
        n->backward(n->grad, n->parents);
        // Interior gradients are no longer needed once propagated.
        if (n != output.node().get()) n->grad = Tensor();
    }
}

}  // namespace distillfss
