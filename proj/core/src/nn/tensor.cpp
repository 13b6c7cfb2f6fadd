#include "vcdm/nn/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "vcdm/errors.hpp"

namespace vcdm::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw InvalidArgument("negative dimension in shape " + shape_string(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

std::span<double> Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

Var Var::constant(Shape shape, std::vector<double> values) {
    if (nn::numel(shape) != values.size()) {
        throw InvalidArgument("value count does not match shape " + shape_string(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Var(std::move(node));
}

Var Var::zeros(Shape shape) {
    std::vector<double> v(nn::numel(shape), 0.0);
    return constant(std::move(shape), std::move(v));
}

Var Var::parameter(Shape shape, std::vector<double> values) {
    Var v = constant(std::move(shape), std::move(values));
    v.node_->requires_grad = true;
    return v;
}

int Var::dim(int axis) const {
    const int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw InvalidArgument("axis out of range for shape " + shape_string(shape()));
    return node_->shape[static_cast<std::size_t>(axis)];
}

double Var::item() const {
    if (numel() != 1) throw InvalidArgument("item() on non-scalar of shape " + shape_string(shape()));
    return node_->value[0];
}

void Var::backward() const {
    if (numel() != 1) throw InvalidArgument("backward() requires a scalar output");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Shape shape, std::vector<double> value, std::vector<Var> parents, BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    if (g_grad_enabled) {
        bool any = false;
        for (const Var& p : parents) any = any || p.requires_grad();
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(parents.size());
            for (const Var& p : parents) node->parents.push_back(p.shared());
            node->backward = std::move(backward);
        }
    }
    return Var(std::move(node));
}

}  // namespace vcdm::nn
