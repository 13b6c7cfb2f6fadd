#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vcdm::nn {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node;
using BackwardFn = std::function<void(Node& self)>;

// One vertex of the reverse-mode tape. Values are dense row-major doubles.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;

    // Zero-initialises grad on first use.
    std::span<double> grad_buffer();
};

// Handle to a tape node. Copies alias the same node.
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(Shape shape, std::vector<double> values);
    static Var zeros(Shape shape);
    static Var parameter(Shape shape, std::vector<double> values);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int axis) const;
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> value() const { return node_->value; }
    std::span<double> mutable_value() { return node_->value; }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }
    bool requires_grad() const { return node_->requires_grad; }
    double item() const;

    // Seeds d(self)/d(self) = 1 (self must be a scalar) and propagates.
    void backward() const;

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& shared() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

bool grad_enabled();

// Disables tape recording within its scope; used for sampling.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Builds an op result. Records the parents and backward closure only when
// grad mode is on and at least one parent requires grad.
Var make_result(Shape shape, std::vector<double> value, std::vector<Var> parents, BackwardFn backward);

}  // namespace vcdm::nn
