#include "istd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <unordered_set>

namespace istd {

std::string Shape::str() const {
    std::ostringstream os;
    os << '(' << n << ", " << c << ", " << h << ", " << w << ')';
    return os.str();
}

namespace {

thread_local bool g_finite_check = false;

struct GradientFault {
    std::string op;
    double factor;
};
thread_local std::optional<GradientFault> g_fault;

}  // namespace

namespace detail {
bool finite_check_enabled() { return g_finite_check; }
}  // namespace detail

ScopedFiniteCheck::ScopedFiniteCheck() : previous_(g_finite_check) { g_finite_check = true; }
ScopedFiniteCheck::~ScopedFiniteCheck() { g_finite_check = previous_; }

ScopedGradientFault::ScopedGradientFault(std::string op, double factor) {
    g_fault = GradientFault{std::move(op), factor};
}
ScopedGradientFault::~ScopedGradientFault() { g_fault.reset(); }

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
    return from_data(shape, std::vector<T>(shape.numel(), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(const Shape& shape, std::vector<T> data, bool requires_grad) {
    if (shape.n <= 0 || shape.c <= 0 || shape.h <= 0 || shape.w <= 0) {
        throw ShapeError("tensor extents must be positive, got " + shape.str());
    }
    if (data.size() != shape.numel()) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape.str());
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = shape;
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from_data(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_op(const Shape& shape, std::vector<T> value, std::vector<Tensor> inputs,
                             std::string_view op, BackwardFn backward_fn) {
    if (g_finite_check) {
        for (const T v : value) {
            if (!std::isfinite(v)) throw NumericError("non-finite value produced by " + std::string(op));
        }
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = shape;
    node->value = std::move(value);
    node->op = op;
    const bool track = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (track) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(in.node_);
        node->backward = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
    return node_->value;
}

template <typename T>
T Tensor<T>::at(int n, int c, int h, int w) const {
    const Shape& s = node_->shape;
    return node_->value[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
    return node_->value[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
    node_->requires_grad = flag;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
    return node_->grad_buffer();
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
    return node_->grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return from_data(node_->shape, node_->value, false);
}

template <typename T>
void backward(const Tensor<T>& output) {
    if (!output.defined()) throw ValueError("backward on an undefined tensor");
    if (output.numel() != 1) throw ShapeError("backward requires a scalar output, got " + output.shape().str());
    if (!output.requires_grad()) return;

    // Iterative post-order DFS; reversed, it is a valid reverse-topological schedule.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    Node<T>* root = output.node().get();
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child->requires_grad && !child->is_leaf() && seen.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (!node->backward) continue;
        if (g_fault && node->op == g_fault->op) {
            for (T& g : node->grad_buffer()) g = static_cast<T>(g * g_fault->factor);
        }
        node->grad_buffer();
        for (auto& in : node->inputs) {
            if (in->requires_grad) in->grad_buffer();
        }
        node->backward(*node);
    }
    // Release only after the sweep: clearing inputs earlier could free nodes still scheduled.
    for (Node<T>* node : order) {
        node->backward = nullptr;
        node->inputs.clear();
    }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace istd
