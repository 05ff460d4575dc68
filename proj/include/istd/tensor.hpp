#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "istd/error.hpp"

namespace istd {

enum class Precision { f32, f64 };

/// NCHW extent. Every tensor in the library is rank 4; vectors use (1, c, 1, 1) and scalars (1, 1, 1, 1).
struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    [[nodiscard]] std::size_t numel() const {
        return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
               static_cast<std::size_t>(w);
    }
    [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
    [[nodiscard]] std::string str() const;

    friend bool operator==(const Shape&, const Shape&) = default;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::string_view op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    /// Reads this->grad and accumulates into inputs[i]->grad_buffer() for inputs that require grad.
    std::function<void(Node&)> backward;

    std::span<T> grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
    [[nodiscard]] bool is_leaf() const { return inputs.empty() && !backward; }
};

/// Dense 4-D array with an optional reverse-mode tape.
///
/// Copies are shallow: two Tensor handles may refer to the same node, as with any
/// reference-counted autograd value. Values written by an op are never modified afterwards,
/// except for leaves (parameters) through mutable_data().
template <typename T>
class Tensor {
public:
    using value_type = T;
    using BackwardFn = std::function<void(Node<T>&)>;

    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, T value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<T> data, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    /// Builds the result of an operator. The tape entry is recorded only when some input requires
    /// grad; otherwise `backward` is dropped and the result is a constant.
    static Tensor from_op(const Shape& shape, std::vector<T> value, std::vector<Tensor> inputs,
                          std::string_view op, BackwardFn backward);

    [[nodiscard]] bool defined() const { return node_ != nullptr; }
    [[nodiscard]] const Shape& shape() const { return node_->shape; }
    [[nodiscard]] std::size_t numel() const { return node_->value.size(); }
    [[nodiscard]] std::span<const T> data() const { return node_->value; }
    /// Mutable access for leaves (parameters, inputs under finite-difference probing).
    [[nodiscard]] std::span<T> mutable_data();

    [[nodiscard]] T at(int n, int c, int h, int w) const;
    [[nodiscard]] T item() const;

    [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool flag);
    /// Gradient accumulated by backward(); all zeros when the tensor was never reached.
    [[nodiscard]] std::span<const T> grad() const;
    [[nodiscard]] std::span<T> mutable_grad();
    void zero_grad();

    /// Constant copy of the values, detached from any tape.
    [[nodiscard]] Tensor detach() const;
    [[nodiscard]] std::string_view op_name() const { return node_->op; }
    [[nodiscard]] const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
    std::shared_ptr<Node<T>> node_;
};

/// Reverse-mode sweep from a scalar. Leaves accumulate into their grad; the tape below `output`
/// is released afterwards.
template <typename T>
void backward(const Tensor<T>& output);

/// While alive, every op result is checked for NaN/Inf and a NumericError naming the op is thrown.
class ScopedFiniteCheck {
public:
    ScopedFiniteCheck();
    ~ScopedFiniteCheck();
    ScopedFiniteCheck(const ScopedFiniteCheck&) = delete;
    ScopedFiniteCheck& operator=(const ScopedFiniteCheck&) = delete;

private:
    bool previous_;
};

/// Negative control for gradient audits: while alive, the upstream gradient entering every node
/// produced by `op` is multiplied by `factor` during backward(). Forward values are untouched.
class ScopedGradientFault {
public:
    ScopedGradientFault(std::string op, double factor);
    ~ScopedGradientFault();
    ScopedGradientFault(const ScopedGradientFault&) = delete;
    ScopedGradientFault& operator=(const ScopedGradientFault&) = delete;
};

namespace detail {
bool finite_check_enabled();
}

}  // namespace istd
