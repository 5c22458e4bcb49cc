#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stella::nc {

using Shape = std::vector<std::size_t>;

/// Raised when a forward op produces a non-finite value or receives one.
class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Raised on rank/extent/axis violations.
class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major float64 array participating in a define-by-run tape.
///
/// A Tensor is a cheap handle; copies alias the same storage. The graph is
/// implicit: each op result keeps its inputs alive and a backward rule, and
/// backward() walks the DAG reachable from the loss.
class Tensor {
   public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(int axis) const;
    std::size_t numel() const;

    std::span<const double> data() const&;
    // Spans into a temporary would dangle.
    std::span<const double> data() const&& = delete;
    /// Mutable view for leaves (parameters, inputs). Never call on op results
    /// that have already been consumed by a backward pass.
    std::span<double> mutable_data();
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    /// Gradient; zeros if nothing was accumulated (disconnected leaf).
    std::vector<double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    /// Same values, no tape history.
    Tensor detach() const;
    Tensor clone() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

   private:
    std::shared_ptr<detail::Node> node_;
};

/// Accumulates dLoss/dLeaf into every requires_grad tensor reachable from
/// `loss`. Intermediate grads are reset first so repeated calls accumulate
/// only on leaves.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

}  // namespace stella::nc
