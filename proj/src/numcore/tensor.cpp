#include "stella/numcore/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace stella::nc {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel_of(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

std::vector<double>& detail::Node::grad_buffer() {
    if (grad.empty()) {
        grad.assign(data.size(), 0.0);
    }
    return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = numel_of(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto e : shape) {
        if (e == 0) {
            throw ShapeError("tensor extents must be positive: " + shape_str(shape));
        }
    }
    if (numel_of(shape) != values.size()) {
        throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
    if (!node_) {
        throw std::logic_error("undefined tensor");
    }
    return node_->shape;
}

std::size_t Tensor::dim(int axis) const {
    const auto& s = shape();
    int r = static_cast<int>(s.size());
    int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
    }
    return s[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const& {
    if (!node_) {
        throw std::logic_error("undefined tensor");
    }
    return node_->data;
}

std::span<double> Tensor::mutable_data() {
    if (!node_) {
        throw std::logic_error("undefined tensor");
    }
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
    }
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) {
        throw ShapeError("index rank mismatch");
    }
    std::size_t off = 0;
    std::size_t i = 0;
    for (auto v : index) {
        if (v >= s[i]) {
            throw ShapeError("index out of range");
        }
        off = off * s[i] + v;
        ++i;
    }
    return node_->data[off];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    if (!node_) {
        throw std::logic_error("undefined tensor");
    }
    node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
    if (!node_) {
        return {};
    }
    if (node_->grad.empty()) {
        return std::vector<double>(node_->data.size(), 0.0);
    }
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() {
    if (node_) {
        node_->grad.clear();
    }
}

Tensor Tensor::detach() const {
    auto node = std::make_shared<detail::Node>();
    node->shape = shape();
    node->data = node_->data;
    return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
    Tensor t = detach();
    t.node_->requires_grad = requires_grad();
    return t;
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward requires a scalar loss");
    }
    // Iterative post-order DFS gives producers before consumers.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (auto* node : order) {
        if (!node->is_leaf()) {
            node->grad.clear();
        }
    }
    auto& g = loss.node()->grad_buffer();
    g[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (!node->is_leaf() && !node->grad.empty()) {
            node->backward_fn(*node);
        }
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace stella::nc
