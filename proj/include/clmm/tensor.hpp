#pragma once

// Dense row-major float64 tensors with a dynamically recorded reverse-mode
// graph. A Tensor is a shared handle; copies alias the same storage.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "clmm/error.hpp"

namespace clmm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream oss;
    oss << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) oss << (i ? "x" : "") << shape[i];
    oss << ']';
    return oss.str();
}

namespace detail {

struct TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

// One recorded primitive application. `backward` reads the output gradient
// and accumulates into the inputs it captured.
struct Node {
    std::vector<ImplPtr> inputs;
    std::function<void(const std::vector<double>& out_grad)> backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool consumed = false;  // graph rooted here was already back-propagated
    std::shared_ptr<Node> node;

    void accumulate(std::span<const double> g) {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    }
    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for its lifetime (used for the EMA model and eval).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        if (numel_of(shape) != values.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                                 std::to_string(numel_of(shape)) + " values, got " +
                                 std::to_string(values.size()));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const std::size_t n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }
    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor({}, {value}, requires_grad);
    }
    static Tensor vector(std::vector<double> values, bool requires_grad = false) {
        const std::size_t n = values.size();
        return Tensor({n}, std::move(values), requires_grad);
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad = false) {
        return Tensor({rows, cols}, std::move(values), requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> values() const { return impl_->data; }
    // Direct storage access bypasses the graph; meant for optimizers and init.
    std::span<double> mutable_values() { return impl_->data; }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return impl_->data[r * impl_->shape.back() + c]; }
    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }
    bool is_leaf() const { return impl_->node == nullptr; }

    // Fresh storage, no graph history.
    Tensor clone() const {
        Tensor t(impl_->shape, impl_->data, impl_->requires_grad);
        return t;
    }
    Tensor detach() const { return Tensor(impl_->shape, impl_->data, false); }

    // Populates grad on every requires_grad leaf reachable from this scalar.
    // The graph is released afterwards; calling backward again on the same
    // loss throws ContractError.
    void backward() const;

    detail::TensorImpl* raw() const { return impl_.get(); }
    const detail::ImplPtr& impl() const { return impl_; }
    static Tensor from_impl(detail::ImplPtr p) {
        Tensor t;
        t.impl_ = std::move(p);
        return t;
    }

private:
    detail::ImplPtr impl_;
};

namespace detail {

// Creates an op output and records it when any input needs gradients.
// `backward(out_grad)` must accumulate into the captured inputs.
inline Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                          std::function<void(const std::vector<double>&)> backward) {
    Tensor out(std::move(shape), std::move(values));
    for (double v : out.values()) {
        if (!std::isfinite(v)) throw ContractError("non-finite value produced by tensor op");
    }
    if (!grad_enabled()) return out;
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.requires_grad();
    if (!needs) return out;
    auto node = std::make_shared<Node>();
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(backward);
    out.raw()->node = std::move(node);
    out.raw()->requires_grad = true;
    return out;
}

// Accumulates into `t` only if it participates in differentiation.
inline void accum(const Tensor& t, std::span<const double> g) {
    if (t.requires_grad()) t.raw()->accumulate(g);
}

inline std::vector<double>* grad_sink(const Tensor& t) {
    return t.requires_grad() ? &t.raw()->grad_buffer() : nullptr;
}

} // namespace detail

inline void Tensor::backward() const {
    auto* root = impl_.get();
    if (root->consumed) throw ContractError("backward called twice on the same graph");
    if (numel() != 1) {
        throw ContractError("backward needs a scalar loss, got shape " + shape_str(shape()));
    }
    if (!root->requires_grad) throw ContractError("loss does not depend on any requires_grad tensor");

    // Iterative post-order DFS gives a topological order over interior nodes.
    // Owning handles keep interior nodes alive while the graph is released.
    std::vector<std::shared_ptr<detail::TensorImpl>> order;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<std::pair<std::shared_ptr<detail::TensorImpl>, std::size_t>> stack{{impl_, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        auto& [cur, next] = stack.back();
        if (cur->node && next < cur->node->inputs.size()) {
            auto child = cur->node->inputs[next++];
            if (child->node && seen.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
            continue;
        }
        order.push_back(cur);
        stack.pop_back();
    }

    root->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* cur = it->get();
        if (!cur->grad.empty()) cur->node->backward(cur->grad);
        // Interior gradients are transient; release them with the graph.
        if (cur != root) {
            cur->grad.clear();
            cur->grad.shrink_to_fit();
        }
        cur->node.reset();
    }
    root->consumed = true;
}

} // namespace clmm
