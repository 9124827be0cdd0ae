#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "msfs/tensor.hpp"

namespace msfs {

// Reverse-mode autodiff over Tensor values. Each op records a node holding
// its output, its inputs, and a closure that pushes the output gradient back
// into the inputs. Graphs are rebuilt per forward pass.

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    bool requires_grad = false;

    Tensor<T>& grad_buffer() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        return grad;
    }
    bool has_grad() const { return !grad.empty() && grad.shape() == value.shape(); }
    Node& parent(std::size_t i) { return *parents[i]; }
};

inline bool& grad_recording_flag() {
    thread_local bool on = true;
    return on;
}

inline bool grad_recording() { return grad_recording_flag(); }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : saved_(grad_recording_flag()) { grad_recording_flag() = false; }
    ~NoGradGuard() { grad_recording_flag() = saved_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var constant(Tensor<T> v) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(v);
        return Var(std::move(n));
    }

    static Var leaf(Tensor<T> v) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(v);
        n->requires_grad = true;
        return Var(std::move(n));
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    explicit operator bool() const noexcept { return defined(); }

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
    bool has_grad() const { return node_->has_grad(); }
    void zero_grad() {
        if (node_->has_grad()) node_->grad.fill(T(0));
    }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& ptr() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Wraps an op result. The backward closure is only kept when recording is on
/// and at least one input needs a gradient.
template <typename T, typename Fn>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, Fn&& backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    bool needs = false;
    if (grad_recording())
        for (const auto& v : inputs) needs = needs || v.requires_grad();
    if (needs) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto& v : inputs) n->parents.push_back(v.ptr());
        n->backward_fn = std::forward<Fn>(backward);
    }
    return Var<T>(std::move(n));
}

/// Accumulates d(root)/d(leaf) into every reachable leaf's grad. The recorded
/// graph is released afterwards so intermediate buffers are freed.
template <typename T>
void backward(const Var<T>& root) {
    if (!root.requires_grad()) return;
    if (root.value().size() != 1) throw InvalidInputError("backward: root must be a scalar");

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node<T>* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->has_grad()) {
            for (auto& p : n->parents)
                if (p->requires_grad) p->grad_buffer();
            n->backward_fn(*n);
        }
    }
    for (Node<T>* n : order) {
        if (n->backward_fn) {
            n->backward_fn = nullptr;
            n->parents.clear();
            n->grad = Tensor<T>();
        }
    }
}

} // namespace msfs
