#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "usvid/tensor.hpp"

namespace usvid {

/// Named parameter tensors, ordered by name so iteration order is stable.
template <class S>
using ParamMap = std::map<std::string, Tensor<S>>;

/// One gradient tensor per trainable parameter, shapes identical to the parameters.
template <class S>
using Gradients = std::map<std::string, Tensor<S>>;

namespace detail {

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

template <class S>
struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Tensor<S>&)> backward;
    const char* op = "leaf";
    std::uint64_t id = next_node_id();
    bool requires_grad = false;

    Tensor<S>& grad_buffer() {
        if (grad.size() != value.size()) grad = Tensor<S>(value.shape());
        return grad;
    }
};

}  // namespace detail

/// Handle to a node of the reverse-mode graph. Copies share the node.
template <class S>
class Var {
public:
    using Node = detail::Node<S>;

    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var leaf(Tensor<S> value, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    const Tensor<S>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    const char* op() const { return node_->op; }

    /// Gradient accumulated by the last backward pass; zeros if none reached this node.
    Tensor<S> grad() const {
        if (node_->grad.size() == node_->value.size()) return node_->grad;
        return Tensor<S>(node_->value.shape());
    }

    Node& node() const { return *node_; }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node> node_;
};

template <class S>
using VarMap = std::map<std::string, Var<S>>;

/// Builds the result node of a differentiable op. The backward closure receives the
/// upstream gradient and must accumulate into the parents' grad buffers. It is
/// dropped when no parent requires a gradient.
template <class S, class Backward>
Var<S> make_op(const char* op, Tensor<S> value, std::vector<Var<S>> parents, Backward&& backward) {
    if (!value.all_finite())
        throw Error(std::string("non-finite value produced by op '") + op + "'");
    auto n = std::make_shared<detail::Node<S>>();
    n->value = std::move(value);
    n->op = op;
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node_ptr());
        n->backward = std::forward<Backward>(backward);
    }
    return Var<S>(std::move(n));
}

/// Runs reverse-mode accumulation from a scalar root.
template <class S>
void backward(const Var<S>& root) {
    if (root.size() != 1)
        throw Error("backward: loss must be a scalar, got shape " + shape_str(root.shape()));
    if (!root.requires_grad()) return;

    std::vector<detail::Node<S>*> order;
    std::unordered_set<detail::Node<S>*> seen;
    std::vector<detail::Node<S>*> stack{&root.node()};
    while (!stack.empty()) {
        auto* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad) stack.push_back(p.get());
    }
    // Node ids increase in creation order, so descending id is a valid reverse topological order.
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id > b->id; });

    root.node().grad_buffer().fill(S(1));
    for (auto* n : order) {
        if (!n->backward || n->grad.size() != n->value.size()) continue;
        n->backward(n->grad);
    }
}

/// Wraps every parameter in a leaf that records gradients.
template <class S>
VarMap<S> make_leaves(const ParamMap<S>& params, bool requires_grad) {
    VarMap<S> vars;
    for (const auto& [name, t] : params) vars.emplace(name, Var<S>::leaf(t, requires_grad));
    return vars;
}

/// Reverse-mode gradient of a scalar-valued loss with respect to every parameter.
/// `loss_fn` is called with a VarMap<S> and must return a scalar Var<S>.
template <class S, class LossFn>
Gradients<S> grad(LossFn&& loss_fn, const ParamMap<S>& params) {
    VarMap<S> vars = make_leaves(params, true);
    Var<S> loss = loss_fn(vars);
    if (loss.size() != 1)
        throw Error("grad: loss must be a scalar, got shape " + shape_str(loss.shape()));
    backward(loss);
    Gradients<S> out;
    for (const auto& [name, v] : vars) out.emplace(name, v.grad());
    return out;
}

/// Central-difference estimate (f(w+h e) - f(w-h e)) / 2h for every coordinate.
/// Usually instantiated with S = double as an oracle for single-precision gradients.
template <class S, class LossFn>
Gradients<S> finite_difference_grad(LossFn&& loss_fn, const ParamMap<S>& params, double h) {
    if (!(h > 0)) throw Error("finite_difference_grad: step size must be positive");
    ParamMap<S> work = params;
    auto eval = [&]() -> double {
        VarMap<S> vars = make_leaves(work, false);
        Var<S> loss = loss_fn(vars);
        if (loss.size() != 1)
            throw Error("finite_difference_grad: loss must be a scalar, got shape " +
                        shape_str(loss.shape()));
        return static_cast<double>(loss.value()[0]);
    };
    Gradients<S> out;
    for (auto& [name, t] : work) {
        Tensor<S> g(t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) {
            const S orig = t[i];
            t[i] = static_cast<S>(orig + h);
            const double fp = eval();
            t[i] = static_cast<S>(orig - h);
            const double fm = eval();
            t[i] = orig;
            g[i] = static_cast<S>((fp - fm) / (2.0 * h));
        }
        out.emplace(name, std::move(g));
    }
    return out;
}

struct GradCheckEntry {
    std::string name;
    bool pass = true;
    double max_abs_error = 0;
    double max_rel_error = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0;
    double worst_numeric = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    bool all_pass() const {
        return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass; });
    }
};

/// Compares two gradient sets coordinate-wise: a coordinate passes when
/// |a - n| <= atol + rtol * |n|. The worst coordinate is the one with the largest
/// violation ratio |a - n| / (atol + rtol * |n|).
template <class A, class N>
GradCheckReport check_gradients(const Gradients<A>& analytic, const Gradients<N>& numeric,
                                double rtol, double atol) {
    if (analytic.size() != numeric.size())
        throw Error("check_gradients: parameter sets differ in size");
    GradCheckReport report;
    for (const auto& [name, a] : analytic) {
        auto it = numeric.find(name);
        if (it == numeric.end()) throw Error("check_gradients: missing numeric gradient for " + name);
        const auto& n = it->second;
        if (a.shape() != n.shape())
            throw Error("check_gradients: shape mismatch for " + name + ": " + shape_str(a.shape()) +
                        " vs " + shape_str(n.shape()));
        GradCheckEntry e;
        e.name = name;
        double worst_ratio = -1;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double av = static_cast<double>(a[i]);
            const double nv = static_cast<double>(n[i]);
            const double err = std::abs(av - nv);
            const double ratio = err / (atol + rtol * std::abs(nv));
            e.max_abs_error = std::max(e.max_abs_error, err);
            if (std::abs(nv) > 0) e.max_rel_error = std::max(e.max_rel_error, err / std::abs(nv));
            else if (err > 0) e.max_rel_error = std::max(e.max_rel_error, err);
            if (ratio > 1.0) e.pass = false;
            if (ratio > worst_ratio) {
                worst_ratio = ratio;
                e.worst_index = i;
                e.worst_analytic = av;
                e.worst_numeric = nv;
            }
        }
        report.entries.push_back(std::move(e));
    }
    return report;
}

template <class T, class S>
ParamMap<T> cast_params(const ParamMap<S>& params) {
    ParamMap<T> out;
    for (const auto& [name, t] : params) out.emplace(name, t.template cast<T>());
    return out;
}

}  // namespace usvid
