#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sammp/errors.hpp"

namespace sammp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;       // sized lazily during backward
    bool requires_grad = false;     // leaf marker
    bool needs_grad = false;        // on a differentiable path to some leaf
    bool backward_ran = false;      // set on the root after backward()
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;
};

inline std::vector<double>& grad_buf(TensorNode& n) {
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

}  // namespace detail

// When false, ops do not record parents or backward closures. Used for
// inference/evaluation where gradients are not needed.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense multi-dimensional array of doubles participating in reverse-mode
// differentiation. Handle semantics: copies share the underlying node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_data(std::move(shape), {}, 0.0);
    }

    static Tensor full(Shape shape, double v) {
        return from_data(std::move(shape), {}, v);
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }

    static Tensor from_data(Shape shape, std::vector<double> data, double fill = 0.0) {
        auto n = std::make_shared<detail::TensorNode>();
        std::size_t numel = shape_numel(shape);
        n->shape = std::move(shape);
        if (data.empty()) {
            n->value.assign(numel, fill);
        } else {
            if (data.size() != numel)
                throw ShapeError("tensor: data size " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(n->shape));
            n->value = std::move(data);
        }
        for (double v : n->value)
            if (!std::isfinite(v)) throw NumericError("tensor: non-finite value in construction");
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node()->shape; }
    std::size_t ndim() const { return node()->shape.size(); }
    std::size_t dim(std::size_t i) const { return node()->shape[i]; }
    std::size_t numel() const { return node()->value.size(); }

    const std::vector<double>& data() const { return node()->value; }

    // Direct mutation is only sound for leaves that are not yet part of a
    // recorded graph (initialization, optimizer updates).
    std::vector<double>& mutable_data() { return node()->value; }

    double item() const {
        if (numel() != 1)
            throw UsageError("item: tensor has " + std::to_string(numel()) + " elements");
        return node()->value[0];
    }

    double at(std::initializer_list<std::size_t> idx) const {
        return node()->value[flat_index(idx)];
    }

    Tensor& set_requires_grad(bool v = true) {
        node()->requires_grad = v;
        node()->needs_grad = v;
        return *this;
    }
    bool requires_grad() const { return node()->requires_grad; }

    bool has_grad() const { return defined() && !node_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw UsageError("grad: no gradient recorded for this tensor");
        return node()->grad;
    }
    std::vector<double>& mutable_grad() {
        if (!has_grad()) throw UsageError("grad: no gradient recorded for this tensor");
        return node()->grad;
    }
    void zero_grad() { node()->grad.assign(node()->value.size(), 0.0); }
    void clear_grad() { node()->grad.clear(); }

    // Populates grad for every requires_grad leaf reachable from this scalar.
    // A second call on the same root is an error.
    void backward() const;

    std::shared_ptr<detail::TensorNode> node_ptr() const { return node_; }
    detail::TensorNode* raw() const { return node_.get(); }

private:
    detail::TensorNode* node() const {
        if (!node_) throw UsageError("tensor: use of empty tensor");
        return node_.get();
    }

    std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
        const Shape& s = shape();
        if (idx.size() != s.size()) throw UsageError("at: rank mismatch");
        std::size_t flat = 0, d = 0;
        for (std::size_t i : idx) {
            flat = flat * s[d] + i;
            ++d;
        }
        return flat;
    }

    std::shared_ptr<detail::TensorNode> node_;

    friend Tensor make_op(const char* name, Shape shape, std::vector<double> value,
                          const std::vector<Tensor>& inputs,
                          std::function<void(detail::TensorNode&)> backward_fn);
};

// All ops funnel through here: finiteness check, tape registration.
inline Tensor make_op(const char* name, Shape shape, std::vector<double> value,
                      const std::vector<Tensor>& inputs,
                      std::function<void(detail::TensorNode&)> backward_fn) {
    for (double v : value)
        if (!std::isfinite(v))
            throw NumericError(std::string("op '") + name + "': non-finite value in output");
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = name;
    if (grad_mode()) {
        bool needs = false;
        for (const Tensor& t : inputs) needs = needs || t.node_->needs_grad;
        if (needs) {
            n->needs_grad = true;
            n->parents.reserve(inputs.size());
            for (const Tensor& t : inputs) n->parents.push_back(t.node_);
            n->backward_fn = std::move(backward_fn);
        }
    }
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

inline void Tensor::backward() const {
    detail::TensorNode* root = node();
    if (root->value.size() != 1)
        throw UsageError("backward: loss must be scalar, got shape " + shape_str(root->shape));
    if (root->backward_ran)
        throw UsageError("backward: already called on this graph; reset grads and rebuild");
    root->backward_ran = true;
    if (!root->needs_grad) return;  // nothing reachable requires grad

    // Iterative post-order over the needs_grad subgraph.
    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> done, open;
    struct Frame {
        detail::TensorNode* n;
        std::size_t next;
    };
    std::vector<Frame> stack{{root, 0}};
    open.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            detail::TensorNode* p = f.n->parents[f.next++].get();
            if (p->needs_grad && !done.count(p) && !open.count(p)) {
                open.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            done.insert(f.n);
            order.push_back(f.n);
            open.erase(f.n);
            stack.pop_back();
        }
    }

    detail::grad_buf(*root)[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorNode* n = *it;
        if (!n->backward_fn) continue;
        for (double g : detail::grad_buf(*n))
            if (!std::isfinite(g))
                throw NumericError(std::string("backward: non-finite gradient at op '") + n->op + "'");
        n->backward_fn(*n);
    }
}

}  // namespace sammp
