#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "sammp/tensor.hpp"

namespace sammp {

// Named map of learnable tensors. Iteration order is lexicographic in the
// parameter path, which also fixes the checkpoint blob layout.
class ParameterSet {
public:
    Tensor& add(const std::string& name, Tensor t) {
        if (params_.count(name)) throw UsageError("parameter '" + name + "' already registered");
        t.set_requires_grad(true);
        auto [it, ok] = params_.emplace(name, std::move(t));
        (void)ok;
        return it->second;
    }

    Tensor& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw UsageError("unknown parameter '" + name + "'");
        return it->second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw UsageError("unknown parameter '" + name + "'");
        return it->second;
    }
    bool has(const std::string& name) const { return params_.count(name) != 0; }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    std::size_t size() const { return params_.size(); }
    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    // Flat snapshot/restore of all values, in iteration order.
    std::vector<double> snapshot() const {
        std::vector<double> out;
        out.reserve(total_elements());
        for (const auto& [name, t] : params_)
            out.insert(out.end(), t.data().begin(), t.data().end());
        return out;
    }
    void restore(const std::vector<double>& flat) {
        if (flat.size() != total_elements())
            throw UsageError("restore: size mismatch with parameter set");
        std::size_t off = 0;
        for (auto& [name, t] : params_) {
            std::copy(flat.begin() + off, flat.begin() + off + t.numel(),
                      t.mutable_data().begin());
            off += t.numel();
        }
    }

private:
    std::map<std::string, Tensor> params_;
};

struct AdamState {
    struct Slot {
        std::vector<double> m, v;
    };
    std::map<std::string, Slot> slots;
    long long step = 0;
};

// One Adam update with bias correction. Every parameter must carry a
// gradient buffer (zero_grad() then backward() provides one).
inline void adam_step(ParameterSet& params, AdamState& state, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
    long long t = ++state.step;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [name, p] : params) {
        if (!p.has_grad()) throw UsageError("adam_step: missing gradient for '" + name + "'");
        const std::vector<double>& g = p.grad();
        AdamState::Slot& slot = state.slots[name];
        if (slot.m.empty()) {
            slot.m.assign(p.numel(), 0.0);
            slot.v.assign(p.numel(), 0.0);
        } else if (slot.m.size() != p.numel()) {
            throw UsageError("adam_step: state shape mismatch for '" + name + "'");
        }
        std::vector<double>& val = p.mutable_data();
        for (std::size_t i = 0; i < val.size(); ++i) {
            slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
            slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
            double mhat = slot.m[i] / bc1;
            double vhat = slot.v[i] / bc2;
            val[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// Global L2 max-norm clip over all gradients; returns the pre-clip norm.
inline double clip_grad_norm(ParameterSet& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) throw UsageError("clip_grad_norm: missing gradient for '" + name + "'");
        for (double g : p.grad()) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        double s = max_norm / norm;
        for (auto& [name, p] : params)
            for (double& g : p.mutable_grad()) g *= s;
    }
    return norm;
}

}  // namespace sammp
