#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "tape.hpp"
#include "tensor.hpp"

namespace timegci::nd {

// Adam with bias correction. Moment buffers are aligned index-for-index with
// the parameter list they were initialized from.
struct AdamState {
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<Tensor> m, v;

    static AdamState init(std::span<Tensor* const> params) {
        AdamState s;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const Tensor* p : params) {
            s.m.push_back(Tensor::zeros(p->shape()));
            s.v.push_back(Tensor::zeros(p->shape()));
        }
        return s;
    }
};

inline void adam_step(AdamState& state, std::span<Tensor* const> params,
                      std::span<const std::span<const double>> grads, double lr) {
    if (lr <= 0.0) throw std::invalid_argument("adam_step: lr must be positive");
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        Tensor& m = state.m[k];
        Tensor& v = state.v[k];
        std::span<const double> g = grads[k];
        if (g.size() != p.size()) throw std::invalid_argument("adam_step: gradient shape mismatch");
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (!std::isfinite(g[i])) throw std::runtime_error("adam_step: non-finite gradient");
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// target <- (1 - rate) * target + rate * online, elementwise.
inline void polyak_update(std::span<Tensor* const> target, std::span<Tensor* const> online,
                          double rate) {
    if (rate <= 0.0 || rate > 1.0) throw std::invalid_argument("polyak_update: rate must be in (0,1]");
    if (target.size() != online.size()) throw std::invalid_argument("polyak_update: list size mismatch");
    for (std::size_t k = 0; k < target.size(); ++k) {
        Tensor& t = *target[k];
        const Tensor& o = *online[k];
        if (!t.same_shape(o)) throw std::invalid_argument("polyak_update: shape mismatch");
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = (1.0 - rate) * t[i] + rate * o[i];
    }
}

// Reads leaf gradients off a tape (post-backward) and applies one Adam step.
inline void apply_adam(const Tape& tape, std::span<const NodeId> leaves,
                       std::span<Tensor* const> params, AdamState& state, double lr) {
    if (leaves.size() != params.size())
        throw std::invalid_argument("apply_adam: leaf/parameter count mismatch");
    std::vector<std::span<const double>> grads;
    grads.reserve(leaves.size());
    for (NodeId id : leaves) grads.push_back(tape.grad(id));
    adam_step(state, params, grads, lr);
}

}  // namespace timegci::nd
