// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moeadapter/tensor.hpp"

namespace moeadapter {

struct OptimConfig {
    double lr_peak = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t warmup_steps = 200;
    std::size_t stable_steps = 1400;
    std::size_t decay_steps = 400;
    double lr_min = 3e-4;
    std::size_t batch_size = 64;
    std::size_t total_steps = 2000;
    double clip_norm = 1.0; // global-norm clipping; 0 disables
    std::uint64_t seed = 0;

    void validate() const {
        if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optim.beta1 must be in [0, 1)");
        if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optim.beta2 must be in [0, 1)");
        if (!(eps > 0.0)) throw ConfigError("optim.eps must be > 0");
        if (!(lr_peak >= 0.0)) throw ConfigError("optim.lr_peak must be >= 0");
        if (!(lr_min >= 0.0 && lr_min <= lr_peak)) throw ConfigError("optim.lr_min must be in [0, lr_peak]");
        if (!(weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be >= 0");
        if (!(clip_norm >= 0.0)) throw ConfigError("optim.clip_norm must be >= 0");
        if (batch_size < 1) throw ConfigError("optim.batch_size must be >= 1");
    }

    /// Full-scale schedule constants (peak 1e-5, 20 warmup steps).
    static OptimConfig full_scale() {
        OptimConfig c;
        c.lr_peak = 1e-5;
        c.warmup_steps = 20;
        c.lr_min = 1e-6;
        return c;
    }

    friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

/// Warmup-Stable-Decay learning rate.
///   warmup: lr_peak * (step + 1) / warmup_steps
///   stable: lr_peak
///   decay:  linear from lr_peak, reaching lr_min on the last decay step
///   after:  lr_min
inline double wsd_lr(std::size_t step, const OptimConfig& c) {
    if (step < c.warmup_steps) {
        return c.lr_peak * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
    }
    step -= c.warmup_steps;
    if (step < c.stable_steps) return c.lr_peak;
    step -= c.stable_steps;
    if (step < c.decay_steps) {
        const double t = static_cast<double>(step + 1) / static_cast<double>(c.decay_steps);
        return (1.0 - t) * c.lr_peak + t * c.lr_min;
    }
    return c.lr_min;
}

struct AdamState {
    std::uint64_t step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    static AdamState zeros_like(std::span<Tensor* const> params) {
        AdamState s;
        for (const Tensor* p : params) {
            s.m.emplace_back(p->shape());
            s.v.emplace_back(p->shape());
        }
        return s;
    }

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

inline double global_norm(std::span<const Tensor> grads) {
    double s = 0.0;
    for (const auto& g : grads) {
        for (double v : g.values()) s += v * v;
    }
    return std::sqrt(s);
}

/// Scales grads so their global norm is at most `max_norm`. Returns the norm before clipping.
inline double clip_global_norm(std::span<Tensor> grads, double max_norm) {
    const double norm = global_norm(grads);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& g : grads) {
            for (double& v : g.values()) v *= scale;
        }
    }
    return norm;
}

/// One AdamW update with decoupled weight decay:
///   theta <- theta - lr * wd * theta          (only where decay[i] is set)
///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
/// Throws NumericError, leaving params and state untouched, if any gradient is
/// non-finite.
inline void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state, double lr,
                       const OptimConfig& c, std::span<const std::uint8_t> decay = {}) {
    if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ShapeError("adamw_step: parameter, gradient and state counts differ");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].shape() != params[i]->shape()) {
            throw ShapeError("adamw_step: gradient shape " + shape_str(grads[i].shape()) + " vs parameter " +
                             shape_str(params[i]->shape()));
        }
        if (!grads[i].all_finite()) {
            throw NumericError("adamw_step: non-finite gradient in parameter " + std::to_string(i));
        }
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        const Tensor& g = grads[i];
        const bool wd = decay.empty() || decay[i] != 0;
        for (std::size_t j = 0; j < p.size(); ++j) {
            if (wd && c.weight_decay != 0.0) p[j] -= lr * c.weight_decay * p[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
        }
    }
}

} // namespace moeadapter
