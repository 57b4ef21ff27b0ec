// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "moeadapter/tape.hpp"

namespace moeadapter {

/// Scalar objective over a list of parameter tensors. When `grads` is non-null
/// the objective also writes its analytic gradient, one tensor per parameter.
using DifferentiableFn = std::function<double(const std::vector<Tensor>& params, std::vector<Tensor>* grads)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_tensor = 0;
    std::size_t worst_element = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t checked = 0;
};

/// Compares the analytic gradient of `f` to central finite differences
/// (f(p + eps e) - f(p - eps e)) / 2 eps, element by element.
///
/// Relative error is |a - n| / (max(|a|, |n|) + 1e-8).
inline GradCheckReport grad_check(const DifferentiableFn& f, std::vector<Tensor> params, double eps = 1e-5) {
    if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be > 0");
    std::vector<Tensor> analytic;
    const double f0 = f(params, &analytic);
    if (!std::isfinite(f0)) throw NumericError("grad_check: objective is not finite");
    if (analytic.size() != params.size()) throw ShapeError("grad_check: objective returned wrong gradient count");

    GradCheckReport report;
    for (std::size_t t = 0; t < params.size(); ++t) {
        for (std::size_t i = 0; i < params[t].size(); ++i) {
            const double saved = params[t][i];
            params[t][i] = saved + eps;
            const double up = f(params, nullptr);
            params[t][i] = saved - eps;
            const double down = f(params, nullptr);
            params[t][i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("grad_check: objective is not finite");
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[t][i];
            const double rel = std::abs(a - numeric) / (std::max(std::abs(a), std::abs(numeric)) + 1e-8);
            ++report.checked;
            if (rel > report.max_rel_error || report.checked == 1) {
                report.max_rel_error = rel;
                report.worst_tensor = t;
                report.worst_element = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    return report;
}

/// Wraps a tape-building function as a DifferentiableFn. `build` receives one
/// Var per parameter and returns the scalar root.
template <class Build>
DifferentiableFn tape_objective(Build build) {
    return [build](const std::vector<Tensor>& params, std::vector<Tensor>* grads) {
        GradTape tape;
        std::vector<Var> vars;
        vars.reserve(params.size());
        for (const auto& p : params) vars.push_back(grads ? tape.leaf(p) : tape.constant(p));
        Var root = build(tape, vars);
        const double value = tape.scalar(root);
        if (grads) {
            tape.backward(root);
            grads->clear();
            for (Var v : vars) grads->push_back(tape.grad(v));
        }
        return value;
    };
}

} // namespace moeadapter
