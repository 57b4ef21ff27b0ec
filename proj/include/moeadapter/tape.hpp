// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "moeadapter/kernels.hpp"

namespace moeadapter {

/// Handle to a value recorded on a GradTape.
struct Var {
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t id = npos;

    [[nodiscard]] bool valid() const noexcept { return id != npos; }
    friend bool operator==(Var, Var) = default;
};

/// Reverse-mode recording of primitive applications.
///
/// Values are immutable once recorded, so backward closures read their saved
/// inputs straight from the tape. `backward` visits nodes in exact reverse
/// recording order; nodes whose output never received gradient are skipped,
/// which keeps gradients of unused parameters at exactly zero.
class GradTape {
public:
    using Backward = std::function<void(GradTape&, Var self, const Tensor& grad_out)>;

    Var constant(Tensor value) { return push(std::move(value), false); }
    Var leaf(Tensor value) { return push(std::move(value), true); }

    Var record(Tensor value, const std::vector<Var>& inputs, Backward fn) {
        bool needs_grad = false;
        for (Var in : inputs) needs_grad = needs_grad || requires_grad(in);
        Var out = push(std::move(value), needs_grad);
        if (needs_grad) nodes_.push_back({out, std::move(fn)});
        return out;
    }

    [[nodiscard]] const Tensor& value(Var v) const { return slots_.at(v.id).value; }
    [[nodiscard]] bool requires_grad(Var v) const { return slots_.at(v.id).requires_grad; }
    [[nodiscard]] bool has_grad(Var v) const { return !slots_.at(v.id).grad.empty(); }
    [[nodiscard]] double scalar(Var v) const { return value(v)[0]; }

    /// Gradient of the last backward root w.r.t. `v`; zeros if none flowed.
    [[nodiscard]] Tensor grad(Var v) const {
        const Slot& s = slots_.at(v.id);
        return s.grad.empty() ? Tensor(s.value.shape()) : s.grad;
    }

    void accumulate(Var v, const Tensor& g) {
        Slot& s = slots_.at(v.id);
        if (!s.requires_grad) return;
        if (s.grad.empty()) {
            s.grad = g;
            return;
        }
        for (std::size_t i = 0; i < g.size(); ++i) s.grad[i] += g[i];
    }

    void accumulate(Var v, Tensor&& g) {
        Slot& s = slots_.at(v.id);
        if (!s.requires_grad) return;
        if (s.grad.empty()) {
            s.grad = std::move(g);
            return;
        }
        for (std::size_t i = 0; i < g.size(); ++i) s.grad[i] += g[i];
    }

    void backward(Var root) {
        const Tensor& r = value(root);
        if (r.size() != 1) throw ShapeError("backward root must be a scalar, got " + shape_str(r.shape()));
        if (!requires_grad(root)) return;
        slots_[root.id].grad = Tensor(r.shape(), 1.0);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            const Slot& s = slots_[it->output.id];
            if (s.grad.empty()) continue;
            it->fn(*this, it->output, s.grad);
        }
    }

    void zero_grad() {
        for (Slot& s : slots_) s.grad = Tensor{};
    }

    [[nodiscard]] std::size_t size() const noexcept { return slots_.size(); }
    [[nodiscard]] std::size_t node_count() const noexcept { return nodes_.size(); }

private:
    struct Slot {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
    };
    struct Node {
        Var output;
        Backward fn;
    };

    Var push(Tensor value, bool requires_grad) {
        slots_.push_back({std::move(value), Tensor{}, requires_grad});
        return Var{slots_.size() - 1};
    }

    std::vector<Slot> slots_;
    std::vector<Node> nodes_;
};

/// Binds parameter tensors to tape leaves, once per tensor.
///
/// A frozen binder records constants instead, so the same forward code serves
/// both training and pure evaluation.
class ParamBinder {
public:
    explicit ParamBinder(GradTape& tape, bool trainable = true) : tape_(&tape), trainable_(trainable) {}

    Var operator()(const Tensor& param) {
        auto it = bound_.find(&param);
        if (it != bound_.end()) return it->second;
        Var v = trainable_ ? tape_->leaf(param) : tape_->constant(param);
        bound_.emplace(&param, v);
        return v;
    }

    [[nodiscard]] Tensor grad(const Tensor& param) const {
        auto it = bound_.find(&param);
        return it == bound_.end() ? Tensor(param.shape()) : tape_->grad(it->second);
    }

    [[nodiscard]] GradTape& tape() noexcept { return *tape_; }

private:
    GradTape* tape_;
    bool trainable_;
    std::unordered_map<const Tensor*, Var> bound_;
};

/// Differentiable primitives recorded on a GradTape.
namespace ad {

inline Var linear(GradTape& tape, Var x, Var weight, std::optional<Var> bias = std::nullopt) {
    const Tensor* b = bias ? &tape.value(*bias) : nullptr;
    Tensor y = moeadapter::linear(tape.value(x), tape.value(weight), b);
    std::vector<Var> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return tape.record(std::move(y), inputs, [x, weight, bias](GradTape& t, Var, const Tensor& g) {
        auto grads = linear_backward(t.value(x), t.value(weight), bias.has_value(), g, t.requires_grad(x));
        t.accumulate(weight, std::move(grads.weight));
        if (bias) t.accumulate(*bias, std::move(*grads.bias));
        if (t.requires_grad(x)) t.accumulate(x, std::move(grads.input));
    });
}

inline Var layer_norm(GradTape& tape, Var x, Var gamma, Var beta, double epsilon) {
    Tensor y = moeadapter::layer_norm(tape.value(x), tape.value(gamma), tape.value(beta), epsilon);
    return tape.record(std::move(y), {x, gamma, beta}, [x, gamma, beta, epsilon](GradTape& t, Var, const Tensor& g) {
        auto grads = layer_norm_backward(t.value(x), t.value(gamma), epsilon, g);
        t.accumulate(gamma, std::move(grads.gamma));
        t.accumulate(beta, std::move(grads.beta));
        t.accumulate(x, std::move(grads.input));
    });
}

inline Var silu(GradTape& tape, Var x) {
    Tensor y = moeadapter::silu(tape.value(x));
    return tape.record(std::move(y), {x}, [x](GradTape& t, Var, const Tensor& g) {
        t.accumulate(x, silu_backward(t.value(x), g));
    });
}

/// Softmax over kept entries; masked entries are exact zeros. The mask itself
/// is treated as locally constant.
inline Var masked_softmax(GradTape& tape, Var logits, std::vector<std::uint8_t> keep) {
    Tensor p = softmax(MaskedLogits{tape.value(logits), std::move(keep)});
    return tape.record(std::move(p), {logits}, [logits](GradTape& t, Var self, const Tensor& g) {
        t.accumulate(logits, softmax_backward(t.value(self), g));
    });
}

inline Var gather_rows(GradTape& tape, Var x, std::vector<std::size_t> rows) {
    const Tensor& src = tape.value(x);
    const std::size_t n = src.cols();
    Tensor out({rows.size(), n});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(src.data() + rows[i] * n, n, out.data() + i * n);
    }
    return tape.record(std::move(out), {x}, [x, rows = std::move(rows)](GradTape& t, Var, const Tensor& g) {
        const std::size_t n = g.cols();
        Tensor dx(t.value(x).shape());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            double* d = dx.data() + rows[i] * n;
            const double* gi = g.data() + i * n;
            for (std::size_t c = 0; c < n; ++c) d[c] += gi[c];
        }
        t.accumulate(x, std::move(dx));
    });
}

/// Output of one expert evaluated on a subset of batch rows.
struct ExpertSlice {
    std::size_t expert;
    std::vector<std::size_t> rows;
    Var output;
};

/// h[b] = sum over slices e containing b of gates[b, e] * out_e[b].
/// Slices are accumulated in the order given.
inline Var combine_experts(GradTape& tape, Var gates, std::vector<ExpertSlice> slices, std::size_t batch,
                           std::size_t width) {
    const Tensor& gv = tape.value(gates);
    Tensor h({batch, width});
    std::vector<Var> inputs{gates};
    for (const auto& s : slices) {
        const Tensor& out = tape.value(s.output);
        if (out.cols() != width || out.rows() != s.rows.size()) {
            throw ShapeError("combine_experts: expert output " + shape_str(out.shape()) + " vs rows " +
                             std::to_string(s.rows.size()) + " x " + std::to_string(width));
        }
        for (std::size_t i = 0; i < s.rows.size(); ++i) {
            const double w = gv.at(s.rows[i], s.expert);
            double* hr = h.data() + s.rows[i] * width;
            const double* o = out.data() + i * width;
            for (std::size_t c = 0; c < width; ++c) hr[c] += w * o[c];
        }
        inputs.push_back(s.output);
    }
    return tape.record(std::move(h), inputs, [gates, slices = std::move(slices)](GradTape& t, Var, const Tensor& g) {
        const Tensor& gv = t.value(gates);
        const std::size_t width = g.cols();
        Tensor dgates(gv.shape());
        for (const auto& s : slices) {
            const Tensor& out = t.value(s.output);
            Tensor dout(out.shape());
            for (std::size_t i = 0; i < s.rows.size(); ++i) {
                const double w = gv.at(s.rows[i], s.expert);
                const double* gr = g.data() + s.rows[i] * width;
                const double* o = out.data() + i * width;
                double* d = dout.data() + i * width;
                double dot = 0.0;
                for (std::size_t c = 0; c < width; ++c) {
                    d[c] = w * gr[c];
                    dot += gr[c] * o[c];
                }
                dgates.at(s.rows[i], s.expert) += dot;
            }
            t.accumulate(s.output, std::move(dout));
        }
        t.accumulate(gates, std::move(dgates));
    });
}

inline Var add(GradTape& tape, Var a, Var b) {
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    if (av.shape() != bv.shape()) throw ShapeError("add: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor y = av;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    return tape.record(std::move(y), {a, b}, [a, b](GradTape& t, Var, const Tensor& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

/// ca * a + cb * b for same-shaped operands.
inline Var axpby(GradTape& tape, double ca, Var a, double cb, Var b) {
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    if (av.shape() != bv.shape()) throw ShapeError("axpby: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = ca * av[i] + cb * bv[i];
    return tape.record(std::move(y), {a, b}, [a, b, ca, cb](GradTape& t, Var, const Tensor& g) {
        Tensor ga(g.shape()), gb(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] = ca * g[i];
            gb[i] = cb * g[i];
        }
        t.accumulate(a, std::move(ga));
        t.accumulate(b, std::move(gb));
    });
}

inline Var sum(GradTape& tape, Var x) {
    double s = 0.0;
    for (double v : tape.value(x).values()) s += v;
    return tape.record(Tensor({1}, s), {x}, [x](GradTape& t, Var, const Tensor& g) {
        t.accumulate(x, Tensor(t.value(x).shape(), g[0]));
    });
}

/// Scalar <x, w> against a constant tensor of the same size.
inline Var dot_const(GradTape& tape, Var x, Tensor w) {
    const Tensor& xv = tape.value(x);
    if (xv.size() != w.size()) throw ShapeError("dot_const: " + shape_str(xv.shape()) + " vs " + shape_str(w.shape()));
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += xv[i] * w[i];
    return tape.record(Tensor({1}, s), {x}, [x, w = std::move(w)](GradTape& t, Var, const Tensor& g) {
        Tensor d(t.value(x).shape());
        for (std::size_t i = 0; i < w.size(); ++i) d[i] = g[0] * w[i];
        t.accumulate(x, std::move(d));
    });
}

/// Mean softmax cross-entropy of rows of `logits` against class indices.
inline Var cross_entropy(GradTape& tape, Var logits, std::vector<std::size_t> targets) {
    const Tensor& z = tape.value(logits);
    const std::size_t rows = z.rows();
    const std::size_t classes = z.cols();
    if (targets.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(z.shape()));
    }
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] >= classes) {
            throw ConfigError("cross_entropy: target " + std::to_string(targets[r]) + " out of range [0, " +
                              std::to_string(classes) + ")");
        }
        auto zr = z.row(r);
        const double mx = *std::max_element(zr.begin(), zr.end());
        double s = 0.0;
        for (double v : zr) s += std::exp(v - mx);
        total += mx + std::log(s) - zr[targets[r]];
    }
    const double loss = total / static_cast<double>(rows);
    if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
    return tape.record(Tensor({1}, loss), {logits}, [logits, targets = std::move(targets)](GradTape& t, Var, const Tensor& g) {
        const Tensor& z = t.value(logits);
        Tensor p = softmax(z);
        const double scale = g[0] / static_cast<double>(z.rows());
        for (std::size_t r = 0; r < z.rows(); ++r) {
            auto pr = p.row(r);
            pr[targets[r]] -= 1.0;
            for (double& v : pr) v *= scale;
        }
        t.accumulate(logits, std::move(p));
    });
}

/// sum_e weights[e] * mean_b probs[b, e]
inline Var weighted_column_mean(GradTape& tape, Var probs, std::vector<double> weights) {
    const Tensor& p = tape.value(probs);
    if (weights.size() != p.cols()) throw ShapeError("weighted_column_mean: weight count vs " + shape_str(p.shape()));
    const auto rows = static_cast<double>(p.rows());
    double s = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) {
        double col = 0.0;
        for (std::size_t r = 0; r < p.rows(); ++r) col += p.at(r, c);
        s += weights[c] * (col / rows);
    }
    return tape.record(Tensor({1}, s), {probs}, [probs, weights = std::move(weights)](GradTape& t, Var, const Tensor& g) {
        const Tensor& p = t.value(probs);
        Tensor d(p.shape());
        const double scale = g[0] / static_cast<double>(p.rows());
        for (std::size_t r = 0; r < p.rows(); ++r) {
            for (std::size_t c = 0; c < p.cols(); ++c) d.at(r, c) = scale * weights[c];
        }
        t.accumulate(probs, std::move(d));
    });
}

} // namespace ad
} // namespace moeadapter
