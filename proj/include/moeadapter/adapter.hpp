// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

// Dense FFN adapter and sparse mixture-of-experts adapter.
//
//   dense:  y = LN(W2 silu(W1 LN(x)))
//   expert: E_i(x) = W2_i silu(W1_i LN(x))          (one LN shared by all experts)
//   router: G(x) = softmax(topk(x W_g))              (raw x, no normalization)
//   moe:    h = sum_{i in I} G(x)_i E_i(x) (+ shared experts), y = head(h)

#pragma once

#include <cmath>
#include <concepts>
#include <type_traits>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "moeadapter/adapter_config.hpp"
#include "moeadapter/random.hpp"
#include "moeadapter/tape.hpp"

namespace moeadapter {

struct Expert {
    LinearParams w1; // d -> expert_hidden
    LinearParams w2; // expert_hidden -> d

    friend bool operator==(const Expert&, const Expert&) = default;
};

struct DenseAdapter {
    AdapterConfig config;
    LayerNormParams ln_in;
    LinearParams w1;
    LinearParams w2;
    LayerNormParams ln_out;

    friend bool operator==(const DenseAdapter&, const DenseAdapter&) = default;
};

/// Post-aggregation head. Only the members of the configured variant are populated.
struct MoEHead {
    LinearParams proj;  // project_norm
    LayerNormParams ln; // both
    LinearParams w1;    // norm_mlp
    LinearParams w2;    // norm_mlp

    friend bool operator==(const MoEHead&, const MoEHead&) = default;
};

struct MoEAdapter {
    AdapterConfig config;
    LayerNormParams ln_in;
    LinearParams gate; // d -> n_experts, no bias
    std::vector<Expert> experts;
    std::vector<Expert> shared;
    MoEHead head;

    friend bool operator==(const MoEAdapter&, const MoEAdapter&) = default;
};

using Adapter = std::variant<DenseAdapter, MoEAdapter>;

inline const AdapterConfig& config_of(const Adapter& a) {
    return std::visit([](const auto& x) -> const AdapterConfig& { return x.config; }, a);
}

/// Per-token router output.
struct RoutingRecord {
    std::vector<double> logits;         // raw s = x W_g, length N
    std::vector<std::size_t> selected;  // retained experts, ascending, size k
    std::vector<double> gates;          // softmax over retained logits, zero elsewhere

    friend bool operator==(const RoutingRecord&, const RoutingRecord&) = default;
};

// ---------------------------------------------------------------------------
// Canonical parameter order.

namespace detail {

template <class Lin, class F>
void visit_linear(Lin& p, const std::string& name, F& f) {
    f(name + ".weight", p.weight);
    if (p.bias) f(name + ".bias", *p.bias);
}

template <class Ln, class F>
void visit_ln(Ln& p, const std::string& name, F& f) {
    f(name + ".gamma", p.gamma);
    f(name + ".beta", p.beta);
}

template <class Ex, class F>
void visit_expert(Ex& e, const std::string& name, F& f) {
    visit_linear(e.w1, name + ".w1", f);
    visit_linear(e.w2, name + ".w2", f);
}

} // namespace detail

/// Calls f(name, tensor) for every trainable tensor in canonical order.
/// Works for const and mutable adapters.
template <class A, class F>
    requires std::same_as<std::remove_const_t<A>, Adapter>
void for_each_param(A& adapter, F&& f) {
    std::visit(
        [&](auto& a) {
            using T = std::remove_cvref_t<decltype(a)>;
            if constexpr (std::is_same_v<T, DenseAdapter>) {
                detail::visit_ln(a.ln_in, "ln_in", f);
                detail::visit_linear(a.w1, "w1", f);
                detail::visit_linear(a.w2, "w2", f);
                detail::visit_ln(a.ln_out, "ln_out", f);
            } else {
                detail::visit_ln(a.ln_in, "ln_in", f);
                detail::visit_linear(a.gate, "gate", f);
                for (std::size_t i = 0; i < a.experts.size(); ++i) {
                    detail::visit_expert(a.experts[i], "experts." + std::to_string(i), f);
                }
                for (std::size_t i = 0; i < a.shared.size(); ++i) {
                    detail::visit_expert(a.shared[i], "shared." + std::to_string(i), f);
                }
                if (a.config.head == HeadVariant::project_norm) {
                    detail::visit_linear(a.head.proj, "head.proj", f);
                    detail::visit_ln(a.head.ln, "head.ln", f);
                } else {
                    detail::visit_ln(a.head.ln, "head.ln", f);
                    detail::visit_linear(a.head.w1, "head.w1", f);
                    detail::visit_linear(a.head.w2, "head.w2", f);
                }
            }
        },
        adapter);
}

struct NamedTensor {
    std::string name;
    const Tensor* tensor;
};

inline std::vector<NamedTensor> named_params(const Adapter& a) {
    std::vector<NamedTensor> out;
    for_each_param(a, [&](const std::string& name, const Tensor& t) { out.push_back({name, &t}); });
    return out;
}

inline std::vector<Tensor*> mutable_params(Adapter& a) {
    std::vector<Tensor*> out;
    for_each_param(a, [&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
}

inline std::size_t param_element_count(const Adapter& a) {
    std::size_t n = 0;
    for_each_param(a, [&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
}

// ---------------------------------------------------------------------------
// Initialization.

namespace detail {

inline LinearParams init_linear(Rng& rng, std::size_t out, std::size_t in, bool bias, double scale = 1.0) {
    // Kaiming-uniform fan-in bound
    const double bound = scale * std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    LinearParams p = LinearParams::zeros(out, in, bias);
    for (double& w : p.weight.values()) w = u(rng);
    return p;
}

inline Expert init_expert(Rng& rng, const AdapterConfig& c) {
    Expert e;
    e.w1 = init_linear(rng, c.expert_hidden, c.d, c.use_bias);
    e.w2 = init_linear(rng, c.d, c.expert_hidden, c.use_bias);
    return e;
}

} // namespace detail

/// Fresh adapter: LN gamma = 1, beta = 0; biases 0; weights Kaiming-uniform;
/// gate weights scaled by `gate_init_scale` so early routing is near-uniform.
inline Adapter init_params(const AdapterConfig& c, std::uint64_t seed) {
    c.validate();
    Rng rng = make_rng(seed, Stream::init);
    if (c.kind == AdapterKind::dense) {
        DenseAdapter a;
        a.config = c;
        a.ln_in = LayerNormParams::identity(c.d, c.ln_epsilon);
        a.w1 = detail::init_linear(rng, c.dense_hidden, c.d, c.use_bias);
        a.w2 = detail::init_linear(rng, c.out_dim, c.dense_hidden, c.use_bias);
        a.ln_out = LayerNormParams::identity(c.out_dim, c.ln_epsilon);
        return a;
    }
    MoEAdapter m;
    m.config = c;
    m.ln_in = LayerNormParams::identity(c.d, c.ln_epsilon);
    m.gate = detail::init_linear(rng, c.n_experts, c.d, false, c.gate_init_scale);
    for (std::size_t i = 0; i < c.n_experts; ++i) m.experts.push_back(detail::init_expert(rng, c));
    for (std::size_t i = 0; i < c.n_shared; ++i) m.shared.push_back(detail::init_expert(rng, c));
    if (c.head == HeadVariant::project_norm) {
        m.head.proj = detail::init_linear(rng, c.out_dim, c.d, c.use_bias);
        m.head.ln = LayerNormParams::identity(c.out_dim, c.ln_epsilon);
    } else {
        m.head.ln = LayerNormParams::identity(c.d, c.ln_epsilon);
        m.head.w1 = detail::init_linear(rng, c.agg_hidden, c.d, c.use_bias);
        m.head.w2 = detail::init_linear(rng, c.out_dim, c.agg_hidden, c.use_bias);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forward on a tape.

namespace detail {

inline Var bind_linear(GradTape& tape, ParamBinder& bind, Var x, const LinearParams& p) {
    return ad::linear(tape, x, bind(p.weight), p.bias ? std::optional<Var>(bind(*p.bias)) : std::nullopt);
}

inline Var bind_ln(GradTape& tape, ParamBinder& bind, Var x, const LayerNormParams& p) {
    return ad::layer_norm(tape, x, bind(p.gamma), bind(p.beta), p.epsilon);
}

/// W2 silu(W1 xn) on already-normalized rows.
inline Var expert_ffn(GradTape& tape, ParamBinder& bind, Var xn, const Expert& e) {
    Var hidden = ad::silu(tape, bind_linear(tape, bind, xn, e.w1));
    return bind_linear(tape, bind, hidden, e.w2);
}

inline void check_input(const Tensor& x, std::size_t d) {
    if (x.rank() != 2 || x.cols() != d) {
        throw ShapeError("adapter input shape " + shape_str(x.shape()) + " does not match [batch x " +
                         std::to_string(d) + "]");
    }
}

} // namespace detail

struct AdapterOutput {
    Var output;
    Var gates;  // [batch x N] post-top-k gates; invalid for dense adapters
    Var logits; // [batch x N] raw router logits; invalid for dense adapters
    std::vector<RoutingRecord> routing;
};

inline AdapterOutput forward(GradTape& tape, ParamBinder& bind, const DenseAdapter& a, Var x) {
    detail::check_input(tape.value(x), a.config.d);
    Var h = detail::bind_ln(tape, bind, x, a.ln_in);
    h = ad::silu(tape, detail::bind_linear(tape, bind, h, a.w1));
    h = detail::bind_linear(tape, bind, h, a.w2);
    return {detail::bind_ln(tape, bind, h, a.ln_out), Var{}, Var{}, {}};
}

/// Router on raw inputs: logits, top-k selection and gates.
inline AdapterOutput route_on_tape(GradTape& tape, ParamBinder& bind, const MoEAdapter& m, Var x) {
    const std::size_t k = m.config.top_k;
    Var logits = ad::linear(tape, x, bind(m.gate.weight));
    MaskedLogits masked = topk_mask(tape.value(logits), k);
    Var gates = ad::masked_softmax(tape, logits, masked.keep);

    const Tensor& s = tape.value(logits);
    const Tensor& g = tape.value(gates);
    const std::size_t n = s.cols();
    std::vector<RoutingRecord> routing(s.rows());
    for (std::size_t b = 0; b < s.rows(); ++b) {
        auto& rec = routing[b];
        rec.logits.assign(s.row(b).begin(), s.row(b).end());
        rec.gates.assign(g.row(b).begin(), g.row(b).end());
        rec.selected.reserve(k);
        for (std::size_t e = 0; e < n; ++e) {
            if (masked.keep[b * n + e]) rec.selected.push_back(e);
        }
    }
    return {Var{}, gates, logits, std::move(routing)};
}

/// Compute-sparse MoE forward: each expert runs only on the rows routed to it.
inline AdapterOutput forward(GradTape& tape, ParamBinder& bind, const MoEAdapter& m, Var x) {
    const AdapterConfig& c = m.config;
    detail::check_input(tape.value(x), c.d);
    const std::size_t batch = tape.value(x).rows();

    AdapterOutput out = route_on_tape(tape, bind, m, x);
    Var xn = detail::bind_ln(tape, bind, x, m.ln_in);

    std::vector<std::vector<std::size_t>> rows(c.n_experts);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t e : out.routing[b].selected) rows[e].push_back(b);
    }
    std::vector<ad::ExpertSlice> slices;
    for (std::size_t e = 0; e < c.n_experts; ++e) {
        if (rows[e].empty()) continue;
        Var xe = ad::gather_rows(tape, xn, rows[e]);
        Var ye = detail::expert_ffn(tape, bind, xe, m.experts[e]);
        slices.push_back({e, std::move(rows[e]), ye});
    }
    Var h = ad::combine_experts(tape, out.gates, std::move(slices), batch, c.d);
    for (const Expert& s : m.shared) h = ad::add(tape, h, detail::expert_ffn(tape, bind, xn, s));

    if (c.head == HeadVariant::project_norm) {
        Var y = detail::bind_linear(tape, bind, h, m.head.proj);
        out.output = detail::bind_ln(tape, bind, y, m.head.ln);
    } else {
        Var y = detail::bind_ln(tape, bind, h, m.head.ln);
        y = ad::silu(tape, detail::bind_linear(tape, bind, y, m.head.w1));
        out.output = detail::bind_linear(tape, bind, y, m.head.w2);
    }
    return out;
}

inline AdapterOutput forward(GradTape& tape, ParamBinder& bind, const Adapter& a, Var x) {
    return std::visit([&](const auto& impl) { return forward(tape, bind, impl, x); }, a);
}

// ---------------------------------------------------------------------------
// Pure evaluation.

inline Tensor dense_forward(const DenseAdapter& a, const Tensor& x) {
    GradTape tape;
    ParamBinder bind(tape, false);
    return tape.value(forward(tape, bind, a, tape.constant(x)).output);
}

struct MoEResult {
    Tensor output;
    std::vector<RoutingRecord> routing;
};

inline MoEResult moe_forward(const MoEAdapter& m, const Tensor& x) {
    GradTape tape;
    ParamBinder bind(tape, false);
    AdapterOutput out = forward(tape, bind, m, tape.constant(x));
    return {tape.value(out.output), std::move(out.routing)};
}

inline Tensor adapter_forward(const Adapter& a, const Tensor& x) {
    GradTape tape;
    ParamBinder bind(tape, false);
    return tape.value(forward(tape, bind, a, tape.constant(x)).output);
}

/// E_i(x) = W2_i silu(W1_i LN(x)) using the adapter's shared pre-expert LN.
inline Tensor expert_forward(const MoEAdapter& m, std::size_t i, const Tensor& x) {
    if (i >= m.experts.size()) throw ConfigError("expert index " + std::to_string(i) + " out of range");
    detail::check_input(x, m.config.d);
    GradTape tape;
    ParamBinder bind(tape, false);
    Var xn = detail::bind_ln(tape, bind, tape.constant(x), m.ln_in);
    return tape.value(detail::expert_ffn(tape, bind, xn, m.experts[i]));
}

/// Router G(x) = softmax(topk(x W_g)) on raw inputs.
inline std::vector<RoutingRecord> route(const LinearParams& gate, const Tensor& x, std::size_t k) {
    gate.validate();
    if (k < 1 || k > gate.out_dim()) {
        throw ConfigError("top_k must be in [1, " + std::to_string(gate.out_dim()) + "], got " + std::to_string(k));
    }
    MoEAdapter m;
    m.config.d = gate.in_dim();
    m.config.n_experts = gate.out_dim();
    m.config.top_k = k;
    m.gate = gate;
    detail::check_input(x, m.config.d);
    GradTape tape;
    ParamBinder bind(tape, false);
    return route_on_tape(tape, bind, m, tape.constant(x)).routing;
}

} // namespace moeadapter
