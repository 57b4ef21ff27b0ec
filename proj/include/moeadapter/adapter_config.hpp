// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "moeadapter/error.hpp"

namespace moeadapter {

enum class AdapterKind { dense, moe };

/// Output head of the MoE adapter.
///   project_norm: LN(W_P h), W_P maps d -> out_dim
///   norm_mlp:     MLP(LN(h)), d -> agg_hidden -> out_dim with SiLU
enum class HeadVariant { project_norm, norm_mlp };

inline std::string to_string(AdapterKind k) { return k == AdapterKind::dense ? "dense" : "moe"; }
inline std::string to_string(HeadVariant h) { return h == HeadVariant::project_norm ? "project-norm" : "norm-mlp"; }

inline AdapterKind parse_adapter_kind(std::string_view s) {
    if (s == "dense") return AdapterKind::dense;
    if (s == "moe") return AdapterKind::moe;
    throw ConfigError("adapter.kind must be \"dense\" or \"moe\", got \"" + std::string(s) + "\"");
}

inline HeadVariant parse_head_variant(std::string_view s) {
    if (s == "project-norm") return HeadVariant::project_norm;
    if (s == "norm-mlp") return HeadVariant::norm_mlp;
    throw ConfigError("adapter.head must be \"project-norm\" or \"norm-mlp\", got \"" + std::string(s) + "\"");
}

struct AdapterConfig {
    AdapterKind kind = AdapterKind::moe;
    std::size_t d = 32;            // input / expert width
    std::size_t out_dim = 32;      // projected (LLM embedding surrogate) width
    std::size_t dense_hidden = 260;
    std::size_t n_experts = 8;
    std::size_t top_k = 4;
    std::size_t expert_hidden = 16;
    std::size_t n_shared = 0;      // always-active experts, outside the routed set
    HeadVariant head = HeadVariant::norm_mlp;
    std::size_t agg_hidden = 128;
    bool use_bias = false;
    double ln_epsilon = 1e-5;
    double gate_init_scale = 0.01;

    void validate() const {
        auto positive = [](std::size_t v, const char* field) {
            if (v == 0) throw ConfigError(std::string("adapter.") + field + " must be positive");
        };
        positive(d, "d");
        positive(out_dim, "out_dim");
        if (!(ln_epsilon > 0.0)) throw ConfigError("adapter.ln_epsilon must be > 0");
        if (kind == AdapterKind::dense) {
            positive(dense_hidden, "dense_hidden");
            return;
        }
        positive(n_experts, "n_experts");
        positive(expert_hidden, "expert_hidden");
        if (top_k < 1 || top_k > n_experts) {
            throw ConfigError("adapter.top_k must be in [1, n_experts=" + std::to_string(n_experts) + "], got " +
                              std::to_string(top_k));
        }
        if (head == HeadVariant::norm_mlp) positive(agg_hidden, "agg_hidden");
        if (!(gate_init_scale >= 0.0)) throw ConfigError("adapter.gate_init_scale must be >= 0");
    }

    friend bool operator==(const AdapterConfig&, const AdapterConfig&) = default;
};

struct ParamCount {
    std::size_t total = 0;
    std::size_t active = 0;
    double ratio = 1.0;
};

/// Trainable element counts. `active` counts what one token touches: the
/// shared LN, gate, k routed experts, shared experts and the head.
inline ParamCount count_params(const AdapterConfig& c, bool include_layer_norm = true) {
    c.validate();
    const std::size_t b = c.use_bias ? 1 : 0;
    const std::size_t ln = include_layer_norm ? 1 : 0;
    auto lin = [b](std::size_t in, std::size_t out) { return in * out + b * out; };

    ParamCount pc;
    if (c.kind == AdapterKind::dense) {
        pc.total = ln * 2 * c.d + lin(c.d, c.dense_hidden) + lin(c.dense_hidden, c.out_dim) + ln * 2 * c.out_dim;
        pc.active = pc.total;
        pc.ratio = 1.0;
        return pc;
    }
    const std::size_t expert = lin(c.d, c.expert_hidden) + lin(c.expert_hidden, c.d);
    const std::size_t gate = c.d * c.n_experts;
    const std::size_t head = c.head == HeadVariant::project_norm
                                 ? lin(c.d, c.out_dim) + ln * 2 * c.out_dim
                                 : ln * 2 * c.d + lin(c.d, c.agg_hidden) + lin(c.agg_hidden, c.out_dim);
    const std::size_t fixed = ln * 2 * c.d + gate + head + c.n_shared * expert;
    pc.total = fixed + c.n_experts * expert;
    pc.active = fixed + c.top_k * expert;
    pc.ratio = static_cast<double>(pc.active) / static_cast<double>(pc.total);
    return pc;
}

/// Dense intermediate width whose total parameter count best matches `moe`.
inline std::size_t matched_dense_hidden(const AdapterConfig& moe) {
    AdapterConfig dense = moe;
    dense.kind = AdapterKind::dense;
    const std::size_t target = count_params(moe).total;
    std::size_t best = 1;
    std::size_t best_gap = static_cast<std::size_t>(-1);
    // total is affine in dense_hidden; solve then check the neighbours
    dense.dense_hidden = 1;
    const std::size_t base = count_params(dense).total;
    dense.dense_hidden = 2;
    const std::size_t slope = count_params(dense).total - base;
    const std::size_t guess = target > base ? 1 + (target - base) / slope : 1;
    for (std::size_t h = guess > 1 ? guess - 1 : 1; h <= guess + 1; ++h) {
        dense.dense_hidden = h;
        const std::size_t t = count_params(dense).total;
        const std::size_t gap = t > target ? t - target : target - t;
        if (gap < best_gap) {
            best_gap = gap;
            best = h;
        }
    }
    return best;
}

/// Desk-scale base configuration: the full-size layout with d = 32.
inline AdapterConfig desk_moe_config() { return AdapterConfig{}; }

/// Named configurations. Expert-layout presets vary expert count,
/// sparsity and expert width; "full-*" presets use the full
/// d = 2560 layout for parameter accounting.
inline AdapterConfig adapter_preset(std::string_view name) {
    AdapterConfig c = desk_moe_config();
    std::string_view n = name;
    if (n.starts_with("moe-")) n.remove_prefix(4);
    if (n == "8c4") return c;
    if (n == "16c4") {
        c.n_experts = 16;
        return c;
    }
    if (n == "8c1") {
        c.top_k = 1;
        return c;
    }
    if (n == "4c2") {
        c.n_experts = 4;
        c.top_k = 2;
        return c;
    }
    if (n == "8c4-halfdim") {
        c.expert_hidden /= 2;
        return c;
    }
    if (n == "8c4-doubledim") {
        c.expert_hidden *= 2;
        return c;
    }
    if (n == "dense-base" || n == "dense") {
        c.dense_hidden = matched_dense_hidden(c);
        c.kind = AdapterKind::dense;
        return c;
    }
    if (n == "full-moe") {
        c.d = 2560;
        c.out_dim = 2560;
        c.expert_hidden = 1280;
        c.agg_hidden = 10240;
        c.dense_hidden = 20480;
        return c;
    }
    if (n == "full-dense") {
        c = adapter_preset("full-moe");
        c.kind = AdapterKind::dense;
        return c;
    }
    throw ConfigError("adapter.preset: unknown preset \"" + std::string(name) + "\"");
}

inline std::vector<std::string> adapter_preset_names() {
    return {"dense-base", "moe-8c4", "moe-16c4", "moe-8c1", "moe-4c2", "moe-8c4-halfdim", "moe-8c4-doubledim",
            "full-dense", "full-moe"};
}

} // namespace moeadapter
