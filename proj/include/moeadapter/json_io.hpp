// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

// JSON (de)serialization of configuration structs. Readers reject unknown
// keys and wrong types with a ConfigError naming "section.field".

#pragma once

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "moeadapter/adapter_config.hpp"
#include "moeadapter/conflict_lab.hpp"
#include "moeadapter/objectives.hpp"
#include "moeadapter/optim.hpp"

namespace moeadapter {

using json = nlohmann::json;

/// Field-by-field reader over one JSON object section.
class StrictReader {
public:
    StrictReader(const json& obj, std::string section) : obj_(obj), section_(std::move(section)) {
        if (!obj_.is_object()) throw ConfigError(section_ + " must be a JSON object");
    }

    template <class T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        if (!obj_.contains(key)) return;
        const json& v = obj_.at(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw ConfigError("");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_unsigned()) throw ConfigError("");
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) throw ConfigError("");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw ConfigError("");
            }
            out = v.get<T>();
        } catch (const std::exception&) {
            throw ConfigError(field(key) + " has the wrong type: " + v.dump());
        }
    }

    /// Reads a string-valued enum through `parse`.
    template <class T, class Parse>
    void read_enum(const char* key, T& out, Parse parse) {
        std::string s;
        bool present = obj_.contains(key);
        read(key, s);
        if (present) out = parse(s);
    }

    [[nodiscard]] bool has(const char* key) const { return obj_.contains(key); }

    void skip(const char* key) { seen_.insert(key); }

    /// Throws if the object holds keys that were never read.
    void finish() const {
        for (const auto& [key, _] : obj_.items()) {
            if (!seen_.contains(key)) throw ConfigError("unknown key " + field(key.c_str()));
        }
    }

    [[nodiscard]] std::string field(const char* key) const { return section_ + "." + key; }

private:
    const json& obj_;
    std::string section_;
    std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------

inline json to_json(const AdapterConfig& c) {
    return {{"kind", to_string(c.kind)},
            {"d", c.d},
            {"out_dim", c.out_dim},
            {"dense_hidden", c.dense_hidden},
            {"n_experts", c.n_experts},
            {"top_k", c.top_k},
            {"expert_hidden", c.expert_hidden},
            {"n_shared", c.n_shared},
            {"head", to_string(c.head)},
            {"agg_hidden", c.agg_hidden},
            {"use_bias", c.use_bias},
            {"ln_epsilon", c.ln_epsilon},
            {"gate_init_scale", c.gate_init_scale}};
}

/// A "preset" key, when present, seeds the defaults before other keys apply.
inline AdapterConfig adapter_config_from_json(const json& j, AdapterConfig c = {}) {
    StrictReader r(j, "adapter");
    if (r.has("preset")) {
        std::string preset;
        r.read("preset", preset);
        c = adapter_preset(preset);
    }
    r.skip("preset");
    r.read_enum("kind", c.kind, parse_adapter_kind);
    r.read("d", c.d);
    r.read("out_dim", c.out_dim);
    r.read("dense_hidden", c.dense_hidden);
    r.read("n_experts", c.n_experts);
    r.read("top_k", c.top_k);
    r.read("expert_hidden", c.expert_hidden);
    r.read("n_shared", c.n_shared);
    r.read_enum("head", c.head, parse_head_variant);
    r.read("agg_hidden", c.agg_hidden);
    r.read("use_bias", c.use_bias);
    r.read("ln_epsilon", c.ln_epsilon);
    r.read("gate_init_scale", c.gate_init_scale);
    r.finish();
    c.validate();
    return c;
}

inline json to_json(const LossConfig& c) {
    return {{"lambda", c.lambda}, {"vocab", c.vocab}, {"importance", to_string(c.importance)}};
}

inline LossConfig loss_config_from_json(const json& j, LossConfig c = {}) {
    StrictReader r(j, "loss");
    r.read("lambda", c.lambda);
    r.read("vocab", c.vocab);
    r.read_enum("importance", c.importance, parse_importance_source);
    r.finish();
    c.validate();
    return c;
}

inline json to_json(const ConflictDatasetConfig& c) {
    return {{"categories", c.categories}, {"d", c.d},
            {"out_dim", c.out_dim},       {"vocab", c.vocab},
            {"n_per_category", c.n_per_category}, {"alpha", c.alpha},
            {"signature_scale", c.signature_scale}, {"factor_spread", c.factor_spread},
            {"common_scale", c.common_scale},
            {"seed", c.seed}};
}

inline ConflictDatasetConfig data_config_from_json(const json& j, ConflictDatasetConfig c = {}) {
    StrictReader r(j, "data");
    r.read("categories", c.categories);
    r.read("d", c.d);
    r.read("out_dim", c.out_dim);
    r.read("vocab", c.vocab);
    r.read("n_per_category", c.n_per_category);
    r.read("alpha", c.alpha);
    r.read("signature_scale", c.signature_scale);
    r.read("factor_spread", c.factor_spread);
    r.read("common_scale", c.common_scale);
    r.read("seed", c.seed);
    r.finish();
    c.validate();
    return c;
}

inline json to_json(const OptimConfig& c) {
    return {{"lr_peak", c.lr_peak},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps},
            {"weight_decay", c.weight_decay},
            {"warmup_steps", c.warmup_steps},
            {"stable_steps", c.stable_steps},
            {"decay_steps", c.decay_steps},
            {"lr_min", c.lr_min},
            {"batch_size", c.batch_size},
            {"total_steps", c.total_steps},
            {"clip_norm", c.clip_norm},
            {"seed", c.seed}};
}

inline OptimConfig optim_config_from_json(const json& j, OptimConfig c = {}) {
    StrictReader r(j, "optim");
    r.read("lr_peak", c.lr_peak);
    r.read("beta1", c.beta1);
    r.read("beta2", c.beta2);
    r.read("eps", c.eps);
    r.read("weight_decay", c.weight_decay);
    r.read("warmup_steps", c.warmup_steps);
    r.read("stable_steps", c.stable_steps);
    r.read("decay_steps", c.decay_steps);
    r.read("lr_min", c.lr_min);
    r.read("batch_size", c.batch_size);
    r.read("total_steps", c.total_steps);
    r.read("clip_norm", c.clip_norm);
    r.read("seed", c.seed);
    r.finish();
    c.validate();
    return c;
}

} // namespace moeadapter
