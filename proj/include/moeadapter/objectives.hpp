// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

// Joint objective: task cross-entropy plus lambda times the load-balancing
// loss  L_aux = N * sum_e P_e * f_e  over routed experts, where P_e is the
// batch-mean gate value and f_e the fraction of tokens selecting e.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "moeadapter/adapter.hpp"
#include "moeadapter/tape.hpp"

namespace moeadapter {

/// Which probabilities feed the importance term P_e.
enum class ImportanceSource {
    post_topk, // gate values after masking (zero for unrouted experts)
    pre_topk,  // dense softmax of the raw logits
};

inline std::string to_string(ImportanceSource s) { return s == ImportanceSource::post_topk ? "post_topk" : "pre_topk"; }

inline ImportanceSource parse_importance_source(std::string_view s) {
    if (s == "post_topk") return ImportanceSource::post_topk;
    if (s == "pre_topk") return ImportanceSource::pre_topk;
    throw ConfigError("loss.importance must be \"post_topk\" or \"pre_topk\", got \"" + std::string(s) + "\"");
}

struct LossConfig {
    double lambda = 0.01;
    std::size_t vocab = 8;
    ImportanceSource importance = ImportanceSource::post_topk;

    void validate() const {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("loss.lambda must be finite and >= 0");
        if (vocab < 2) throw ConfigError("loss.vocab must be >= 2");
    }

    friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

struct BalanceStats {
    std::vector<double> importance; // P_e
    std::vector<double> load;       // f_e
    double aux_loss = 0.0;
    std::size_t tokens = 0;
};

/// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
inline double task_loss(const Tensor& logits, std::span<const std::size_t> targets) {
    GradTape tape;
    return tape.scalar(ad::cross_entropy(tape, tape.constant(logits), {targets.begin(), targets.end()}));
}

inline BalanceStats balance_stats(std::span<const RoutingRecord> records, std::size_t n_experts, std::size_t top_k,
                                  ImportanceSource source = ImportanceSource::post_topk) {
    if (records.empty()) throw ConfigError("balance_stats: empty batch");
    BalanceStats st{std::vector<double>(n_experts, 0.0), std::vector<double>(n_experts, 0.0), 0.0, records.size()};
    for (const auto& rec : records) {
        if (rec.gates.size() != n_experts || rec.selected.size() != top_k) {
            throw ShapeError("balance_stats: routing record does not match N=" + std::to_string(n_experts) +
                             ", k=" + std::to_string(top_k));
        }
        if (source == ImportanceSource::post_topk) {
            for (std::size_t e = 0; e < n_experts; ++e) st.importance[e] += rec.gates[e];
        } else {
            Tensor p = softmax(Tensor::vector(rec.logits));
            for (std::size_t e = 0; e < n_experts; ++e) st.importance[e] += p[e];
        }
        for (std::size_t e : rec.selected) st.load[e] += 1.0;
    }
    const auto tokens = static_cast<double>(records.size());
    for (std::size_t e = 0; e < n_experts; ++e) {
        st.importance[e] /= tokens;
        st.load[e] /= tokens;
        st.aux_loss += st.importance[e] * st.load[e];
    }
    st.aux_loss *= static_cast<double>(n_experts);
    return st;
}

inline double joint_loss(double task, const BalanceStats& stats, const LossConfig& cfg) {
    return task + cfg.lambda * stats.aux_loss;
}

/// Load-balancing loss on the tape. Gradient flows through P_e only; the
/// selection fractions f_e are constants.
inline Var aux_loss_on_tape(GradTape& tape, const AdapterOutput& out, const BalanceStats& stats,
                            ImportanceSource source) {
    std::vector<double> weights(stats.load.size());
    const auto n = static_cast<double>(stats.load.size());
    for (std::size_t e = 0; e < weights.size(); ++e) weights[e] = n * stats.load[e];
    Var probs = out.gates;
    if (source == ImportanceSource::pre_topk) {
        probs = ad::masked_softmax(tape, out.logits, std::vector<std::uint8_t>(tape.value(out.logits).size(), 1));
    }
    return ad::weighted_column_mean(tape, probs, std::move(weights));
}

} // namespace moeadapter
