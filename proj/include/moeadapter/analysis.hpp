// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <concepts>
#include <cstring>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "moeadapter/adapter.hpp"
#include "moeadapter/conflict_lab.hpp"
#include "moeadapter/json_io.hpp"
#include "moeadapter/trainer.hpp"

namespace moeadapter {

using Matrix = std::vector<std::vector<double>>;

inline Matrix make_matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Matrix(rows, std::vector<double>(cols, fill));
}

struct AnalysisConfig {
    double probe_step = 1e-3;      // step length along the unit gradient
    std::size_t eval_batches = 8;  // held-out batches per category
    std::size_t batch_size = 256;
    double den_guard = 1e-9;
    bool include_aux = false;
    std::size_t snapshot_every = 100; // 0 disables trajectory snapshots
    std::uint64_t seed = 0;

    void validate() const {
        if (!(probe_step > 0.0) || !std::isfinite(probe_step)) throw ConfigError("analysis.probe_step must be > 0");
        if (eval_batches < 1) throw ConfigError("analysis.eval_batches must be >= 1");
        if (batch_size < 1) throw ConfigError("analysis.batch_size must be >= 1");
        if (!(den_guard >= 0.0)) throw ConfigError("analysis.den_guard must be >= 0");
    }

    friend bool operator==(const AnalysisConfig&, const AnalysisConfig&) = default;
};

inline json to_json(const AnalysisConfig& c) {
    return {{"probe_step", c.probe_step}, {"eval_batches", c.eval_batches}, {"batch_size", c.batch_size},
            {"den_guard", c.den_guard},   {"include_aux", c.include_aux},   {"snapshot_every", c.snapshot_every},
            {"seed", c.seed}};
}

inline AnalysisConfig analysis_config_from_json(const json& j, AnalysisConfig c = {}) {
    StrictReader r(j, "analysis");
    r.read("probe_step", c.probe_step);
    r.read("eval_batches", c.eval_batches);
    r.read("batch_size", c.batch_size);
    r.read("den_guard", c.den_guard);
    r.read("include_aux", c.include_aux);
    r.read("snapshot_every", c.snapshot_every);
    r.read("seed", c.seed);
    r.finish();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Flat gradients.

struct ParamSegment {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
};

/// Canonical flat layout of an adapter's trainable parameters.
inline std::vector<ParamSegment> param_layout(const Adapter& a) {
    std::vector<ParamSegment> out;
    std::size_t offset = 0;
    for_each_param(a, [&](const std::string& name, const Tensor& t) {
        out.push_back({name, offset, t.size()});
        offset += t.size();
    });
    return out;
}

inline std::vector<double> flatten(std::span<const Tensor> tensors) {
    std::vector<double> out;
    for (const Tensor& t : tensors) out.insert(out.end(), t.values().begin(), t.values().end());
    return out;
}

inline std::vector<double> flatten_params(const Adapter& a) {
    std::vector<double> out;
    for_each_param(a, [&](const std::string&, const Tensor& t) { out.insert(out.end(), t.values().begin(), t.values().end()); });
    return out;
}

/// Overwrites every parameter of `a` from a flat vector in canonical order.
inline void unflatten_params(Adapter& a, std::span<const double> flat) {
    if (flat.size() != param_element_count(a)) {
        throw ShapeError("flat parameter vector has " + std::to_string(flat.size()) + " entries, adapter has " +
                         std::to_string(param_element_count(a)));
    }
    std::size_t offset = 0;
    for_each_param(a, [&](const std::string&, Tensor& t) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), t.size(), t.data());
        offset += t.size();
    });
}

struct FlatGradient {
    std::size_t category = 0;
    std::vector<double> values;
    std::string batch; // descriptor of the batch the gradient was taken on
};

/// Mean task-loss gradient on one per-category training batch.
inline FlatGradient category_gradient(const Adapter& adapter, const ConflictDataset& ds, std::size_t category,
                                      std::size_t batch_size, std::uint64_t seed, const LossConfig& loss = {},
                                      bool include_aux = false) {
    if (category >= ds.config.categories || ds.config.n_per_category == 0) {
        throw ConfigError("category_gradient: category " + std::to_string(category) + " is empty");
    }
    const Batch batch = sample_batch(ds, category, batch_size, seed);
    const BatchEvaluation ev = evaluate_batch(adapter, ds.readout, batch, loss, include_aux);
    return {category, flatten(ev.grads),
            "category=" + category_name(category) + " n=" + std::to_string(batch_size) + " seed=" + std::to_string(seed)};
}

// ---------------------------------------------------------------------------
// Cosine similarity.

inline double dot(std::span<const double> a, std::span<const double> b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

/// Pairwise cosine similarity. Pairs involving a zero-norm gradient are NaN
/// and produce a message in `warnings`.
inline Matrix cosine_matrix(std::span<const std::vector<double>> grads, std::vector<std::string>* warnings = nullptr) {
    const std::size_t n = grads.size();
    for (const auto& g : grads) {
        if (g.size() != grads.front().size()) throw ShapeError("cosine_matrix: gradients differ in length");
    }
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        norms[i] = std::sqrt(dot(grads[i], grads[i]));
        if (norms[i] == 0.0 && warnings) {
            warnings->push_back("gradient " + std::to_string(i) + " has zero norm; its cosine entries are NaN");
        }
    }
    Matrix m = make_matrix(n, n, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < n; ++i) {
        if (norms[i] == 0.0) continue;
        m[i][i] = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            if (norms[j] == 0.0) continue;
            m[i][j] = m[j][i] = dot(grads[i], grads[j]) / (norms[i] * norms[j]);
        }
    }
    return m;
}

inline Matrix cosine_matrix(std::span<const FlatGradient> grads, std::vector<std::string>* warnings = nullptr) {
    std::vector<std::vector<double>> v;
    for (const auto& g : grads) v.push_back(g.values);
    return cosine_matrix(std::span<const std::vector<double>>(v), warnings);
}

// ---------------------------------------------------------------------------
// Influence scores.

/// A family of per-task losses over a flat parameter vector, each evaluated on
/// a fixed set of evaluation batches.
template <class P>
concept ProbeProblem = requires(P& p, std::size_t i, std::size_t b, std::span<const double> theta) {
    { p.tasks() } -> std::convertible_to<std::size_t>;
    { p.batches() } -> std::convertible_to<std::size_t>;
    { p.loss(i, b, theta) } -> std::convertible_to<double>;
    { p.gradient(i, b, theta) } -> std::convertible_to<std::vector<double>>;
};

struct InfluenceResult {
    Matrix values;                            // NaN where no batch passed the guard
    std::vector<std::vector<std::size_t>> reliable; // batches that passed the guard per cell
};

/// I[i][j] = mean over batches b of (L_i(θ) − L_i(θ − λ ĝ_j)) / (L_i(θ) − L_i(θ − λ ĝ_i)),
/// with ĝ_j the unit gradient of task j on batch b. Batches whose denominator
/// is below `guard` in magnitude are dropped from row i.
template <ProbeProblem P>
InfluenceResult influence_matrix(P& problem, std::span<const double> theta, double probe_step, double guard = 1e-9) {
    if (!(probe_step > 0.0)) throw ConfigError("analysis.probe_step must be > 0");
    const std::size_t n = problem.tasks();
    const std::size_t nb = problem.batches();
    InfluenceResult r{make_matrix(n, n, 0.0), std::vector<std::vector<std::size_t>>(n, std::vector<std::size_t>(n, 0))};
    std::vector<double> shifted(theta.size());

    for (std::size_t b = 0; b < nb; ++b) {
        std::vector<double> base(n);
        for (std::size_t i = 0; i < n; ++i) base[i] = problem.loss(i, b, theta);
        Matrix delta = make_matrix(n, n); // delta[i][j] = change of L_i under probe j
        for (std::size_t j = 0; j < n; ++j) {
            const std::vector<double> g = problem.gradient(j, b, theta);
            const double norm = std::sqrt(dot(g, g));
            if (norm == 0.0) continue;
            for (std::size_t p = 0; p < theta.size(); ++p) shifted[p] = theta[p] - probe_step * g[p] / norm;
            for (std::size_t i = 0; i < n; ++i) delta[i][j] = base[i] - problem.loss(i, b, shifted);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double den = delta[i][i];
            if (!(std::abs(den) >= guard) || !std::isfinite(den)) continue;
            for (std::size_t j = 0; j < n; ++j) {
                r.values[i][j] += delta[i][j] / den;
                ++r.reliable[i][j];
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            r.values[i][j] = r.reliable[i][j] == 0 ? std::numeric_limits<double>::quiet_NaN()
                                                   : r.values[i][j] / static_cast<double>(r.reliable[i][j]);
        }
    }
    return r;
}

/// Per-category losses of an adapter on held-out batches. Works on a private
/// copy, so the adapter it was built from is never modified.
class AdapterProbe {
public:
    AdapterProbe(const Adapter& adapter, const ConflictDataset& ds, const LossConfig& loss,
                 std::vector<std::vector<Batch>> batches, bool include_aux = false)
        : work_(adapter), ds_(&ds), loss_(loss), batches_(std::move(batches)), include_aux_(include_aux) {
        if (batches_.empty() || batches_.front().empty()) throw ConfigError("AdapterProbe: no evaluation batches");
        for (const auto& per : batches_) {
            if (per.size() != batches_.front().size()) throw ConfigError("AdapterProbe: ragged evaluation batches");
        }
    }

    [[nodiscard]] std::size_t tasks() const { return batches_.size(); }
    [[nodiscard]] std::size_t batches() const { return batches_.front().size(); }

    double loss(std::size_t i, std::size_t b, std::span<const double> theta) {
        unflatten_params(work_, theta);
        return evaluate_batch(work_, ds_->readout, batches_.at(i).at(b), loss_, include_aux_, false).joint_loss;
    }

    std::vector<double> gradient(std::size_t i, std::size_t b, std::span<const double> theta) {
        unflatten_params(work_, theta);
        return flatten(evaluate_batch(work_, ds_->readout, batches_.at(i).at(b), loss_, include_aux_, true).grads);
    }

private:
    Adapter work_;
    const ConflictDataset* ds_;
    LossConfig loss_;
    std::vector<std::vector<Batch>> batches_;
    bool include_aux_;
};

/// Held-out evaluation batches, indexed [category][batch].
inline std::vector<std::vector<Batch>> evaluation_batches(const ConflictDataset& ds, const AnalysisConfig& cfg) {
    std::vector<std::vector<Batch>> out(ds.config.categories);
    for (std::size_t c = 0; c < ds.config.categories; ++c) {
        for (std::size_t b = 0; b < cfg.eval_batches; ++b) {
            out[c].push_back(holdout_batch(ds, c, cfg.batch_size, derive_seed(cfg.seed, b)));
        }
    }
    return out;
}

inline InfluenceResult influence_matrix(const Adapter& adapter, const ConflictDataset& ds, const LossConfig& loss,
                                        const AnalysisConfig& cfg) {
    AdapterProbe probe(adapter, ds, loss, evaluation_batches(ds, cfg), cfg.include_aux);
    const std::vector<double> theta = flatten_params(adapter);
    return influence_matrix(probe, theta, cfg.probe_step, cfg.den_guard);
}

// ---------------------------------------------------------------------------
// Expert activation.

/// Rows of the stored corpus belonging to `category`.
inline Tensor category_inputs(const ConflictDataset& ds, std::size_t category) {
    const std::size_t per = ds.config.n_per_category;
    Tensor x({per, ds.config.d});
    std::copy_n(ds.inputs.row(category * per).data(), per * ds.config.d, x.data());
    return x;
}

/// (e, c) = fraction of category-c tokens whose top-k set contains routed expert e.
inline Matrix activation_rates(const MoEAdapter& m, std::span<const Tensor> per_category) {
    const std::size_t n = m.config.n_experts;
    Matrix rates = make_matrix(n, per_category.size());
    for (std::size_t c = 0; c < per_category.size(); ++c) {
        const auto records = route(m.gate, per_category[c], m.config.top_k);
        std::vector<std::size_t> count(n, 0);
        for (const auto& r : records) {
            for (std::size_t e : r.selected) ++count[e];
        }
        for (std::size_t e = 0; e < n; ++e) {
            rates[e][c] = static_cast<double>(count[e]) / static_cast<double>(records.size());
        }
    }
    return rates;
}

inline Matrix activation_rates(const MoEAdapter& m, const ConflictDataset& ds) {
    std::vector<Tensor> xs;
    for (std::size_t c = 0; c < ds.config.categories; ++c) xs.push_back(category_inputs(ds, c));
    return activation_rates(m, std::span<const Tensor>(xs));
}

// ---------------------------------------------------------------------------
// Reports.

struct AnalysisReport {
    std::vector<std::string> categories;
    Matrix cosine;
    Matrix influence;
    std::vector<std::vector<std::size_t>> influence_reliable;
    std::optional<Matrix> activation; // absent for dense adapters
    ParamCount params;
    json config = json::object();
    std::string dataset_hash;
    std::string run_hash;
    std::string mode = "checkpoint"; // or "trajectory"
    std::size_t snapshots = 1;
    std::vector<std::uint64_t> snapshot_steps;
    std::vector<std::string> warnings;
};

/// Cosine, influence and activation for one set of adapter parameters.
inline AnalysisReport analyze(const Adapter& adapter, const ConflictDataset& ds, const LossConfig& loss,
                              const AnalysisConfig& cfg) {
    cfg.validate();
    AnalysisReport r;
    for (std::size_t c = 0; c < ds.config.categories; ++c) r.categories.push_back(category_name(c));
    std::vector<FlatGradient> grads;
    for (std::size_t c = 0; c < ds.config.categories; ++c) {
        grads.push_back(category_gradient(adapter, ds, c, cfg.batch_size, derive_seed(cfg.seed, c), loss, cfg.include_aux));
    }
    r.cosine = cosine_matrix(std::span<const FlatGradient>(grads), &r.warnings);
    InfluenceResult inf = influence_matrix(adapter, ds, loss, cfg);
    r.influence = std::move(inf.values);
    r.influence_reliable = std::move(inf.reliable);
    for (std::size_t i = 0; i < r.influence.size(); ++i) {
        for (std::size_t j = 0; j < r.influence.size(); ++j) {
            if (r.influence_reliable[i][j] < cfg.eval_batches) {
                r.warnings.push_back("influence[" + r.categories[i] + "][" + r.categories[j] + "] used " +
                                     std::to_string(r.influence_reliable[i][j]) + " of " +
                                     std::to_string(cfg.eval_batches) + " batches");
            }
        }
    }
    if (const auto* m = std::get_if<MoEAdapter>(&adapter)) r.activation = activation_rates(*m, ds);
    r.params = count_params(config_of(adapter));
    r.config = {{"adapter", to_json(config_of(adapter))}, {"loss", to_json(loss)}, {"analysis", to_json(cfg)}};
    return r;
}

namespace detail {

/// Elementwise mean over matrices, skipping NaN entries.
inline Matrix nan_mean(const std::vector<Matrix>& ms) {
    Matrix out = make_matrix(ms.front().size(), ms.front().front().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        for (std::size_t j = 0; j < out[i].size(); ++j) {
            double sum = 0.0;
            std::size_t n = 0;
            for (const auto& m : ms) {
                if (std::isnan(m[i][j])) continue;
                sum += m[i][j];
                ++n;
            }
            out[i][j] = n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(n);
        }
    }
    return out;
}

} // namespace detail

/// Cosine and influence averaged over training snapshots; activation is taken
/// from the last snapshot.
inline AnalysisReport analyze_trajectory(std::span<const Adapter> snapshots, std::span<const std::uint64_t> steps,
                                         const ConflictDataset& ds, const LossConfig& loss, const AnalysisConfig& cfg) {
    if (snapshots.empty()) throw ConfigError("analyze_trajectory: no snapshots");
    if (steps.size() != snapshots.size()) throw ConfigError("analyze_trajectory: step list does not match snapshots");
    std::vector<Matrix> cos, inf;
    AnalysisReport last;
    std::vector<std::vector<std::size_t>> reliable;
    for (std::size_t s = 0; s < snapshots.size(); ++s) {
        AnalysisReport r = analyze(snapshots[s], ds, loss, cfg);
        cos.push_back(r.cosine);
        inf.push_back(r.influence);
        if (reliable.empty()) {
            reliable = r.influence_reliable;
        } else {
            for (std::size_t i = 0; i < reliable.size(); ++i) {
                for (std::size_t j = 0; j < reliable[i].size(); ++j) reliable[i][j] += r.influence_reliable[i][j];
            }
        }
        for (auto& w : r.warnings) last.warnings.push_back("step " + std::to_string(steps[s]) + ": " + w);
        if (s + 1 == snapshots.size()) {
            r.warnings = std::move(last.warnings);
            last = std::move(r);
        }
    }
    last.cosine = detail::nan_mean(cos);
    for (std::size_t i = 0; i < last.cosine.size(); ++i) {
        if (!std::isnan(last.cosine[i][i])) last.cosine[i][i] = 1.0;
    }
    last.influence = detail::nan_mean(inf);
    last.influence_reliable = std::move(reliable);
    last.mode = "trajectory";
    last.snapshots = snapshots.size();
    last.snapshot_steps.assign(steps.begin(), steps.end());
    return last;
}

inline double mean_off_diagonal(const Matrix& m) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        for (std::size_t j = 0; j < m[i].size(); ++j) {
            if (i == j || std::isnan(m[i][j])) continue;
            sum += m[i][j];
            ++n;
        }
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(n);
}

inline std::size_t negative_off_diagonal(const Matrix& m) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        for (std::size_t j = 0; j < m[i].size(); ++j) {
            if (i != j && m[i][j] < 0.0) ++n;
        }
    }
    return n;
}

// JSON: NaN is written as null.
namespace detail {

inline json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (const auto& row : m) {
        json r = json::array();
        for (double v : row) r.push_back(std::isnan(v) ? json(nullptr) : json(v));
        rows.push_back(std::move(r));
    }
    return rows;
}

inline Matrix matrix_from_json(const json& j) {
    Matrix m;
    for (const auto& row : j) {
        std::vector<double> r;
        for (const auto& v : row) r.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
        m.push_back(std::move(r));
    }
    return m;
}

} // namespace detail

inline json to_json(const AnalysisReport& r) {
    json j = {{"format", "moeadapter-report"},
              {"version", 1},
              {"mode", r.mode},
              {"snapshots", r.snapshots},
              {"snapshot_steps", r.snapshot_steps},
              {"dataset_hash", r.dataset_hash},
              {"run_hash", r.run_hash},
              {"categories", r.categories},
              {"cosine", detail::matrix_json(r.cosine)},
              {"influence", detail::matrix_json(r.influence)},
              {"influence_reliable_batches", r.influence_reliable},
              {"params", {{"total", r.params.total}, {"active", r.params.active}, {"ratio", r.params.ratio}}},
              {"config", r.config},
              {"warnings", r.warnings}};
    if (r.activation) {
        json experts = json::array();
        for (std::size_t e = 0; e < r.activation->size(); ++e) experts.push_back("expert_" + std::to_string(e));
        j["activation"] = {{"experts", experts}, {"rates", detail::matrix_json(*r.activation)}};
    } else {
        j["activation"] = "not applicable";
    }
    return j;
}

inline AnalysisReport report_from_json(const json& j) {
    try {
        if (j.at("format") != "moeadapter-report") throw FormatError("not a moeadapter report");
        AnalysisReport r;
        r.mode = j.at("mode").get<std::string>();
        r.snapshots = j.at("snapshots").get<std::size_t>();
        r.snapshot_steps = j.at("snapshot_steps").get<std::vector<std::uint64_t>>();
        r.dataset_hash = j.at("dataset_hash").get<std::string>();
        r.run_hash = j.at("run_hash").get<std::string>();
        r.categories = j.at("categories").get<std::vector<std::string>>();
        r.cosine = detail::matrix_from_json(j.at("cosine"));
        r.influence = detail::matrix_from_json(j.at("influence"));
        r.influence_reliable = j.at("influence_reliable_batches").get<std::vector<std::vector<std::size_t>>>();
        const json& p = j.at("params");
        r.params = {p.at("total").get<std::size_t>(), p.at("active").get<std::size_t>(), p.at("ratio").get<double>()};
        r.config = j.at("config");
        r.warnings = j.at("warnings").get<std::vector<std::string>>();
        const json& act = j.at("activation");
        if (act.is_object()) r.activation = detail::matrix_from_json(act.at("rates"));
        return r;
    } catch (const json::exception& e) {
        throw FormatError(std::string("report: ") + e.what());
    }
}

namespace detail {

inline void write_matrix_csv(std::ostream& os, const std::string& corner, const std::vector<std::string>& row_labels,
                             const std::vector<std::string>& col_labels, const Matrix& m) {
    os << corner;
    for (const auto& c : col_labels) os << ',' << c;
    os << "\n";
    for (std::size_t i = 0; i < m.size(); ++i) {
        os << row_labels[i];
        for (double v : m[i]) os << ',' << (std::isnan(v) ? std::string("nan") : format_double(v));
        os << "\n";
    }
}

} // namespace detail

inline std::string cosine_csv(const AnalysisReport& r) {
    std::ostringstream os;
    detail::write_matrix_csv(os, "category", r.categories, r.categories, r.cosine);
    return os.str();
}

/// Rows are the affected category i, columns the probing category j.
inline std::string influence_csv(const AnalysisReport& r) {
    std::ostringstream os;
    detail::write_matrix_csv(os, "category", r.categories, r.categories, r.influence);
    return os.str();
}

inline std::string activation_csv(const AnalysisReport& r) {
    if (!r.activation) return "activation,not applicable\n";
    std::vector<std::string> experts;
    for (std::size_t e = 0; e < r.activation->size(); ++e) experts.push_back("expert_" + std::to_string(e));
    std::ostringstream os;
    detail::write_matrix_csv(os, "expert", experts, r.categories, *r.activation);
    return os.str();
}

// ---------------------------------------------------------------------------
// Comparison.

inline bool bit_equal_or_both_nan(double a, double b) {
    if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
    return std::memcmp(&a, &b, sizeof a) == 0;
}

struct CompareVerdict {
    Matrix cosine_delta;    // b - a
    Matrix influence_delta; // b - a
    double mean_cosine_a = 0.0;
    double mean_cosine_b = 0.0;
    std::size_t negative_influence_a = 0;
    std::size_t negative_influence_b = 0;
    bool cosine_improved = false;
    bool negative_influence_decreased = false;
    bool no_change = false;
    std::vector<std::string> flags;
};

/// Contrasts report `b` (typically MoE) against baseline `a` (typically dense).
inline CompareVerdict compare_runs(const AnalysisReport& a, const AnalysisReport& b) {
    if (a.dataset_hash != b.dataset_hash) {
        throw ConfigError("reports come from different datasets (" + a.dataset_hash + " vs " + b.dataset_hash + ")");
    }
    if (a.categories != b.categories) throw ConfigError("reports have different category sets");
    const std::size_t n = a.categories.size();
    CompareVerdict v;
    v.cosine_delta = make_matrix(n, n);
    v.influence_delta = make_matrix(n, n);
    bool all_zero = true;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            v.cosine_delta[i][j] = b.cosine[i][j] - a.cosine[i][j];
            v.influence_delta[i][j] = b.influence[i][j] - a.influence[i][j];
            const bool same_c = bit_equal_or_both_nan(a.cosine[i][j], b.cosine[i][j]);
            const bool same_i = bit_equal_or_both_nan(a.influence[i][j], b.influence[i][j]);
            if (same_c) v.cosine_delta[i][j] = 0.0;
            if (same_i) v.influence_delta[i][j] = 0.0;
            all_zero = all_zero && same_c && same_i;
        }
    }
    v.mean_cosine_a = mean_off_diagonal(a.cosine);
    v.mean_cosine_b = mean_off_diagonal(b.cosine);
    v.negative_influence_a = negative_off_diagonal(a.influence);
    v.negative_influence_b = negative_off_diagonal(b.influence);
    v.no_change = all_zero;
    if (all_zero) {
        v.flags.push_back("no change");
        return v;
    }
    v.cosine_improved = v.mean_cosine_b > v.mean_cosine_a;
    v.negative_influence_decreased = v.negative_influence_b < v.negative_influence_a;
    if (v.cosine_improved) v.flags.push_back("cosine improved");
    if (v.negative_influence_decreased) v.flags.push_back("negative influence decreased");
    if (v.flags.empty()) v.flags.push_back("no improvement");
    return v;
}

inline json to_json(const CompareVerdict& v, const std::vector<std::string>& categories) {
    return {{"verdict", v.flags},
            {"no_change", v.no_change},
            {"cosine_improved", v.cosine_improved},
            {"negative_influence_decreased", v.negative_influence_decreased},
            {"mean_off_diagonal_cosine", {{"a", v.mean_cosine_a}, {"b", v.mean_cosine_b}}},
            {"negative_influence_cells", {{"a", v.negative_influence_a}, {"b", v.negative_influence_b}}},
            {"categories", categories},
            {"cosine_delta", detail::matrix_json(v.cosine_delta)},
            {"influence_delta", detail::matrix_json(v.influence_delta)}};
}

} // namespace moeadapter
