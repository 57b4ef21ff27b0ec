// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic heterogeneous corpus with deliberately conflicting targets.
//
// Coordinates of x are split into three blocks:
//   A = [0, d/2)       shared features; speech and music read them with opposite maps
//   B = [d/2, d_s)     secondary features, independent maps per category
//   S = [d_s, d)       constant profile common to every input (norm common_scale);
//                      no target map reads it
// Inputs are x = mu_c + F_c z with z ~ N(0, I_r), r = max(2, d/4), where F_c
// is a common factor plus a private one scaled by factor_spread. The
// category mean is mu_c = m0 + o_c * 1, with m0 the common profile on S and
// o_c a constant offset: speech at -signature_scale, music at
// +signature_scale, further categories evenly spaced between them.
// Layer normalization removes the offset; the raw-input router still sees it.
// Target maps are M_c = (1 - alpha) M_shared + alpha Q_c with
//   Q_speech = [ Q_A | Q_B1 ]
//   Q_music  = [-Q_A | Q_B2 ]
//   Q_other  = (Q_speech + Q_music) / 2 + independent component
// Every map row is centered within A and within B and is zero on S, so
// M_c mu_c = 0 and neither m0 nor the offset changes a label.
// label = argmax(M_c x).

#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "moeadapter/adapter.hpp"
#include "moeadapter/random.hpp"

namespace moeadapter {

struct ConflictDatasetConfig {
    std::size_t categories = 3;
    std::size_t d = 32;
    std::size_t out_dim = 32; // readout input width; must equal the adapter output width
    std::size_t vocab = 8;
    std::size_t n_per_category = 2000;
    double alpha = 1.0;
    double signature_scale = 3.0;
    double factor_spread = 0.0; // scale of each category's private factor perturbation
    double common_scale = 4.0;  // norm of the input profile shared by all categories
    std::uint64_t seed = 0;

    void validate() const {
        if (categories < 2) throw ConfigError("data.categories must be >= 2");
        if (d < 8) throw ConfigError("data.d must be >= 8");
        if (out_dim < 1) throw ConfigError("data.out_dim must be positive");
        if (vocab < 2) throw ConfigError("data.vocab must be >= 2");
        if (n_per_category < 1) throw ConfigError("data.n_per_category must be >= 1");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("data.alpha must be in [0, 1]");
        if (!(signature_scale >= 0.0) || !std::isfinite(signature_scale)) {
            throw ConfigError("data.signature_scale must be finite and >= 0");
        }
        if (!(common_scale >= 0.0) || !std::isfinite(common_scale)) {
            throw ConfigError("data.common_scale must be finite and >= 0");
        }
        if (!(factor_spread >= 0.0) || !std::isfinite(factor_spread)) {
            throw ConfigError("data.factor_spread must be finite and >= 0");
        }
    }

    friend bool operator==(const ConflictDatasetConfig&, const ConflictDatasetConfig&) = default;
};

inline std::string category_name(std::size_t c) {
    static const char* names[] = {"speech", "music", "sound"};
    return c < 3 ? names[c] : "category_" + std::to_string(c);
}

/// Frozen generative model of one category.
struct CategoryModel {
    Tensor mean;       // d
    Tensor factor;     // d x r
    Tensor target_map; // vocab x d
};

struct ConflictDataset {
    ConflictDatasetConfig config;
    std::vector<CategoryModel> models;
    Tensor readout;                      // vocab x out_dim, frozen
    Tensor inputs;                       // (C * n) x d, category-major
    std::vector<std::size_t> labels;     // C * n
    std::vector<std::size_t> categories; // C * n
    std::size_t construction_attempts = 1;

    [[nodiscard]] std::size_t size() const { return labels.size(); }
};

struct Batch {
    Tensor x;
    std::vector<std::size_t> labels;
    std::vector<std::size_t> categories;
};

/// Position of category c in [-1, 1]: speech -1, music +1, the rest in between.
inline double category_offset(std::size_t c, std::size_t categories) {
    if (c == 0) return -1.0;
    if (c == 1) return 1.0;
    return -1.0 + 2.0 * static_cast<double>(c - 1) / static_cast<double>(categories - 1);
}

namespace detail {

struct Blocks {
    std::size_t a_end, b_end, d, rank, rank_a;
};

inline Blocks blocks_for(std::size_t d) {
    const std::size_t rank = std::max<std::size_t>(2, d / 4);
    return {d / 2, d - d / 4, d, rank, (rank + 1) / 2};
}

/// Subtracts from every row its mean over columns [c0, c1).
inline void center_rows(Tensor& m, std::size_t c0, std::size_t c1) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        double mean = 0.0;
        for (std::size_t c = c0; c < c1; ++c) mean += m.at(r, c);
        mean /= static_cast<double>(c1 - c0);
        for (std::size_t c = c0; c < c1; ++c) m.at(r, c) -= mean;
    }
}

/// Fills columns [c0, c1) of rows of `m` with N(0, scale^2).
inline void fill_gaussian(Tensor& m, Rng& rng, std::size_t c0, std::size_t c1, double scale) {
    std::normal_distribution<double> n(0.0, scale);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = c0; c < c1; ++c) m.at(r, c) = n(rng);
    }
}

/// Factor with latents [0, rank_a) loading on block A and the rest on block B.
inline Tensor make_factor(Rng& rng, const Blocks& bl, double scale) {
    Tensor f({bl.d, bl.rank});
    const std::size_t rank_b = bl.rank - bl.rank_a;
    std::normal_distribution<double> na(0.0, scale / std::sqrt(static_cast<double>(bl.rank_a)));
    std::normal_distribution<double> nb(0.0, scale / std::sqrt(static_cast<double>(rank_b)));
    for (std::size_t i = 0; i < bl.a_end; ++i) {
        for (std::size_t j = 0; j < bl.rank_a; ++j) f.at(i, j) = na(rng);
    }
    for (std::size_t i = bl.a_end; i < bl.b_end; ++i) {
        for (std::size_t j = bl.rank_a; j < bl.rank; ++j) f.at(i, j) = nb(rng);
    }
    return f;
}

inline std::size_t argmax_label(const Tensor& map, std::span<const double> x) {
    std::size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < map.rows(); ++v) {
        double s = 0.0;
        auto row = map.row(v);
        for (std::size_t i = 0; i < x.size(); ++i) s += row[i] * x[i];
        if (s > best_v) {
            best_v = s;
            best = v;
        }
    }
    return best;
}

inline void draw_input(const CategoryModel& m, Rng& rng, std::span<double> out) {
    std::normal_distribution<double> n(0.0, 1.0);
    const std::size_t r = m.factor.cols();
    std::vector<double> z(r);
    for (double& v : z) v = n(rng);
    for (std::size_t i = 0; i < out.size(); ++i) {
        double s = m.mean[i];
        for (std::size_t j = 0; j < r; ++j) s += m.factor.at(i, j) * z[j];
        out[i] = s;
    }
}

inline std::vector<CategoryModel> make_models(const ConflictDatasetConfig& cfg, Rng& rng) {
    const Blocks bl = blocks_for(cfg.d);
    const std::size_t V = cfg.vocab;
    const std::size_t C = cfg.categories;

    Tensor common_factor = make_factor(rng, bl, 1.0);
    Tensor shared_map({V, cfg.d});
    fill_gaussian(shared_map, rng, 0, bl.b_end, 1.0);
    Tensor q_a({V, cfg.d});
    fill_gaussian(q_a, rng, 0, bl.a_end, 1.0);

    std::vector<Tensor> q(C, Tensor({V, cfg.d}));
    for (std::size_t c = 0; c < std::min<std::size_t>(C, 2); ++c) {
        const double sign = c == 0 ? 1.0 : -1.0;
        for (std::size_t i = 0; i < q_a.size(); ++i) q[c][i] = sign * q_a[i];
        fill_gaussian(q[c], rng, bl.a_end, bl.b_end, 0.5);
    }
    for (std::size_t c = 2; c < C; ++c) {
        for (std::size_t i = 0; i < q[c].size(); ++i) q[c][i] = 0.5 * (q[0][i] + q[1][i]);
        Tensor ind({V, cfg.d});
        fill_gaussian(ind, rng, 0, bl.b_end, 0.5);
        for (std::size_t i = 0; i < ind.size(); ++i) q[c][i] += ind[i];
    }

    Tensor profile({cfg.d});
    {
        std::normal_distribution<double> n(0.0, 1.0);
        double norm = 0.0;
        for (std::size_t i = bl.b_end; i < bl.d; ++i) {
            profile[i] = n(rng);
            norm += profile[i] * profile[i];
        }
        norm = std::sqrt(norm);
        for (std::size_t i = bl.b_end; i < bl.d; ++i) profile[i] *= cfg.common_scale / norm;
    }

    std::vector<CategoryModel> models;
    for (std::size_t c = 0; c < C; ++c) {
        CategoryModel m{Tensor({cfg.d}), common_factor, Tensor({V, cfg.d})};
        Tensor own = make_factor(rng, bl, cfg.factor_spread);
        for (std::size_t i = 0; i < own.size(); ++i) m.factor[i] += own[i];
        const double offset = cfg.signature_scale * category_offset(c, C);
        for (std::size_t i = 0; i < cfg.d; ++i) m.mean[i] = profile[i] + offset;
        for (std::size_t i = 0; i < m.target_map.size(); ++i) {
            m.target_map[i] = (1.0 - cfg.alpha) * shared_map[i] + cfg.alpha * q[c][i];
        }
        center_rows(m.target_map, 0, bl.a_end);
        center_rows(m.target_map, bl.a_end, bl.b_end);
        models.push_back(std::move(m));
    }
    return models;
}

} // namespace detail

/// Generates the corpus. Map construction is redrawn (up to 64 attempts) until
/// every category's label frequencies lie in [5%, 60%]; the attempt count is
/// recorded on the dataset.
inline ConflictDataset make_dataset(const ConflictDatasetConfig& cfg) {
    cfg.validate();
    constexpr std::size_t max_attempts = 64;
    const std::size_t C = cfg.categories;
    const std::size_t n = cfg.n_per_category;

    ConflictDataset best;
    double best_margin = -std::numeric_limits<double>::infinity();
    for (std::size_t attempt = 0; attempt < max_attempts; ++attempt) {
        Rng rng = make_rng(cfg.seed, Stream::data_maps, attempt);
        ConflictDataset ds;
        ds.config = cfg;
        ds.models = detail::make_models(cfg, rng);
        ds.readout = Tensor({cfg.vocab, cfg.out_dim});
        detail::fill_gaussian(ds.readout, rng, 0, cfg.out_dim, 1.0 / std::sqrt(static_cast<double>(cfg.out_dim)));
        ds.inputs = Tensor({C * n, cfg.d});
        ds.labels.resize(C * n);
        ds.categories.resize(C * n);

        Rng sample_rng = make_rng(cfg.seed, Stream::data_samples, attempt);
        double margin = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < C; ++c) {
            std::vector<std::size_t> hist(cfg.vocab, 0);
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t row = c * n + i;
                detail::draw_input(ds.models[c], sample_rng, ds.inputs.row(row));
                ds.labels[row] = detail::argmax_label(ds.models[c].target_map, ds.inputs.row(row));
                ds.categories[row] = c;
                ++hist[ds.labels[row]];
            }
            for (std::size_t h : hist) {
                const double f = static_cast<double>(h) / static_cast<double>(n);
                margin = std::min({margin, f - 0.05, 0.60 - f});
            }
        }
        ds.construction_attempts = attempt + 1;
        if (margin >= 0.0) return ds;
        if (margin > best_margin) {
            best_margin = margin;
            best = std::move(ds);
        }
    }
    best.construction_attempts = max_attempts;
    return best;
}

/// Label histogram of one category.
inline std::vector<std::size_t> label_histogram(const ConflictDataset& ds, std::size_t category) {
    std::vector<std::size_t> hist(ds.config.vocab, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.categories[i] == category) ++hist[ds.labels[i]];
    }
    return hist;
}

/// Uniform draw with replacement, from one category or from the whole corpus.
inline Batch sample_batch(const ConflictDataset& ds, std::optional<std::size_t> category, std::size_t n,
                          std::uint64_t seed) {
    if (n < 1) throw ConfigError("sample_batch: n must be >= 1");
    if (category && *category >= ds.config.categories) {
        throw ConfigError("sample_batch: unknown category " + std::to_string(*category));
    }
    const std::size_t per = ds.config.n_per_category;
    Rng rng = make_rng(seed, Stream::batch);
    std::uniform_int_distribution<std::size_t> pick(0, category ? per - 1 : ds.size() - 1);
    Batch b{Tensor({n, ds.config.d}), std::vector<std::size_t>(n), std::vector<std::size_t>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t row = category ? *category * per + pick(rng) : pick(rng);
        std::copy_n(ds.inputs.row(row).data(), ds.config.d, b.x.row(i).data());
        b.labels[i] = ds.labels[row];
        b.categories[i] = ds.categories[row];
    }
    return b;
}

/// Fresh samples from a category's generative model, disjoint from the stored corpus.
inline Batch holdout_batch(const ConflictDataset& ds, std::size_t category, std::size_t n, std::uint64_t seed) {
    if (category >= ds.config.categories) {
        throw ConfigError("holdout_batch: unknown category " + std::to_string(category));
    }
    Rng rng = make_rng(seed, Stream::holdout, category);
    Batch b{Tensor({n, ds.config.d}), std::vector<std::size_t>(n), std::vector<std::size_t>(n, category)};
    for (std::size_t i = 0; i < n; ++i) {
        detail::draw_input(ds.models[category], rng, b.x.row(i));
        b.labels[i] = detail::argmax_label(ds.models[category].target_map, b.x.row(i));
    }
    return b;
}

/// Logits R * adapter(x) on a tape. The readout is recorded as a constant and
/// never receives gradient.
inline Var logits_on_tape(GradTape& tape, const AdapterOutput& out, const Tensor& readout) {
    const Tensor& y = tape.value(out.output);
    if (y.cols() != readout.cols()) {
        throw ShapeError("adapter output " + shape_str(y.shape()) + " does not match readout " +
                         shape_str(readout.shape()));
    }
    return ad::linear(tape, out.output, tape.constant(readout));
}

inline Tensor model_logits(const Adapter& adapter, const Tensor& readout, const Tensor& x) {
    GradTape tape;
    ParamBinder bind(tape, false);
    AdapterOutput out = forward(tape, bind, adapter, tape.constant(x));
    return tape.value(logits_on_tape(tape, out, readout));
}

} // namespace moeadapter
