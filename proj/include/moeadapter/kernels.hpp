// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

// Dense forward and backward kernels. All reductions run in a fixed
// sequential order so results are bit-reproducible.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "moeadapter/tensor.hpp"

namespace moeadapter {

inline double sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor silu(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * sigmoid(x[i]);
    ensure_finite(out, "silu");
    return out;
}

/// d/dx [x sigmoid(x)] = sigmoid(x) (1 + x (1 - sigmoid(x)))
inline Tensor silu_backward(const Tensor& x, const Tensor& grad_out) {
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = sigmoid(x[i]);
        dx[i] = grad_out[i] * s * (1.0 + x[i] * (1.0 - s));
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis, biased variance.

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double epsilon) {
    const std::size_t n = x.cols();
    if (gamma.size() != n || beta.size() != n) {
        throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " vs gamma " + shape_str(gamma.shape()));
    }
    Tensor out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto y = out.row(r);
        double mean = 0.0;
        for (double v : in) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : in) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + epsilon);
        for (std::size_t c = 0; c < n; ++c) y[c] = (in[c] - mean) * inv * gamma[c] + beta[c];
    }
    ensure_finite(out, "layer_norm");
    return out;
}

inline Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
    p.validate();
    return layer_norm(x, p.gamma, p.beta, p.epsilon);
}

struct LayerNormGrads {
    Tensor input;
    Tensor gamma;
    Tensor beta;
};

inline LayerNormGrads layer_norm_backward(const Tensor& x, const Tensor& gamma, double epsilon,
                                          const Tensor& grad_out) {
    const std::size_t n = x.cols();
    LayerNormGrads g{Tensor(x.shape()), Tensor({n}), Tensor({n})};
    std::vector<double> xhat(n), dxhat(n);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto gy = grad_out.row(r);
        auto dx = g.input.row(r);
        double mean = 0.0;
        for (double v : in) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : in) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + epsilon);
        double mean_dxhat = 0.0;
        double mean_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            xhat[c] = (in[c] - mean) * inv;
            dxhat[c] = gy[c] * gamma[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xhat[c];
            g.gamma[c] += gy[c] * xhat[c];
            g.beta[c] += gy[c];
        }
        mean_dxhat /= static_cast<double>(n);
        mean_dxhat_xhat /= static_cast<double>(n);
        for (std::size_t c = 0; c < n; ++c) dx[c] = inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Linear map. `weight` is out x in; rows of x are transformed independently.

inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias) {
    const std::size_t in = weight.dim(1);
    const std::size_t out_dim = weight.dim(0);
    if (x.cols() != in) {
        throw ShapeError("linear: input shape " + shape_str(x.shape()) + " incompatible with weight shape " +
                         shape_str(weight.shape()));
    }
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    Tensor out(out_shape);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double* xr = x.data() + r * in;
        double* yr = out.data() + r * out_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const double* w = weight.data() + o * in;
            double acc = 0.0;
            for (std::size_t i = 0; i < in; ++i) acc += w[i] * xr[i];
            yr[o] = bias ? acc + (*bias)[o] : acc;
        }
    }
    ensure_finite(out, "linear");
    return out;
}

inline Tensor linear(const Tensor& x, const LinearParams& p) {
    p.validate();
    return linear(x, p.weight, p.bias ? &*p.bias : nullptr);
}

struct LinearGrads {
    Tensor input;
    Tensor weight;
    std::optional<Tensor> bias;
};

inline LinearGrads linear_backward(const Tensor& x, const Tensor& weight, bool has_bias, const Tensor& grad_out,
                                   bool need_input = true) {
    const std::size_t in = weight.dim(1);
    const std::size_t out_dim = weight.dim(0);
    LinearGrads g{need_input ? Tensor(x.shape()) : Tensor{}, Tensor(weight.shape()), std::nullopt};
    if (has_bias) g.bias = Tensor({out_dim});
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double* xr = x.data() + r * in;
        const double* gr = grad_out.data() + r * out_dim;
        double* dxr = need_input ? g.input.data() + r * in : nullptr;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const double go = gr[o];
            if (go == 0.0) continue;
            const double* w = weight.data() + o * in;
            double* dw = g.weight.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) dw[i] += go * xr[i];
            if (dxr) {
                for (std::size_t i = 0; i < in; ++i) dxr[i] += go * w[i];
            }
            if (has_bias) (*g.bias)[o] += go;
        }
    }
    return g;
}

inline LinearGrads linear_backward(const Tensor& x, const LinearParams& p, const Tensor& grad_out) {
    return linear_backward(x, p.weight, p.bias.has_value(), grad_out);
}

// ---------------------------------------------------------------------------
// Masked logits, top-k and softmax.

/// Logits plus a per-entry keep flag. A cleared flag is the -inf sentinel:
/// the value is ignored and the softmax weight is exactly zero.
struct MaskedLogits {
    Tensor values;
    std::vector<std::uint8_t> keep;

    static MaskedLogits all(Tensor values) {
        std::vector<std::uint8_t> keep(values.size(), 1);
        return {std::move(values), std::move(keep)};
    }

    [[nodiscard]] bool masked(std::size_t r, std::size_t c) const { return keep[r * values.cols() + c] == 0; }

    [[nodiscard]] std::size_t kept_in_row(std::size_t r) const {
        const std::size_t n = values.cols();
        return static_cast<std::size_t>(std::count(keep.begin() + static_cast<std::ptrdiff_t>(r * n),
                                                   keep.begin() + static_cast<std::ptrdiff_t>((r + 1) * n), 1));
    }

    friend bool operator==(const MaskedLogits&, const MaskedLogits&) = default;
};

/// Indices of the k largest kept entries of one row, ascending by index.
/// Ties break toward the lower index.
inline std::vector<std::size_t> topk_indices(std::span<const double> row, std::span<const std::uint8_t> keep,
                                             std::size_t k) {
    std::vector<std::size_t> idx;
    idx.reserve(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) {
        if (keep.empty() || keep[i]) idx.push_back(i);
    }
    if (k < 1 || k > idx.size()) {
        throw ConfigError("top_k must be in [1, " + std::to_string(idx.size()) + "], got " + std::to_string(k));
    }
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline MaskedLogits topk_mask(const MaskedLogits& s, std::size_t k) {
    const std::size_t n = s.values.cols();
    MaskedLogits out{s.values, std::vector<std::uint8_t>(s.keep.size(), 0)};
    for (std::size_t r = 0; r < s.values.rows(); ++r) {
        const std::span<const std::uint8_t> keep(s.keep.data() + r * n, n);
        for (std::size_t i : topk_indices(s.values.row(r), keep, k)) out.keep[r * n + i] = 1;
    }
    return out;
}

inline MaskedLogits topk_mask(const Tensor& s, std::size_t k) {
    ensure_finite(s, "topk_mask input");
    return topk_mask(MaskedLogits::all(s), k);
}

inline Tensor softmax(const MaskedLogits& s) {
    const std::size_t n = s.values.cols();
    Tensor out(s.values.shape());
    for (std::size_t r = 0; r < s.values.rows(); ++r) {
        auto in = s.values.row(r);
        auto y = out.row(r);
        const std::uint8_t* keep = s.keep.data() + r * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < n; ++c) {
            if (keep[c]) mx = std::max(mx, in[c]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw NumericError("softmax: empty support in row " + std::to_string(r));
        }
        double sum = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            y[c] = keep[c] ? std::exp(in[c] - mx) : 0.0;
            sum += y[c];
        }
        for (std::size_t c = 0; c < n; ++c) y[c] /= sum;
    }
    ensure_finite(out, "softmax");
    return out;
}

/// Plain softmax. Literal -inf entries are treated as masked.
inline Tensor softmax(const Tensor& s) {
    MaskedLogits m = MaskedLogits::all(s);
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == -std::numeric_limits<double>::infinity()) {
            m.keep[i] = 0;
            m.values[i] = 0.0;
        } else if (!std::isfinite(s[i])) {
            throw NumericError("softmax: non-finite logit");
        }
    }
    return softmax(m);
}

/// Masked entries have probability 0 and therefore receive exactly zero gradient.
inline Tensor softmax_backward(const Tensor& probs, const Tensor& grad_out) {
    Tensor ds(probs.shape());
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        auto p = probs.row(r);
        auto g = grad_out.row(r);
        auto d = ds.row(r);
        double dot = 0.0;
        for (std::size_t c = 0; c < p.size(); ++c) dot += p[c] * g[c];
        for (std::size_t c = 0; c < p.size(); ++c) d[c] = p[c] * (g[c] - dot);
    }
    return ds;
}

} // namespace moeadapter
