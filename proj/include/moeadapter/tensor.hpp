// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moeadapter/error.hpp"

namespace moeadapter {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

/// Dense row-major array of doubles with rank 1..3.
///
/// Kernels treat every tensor as a matrix of `rows() x cols()`, where `cols()`
/// is the last axis and `rows()` folds all leading axes. A rank-1 tensor is a
/// single row.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        check_shape();
        data_.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
        check_shape();
        if (data_.size() != shape_numel(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
        }
    }

    static Tensor vector(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({n}, std::move(values));
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> values;
        values.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged matrix literal");
            values.insert(values.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(values));
    }

    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return shape_.empty(); }
    [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    [[nodiscard]] std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
    [[nodiscard]] std::size_t rows() const noexcept {
        const std::size_t c = cols();
        return c ? data_.size() / c : 0;
    }

    [[nodiscard]] std::span<double> values() noexcept { return data_; }
    [[nodiscard]] std::span<const double> values() const noexcept { return data_; }
    [[nodiscard]] double* data() noexcept { return data_.data(); }
    [[nodiscard]] const double* data() const noexcept { return data_.data(); }

    [[nodiscard]] std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols(), cols()};
    }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }
    double& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    [[nodiscard]] double at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    [[nodiscard]] bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    [[nodiscard]] Tensor reshaped(Shape shape) const {
        return Tensor(std::move(shape), data_);
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    void check_shape() const {
        if (shape_.empty() || shape_.size() > 3) {
            throw ShapeError("tensor rank must be 1..3, got shape " + shape_str(shape_));
        }
        for (auto d : shape_) {
            if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

/// Bitwise equality, distinguishing -0.0 from 0.0 and comparing NaN payloads.
inline bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

inline void ensure_finite(const Tensor& t, const char* where) {
    if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + where);
}

/// Affine map y = W x (+ b). `weight` is out_dim x in_dim.
struct LinearParams {
    Tensor weight;
    std::optional<Tensor> bias;

    static LinearParams zeros(std::size_t out_dim, std::size_t in_dim, bool with_bias = false) {
        LinearParams p{Tensor({out_dim, in_dim}), std::nullopt};
        if (with_bias) p.bias = Tensor({out_dim});
        return p;
    }

    [[nodiscard]] std::size_t out_dim() const { return weight.dim(0); }
    [[nodiscard]] std::size_t in_dim() const { return weight.dim(1); }

    void validate() const {
        if (weight.rank() != 2) throw ShapeError("linear weight must be rank 2, got " + shape_str(weight.shape()));
        if (bias && bias->shape() != Shape{out_dim()}) {
            throw ShapeError("linear bias shape " + shape_str(bias->shape()) + " does not match out_dim " +
                             std::to_string(out_dim()));
        }
    }

    friend bool operator==(const LinearParams&, const LinearParams&) = default;
};

struct LayerNormParams {
    Tensor gamma;
    Tensor beta;
    double epsilon = 1e-5;

    static LayerNormParams identity(std::size_t dim, double epsilon = 1e-5) {
        return {Tensor({dim}, 1.0), Tensor({dim}, 0.0), epsilon};
    }

    [[nodiscard]] std::size_t dim() const { return gamma.size(); }

    void validate() const {
        if (!(epsilon > 0.0)) throw ConfigError("layer_norm.epsilon must be > 0");
        if (gamma.shape() != beta.shape() || gamma.rank() != 1) {
            throw ShapeError("layer norm gamma/beta shapes " + shape_str(gamma.shape()) + " and " +
                             shape_str(beta.shape()) + " must be equal rank-1");
        }
    }

    friend bool operator==(const LayerNormParams&, const LayerNormParams&) = default;
};

} // namespace moeadapter
