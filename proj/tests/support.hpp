// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

// Shared helpers for the test binaries.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "moeadapter/moeadapter.hpp"

namespace moeadapter::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> n(0.0, scale);
    for (double& v : t.values()) v = n(rng);
    return t;
}

inline std::vector<Tensor> param_values(const Adapter& a) {
    std::vector<Tensor> out;
    for_each_param(a, [&](const std::string&, const Tensor& t) { out.push_back(t); });
    return out;
}

/// Randomizes every parameter, including LN affine terms, so gradient checks
/// do not sit at the gamma = 1, beta = 0 special point.
inline void randomize_params(Adapter& a, Rng& rng, double scale = 0.5) {
    std::normal_distribution<double> n(0.0, scale);
    for_each_param(a, [&](const std::string& name, Tensor& t) {
        const bool gamma = name.ends_with(".gamma");
        for (double& v : t.values()) v = (gamma ? 1.0 : 0.0) + n(rng);
    });
}

/// Wraps "forward the adapter on x, then `head`" as a DifferentiableFn over the
/// adapter's parameters in canonical order.
template <class Head>
DifferentiableFn adapter_objective(Adapter base, Tensor x, Head head) {
    return [base = std::move(base), x = std::move(x), head](const std::vector<Tensor>& params,
                                                            std::vector<Tensor>* grads) {
        Adapter a = base;
        std::vector<Tensor*> ptrs = mutable_params(a);
        for (std::size_t i = 0; i < ptrs.size(); ++i) *ptrs[i] = params[i];
        GradTape tape;
        ParamBinder bind(tape, grads != nullptr);
        AdapterOutput out = forward(tape, bind, a, tape.constant(x));
        Var root = head(tape, out, a);
        const double value = tape.scalar(root);
        if (grads) {
            tape.backward(root);
            grads->clear();
            for (Tensor* p : ptrs) grads->push_back(bind.grad(*p));
        }
        return value;
    };
}

/// Task cross-entropy through a frozen readout plus lambda * aux loss.
struct JointHead {
    Tensor readout;
    std::vector<std::size_t> targets;
    LossConfig loss;

    Var operator()(GradTape& tape, const AdapterOutput& out, const Adapter& a) const {
        Var task = ad::cross_entropy(tape, logits_on_tape(tape, out, readout), targets);
        const auto* m = std::get_if<MoEAdapter>(&a);
        if (m == nullptr || loss.lambda == 0.0) return task;
        const BalanceStats stats = balance_stats(out.routing, m->config.n_experts, m->config.top_k, loss.importance);
        return ad::axpby(tape, 1.0, task, loss.lambda, aux_loss_on_tape(tape, out, stats, loss.importance));
    }
};

/// Scalar <output, w> for a fixed random w.
struct ProjectionHead {
    Tensor weights;

    Var operator()(GradTape& tape, const AdapterOutput& out, const Adapter&) const {
        return ad::dot_const(tape, out.output, weights);
    }
};

inline AdapterConfig small_moe(std::size_t d, std::size_t n, std::size_t k, std::size_t hidden,
                               HeadVariant head = HeadVariant::norm_mlp) {
    AdapterConfig c;
    c.kind = AdapterKind::moe;
    c.d = d;
    c.out_dim = d;
    c.n_experts = n;
    c.top_k = k;
    c.expert_hidden = hidden;
    c.agg_hidden = 2 * d;
    c.head = head;
    c.gate_init_scale = 1.0;
    return c;
}

inline AdapterConfig small_dense(std::size_t d, std::size_t hidden) {
    AdapterConfig c;
    c.kind = AdapterKind::dense;
    c.d = d;
    c.out_dim = d;
    c.dense_hidden = hidden;
    return c;
}

/// Worst grad_check error over every tape primitive on random shapes with dims in [1, 8].
inline double primitive_grad_error(std::uint64_t seed) {
    Rng rng = make_rng(seed, Stream::init, 77);
    std::uniform_int_distribution<std::size_t> dim(1, 8);
    const std::size_t b = dim(rng), n = dim(rng), m = dim(rng);
    double worst = 0.0;
    const auto check = [&](auto build, std::vector<Tensor> params) {
        worst = std::max(worst, grad_check(tape_objective(build), std::move(params)).max_rel_error);
    };
    const Tensor w_bm = random_tensor(rng, {b, m});
    const Tensor w_bn = random_tensor(rng, {b, n});

    check([&](GradTape& t, std::vector<Var>& v) { return ad::dot_const(t, ad::linear(t, v[0], v[1], v[2]), w_bm); },
          {random_tensor(rng, {b, n}), random_tensor(rng, {m, n}), random_tensor(rng, {m})});
    check([&](GradTape& t, std::vector<Var>& v) {
        return ad::dot_const(t, ad::layer_norm(t, v[0], v[1], v[2], 1e-5), w_bn);
    }, {random_tensor(rng, {b, n}), random_tensor(rng, {n}), random_tensor(rng, {n})});
    check([&](GradTape& t, std::vector<Var>& v) { return ad::dot_const(t, ad::silu(t, v[0]), w_bn); },
          {random_tensor(rng, {b, n}, 3.0)});

    std::vector<std::uint8_t> keep = topk_mask(random_tensor(rng, {b, n}), std::max<std::size_t>(1, n / 2)).keep;
    check([&](GradTape& t, std::vector<Var>& v) { return ad::dot_const(t, ad::masked_softmax(t, v[0], keep), w_bn); },
          {random_tensor(rng, {b, n})});

    std::vector<std::size_t> rows;
    std::uniform_int_distribution<std::size_t> pick(0, b - 1);
    for (std::size_t i = 0; i < b + 1; ++i) rows.push_back(pick(rng));
    const Tensor w_rows = random_tensor(rng, {rows.size(), n});
    check([&](GradTape& t, std::vector<Var>& v) { return ad::dot_const(t, ad::gather_rows(t, v[0], rows), w_rows); },
          {random_tensor(rng, {b, n})});

    // Two experts on overlapping row subsets.
    const std::vector<std::size_t> r0{0}, r1 = b > 1 ? std::vector<std::size_t>{0, b - 1} : std::vector<std::size_t>{0};
    check([&](GradTape& t, std::vector<Var>& v) {
        std::vector<ad::ExpertSlice> slices{{0, r0, v[1]}, {1, r1, v[2]}};
        return ad::dot_const(t, ad::combine_experts(t, v[0], slices, b, m), w_bm);
    }, {random_tensor(rng, {b, 2}), random_tensor(rng, {r0.size(), m}), random_tensor(rng, {r1.size(), m})});

    check([&](GradTape& t, std::vector<Var>& v) {
        return ad::dot_const(t, ad::axpby(t, 0.7, v[0], -1.3, ad::add(t, v[0], v[1])), w_bn);
    }, {random_tensor(rng, {b, n}), random_tensor(rng, {b, n})});
    check([&](GradTape& t, std::vector<Var>& v) { return ad::sum(t, ad::silu(t, v[0])); },
          {random_tensor(rng, {b, n})});

    std::vector<std::size_t> targets(b);
    std::uniform_int_distribution<std::size_t> cls(0, n - 1);
    for (auto& y : targets) y = cls(rng);
    check([&](GradTape& t, std::vector<Var>& v) { return ad::cross_entropy(t, v[0], targets); },
          {random_tensor(rng, {b, n}, 2.0)});

    std::vector<double> wcol(n);
    for (double& w : wcol) w = std::normal_distribution<double>(0.0, 1.0)(rng);
    check([&](GradTape& t, std::vector<Var>& v) {
        return ad::weighted_column_mean(t, ad::masked_softmax(t, v[0], std::vector<std::uint8_t>(b * n, 1)), wcol);
    }, {random_tensor(rng, {b, n})});
    return worst;
}

/// Fresh empty directory under the system temp directory.
inline std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("moeadapter-test-" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace moeadapter::testing
