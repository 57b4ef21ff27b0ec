// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace moeadapter;
using namespace moeadapter::testing;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

RoutingRecord one_hot(std::size_t n, std::size_t e) {
    RoutingRecord r;
    r.logits.assign(n, 0.0);
    r.logits[e] = 1.0;
    r.gates.assign(n, 0.0);
    r.gates[e] = 1.0;
    r.selected = {e};
    return r;
}

/// Aux loss as a function of the gate weights alone.
DifferentiableFn aux_of_gate(Tensor x, std::size_t n, std::size_t k, ImportanceSource src) {
    return [x = std::move(x), n, k, src](const std::vector<Tensor>& p, std::vector<Tensor>* grads) {
        MoEAdapter m;
        m.config.d = x.cols();
        m.config.n_experts = n;
        m.config.top_k = k;
        m.gate.weight = p[0];
        GradTape tape;
        ParamBinder bind(tape, grads != nullptr);
        AdapterOutput out = route_on_tape(tape, bind, m, tape.constant(x));
        const BalanceStats st = balance_stats(out.routing, n, k, src);
        Var aux = aux_loss_on_tape(tape, out, st, src);
        REQUIRE_THAT(tape.scalar(aux), WithinRel(st.aux_loss, 1e-12));
        if (grads) {
            tape.backward(aux);
            *grads = {bind.grad(m.gate.weight)};
        }
        return tape.scalar(aux);
    };
}

std::vector<RoutingRecord> random_routing(Rng& rng, std::size_t batch, std::size_t d, std::size_t n, std::size_t k,
                                          double scale) {
    LinearParams gate = LinearParams::zeros(n, d);
    gate.weight = random_tensor(rng, {n, d}, scale);
    return route(gate, random_tensor(rng, {batch, d}), k);
}

} // namespace

TEST_CASE("task_loss", "[objectives]") {
    CHECK_THAT(task_loss(Tensor({1, 10}), std::vector<std::size_t>{3}), WithinRel(std::log(10.0), 1e-15));
    Tensor sat({1, 5});
    sat.at(0, 2) = 50.0;
    CHECK(task_loss(sat, std::vector<std::size_t>{2}) < 1e-20);
    CHECK(task_loss(sat, std::vector<std::size_t>{2}) >= 0.0);
    CHECK_THAT(task_loss(Tensor::matrix({{1, 0}}), std::vector<std::size_t>{1}),
               WithinAbs(1.3132616875182228, 1e-15));
    CHECK_THROWS(task_loss(Tensor::matrix({{1, 0}}), std::vector<std::size_t>{2}));
}

TEST_CASE("task_loss equals ln V exactly on row-constant logits", "[objectives][property]") {
    Rng rng = make_rng(3, Stream::init);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t v = 2 + static_cast<std::size_t>(trial % 9);
        Tensor z = random_tensor(rng, {4, v});
        std::vector<std::size_t> y(4);
        for (std::size_t b = 0; b < 4; ++b) y[b] = (b + static_cast<std::size_t>(trial)) % v;
        const double loss = task_loss(z, y);
        CHECK(loss >= 0.0);
        CHECK(std::abs(loss - std::log(static_cast<double>(v))) > 1e-9);
        for (std::size_t b = 0; b < 4; ++b) {
            for (double& c : z.row(b)) c = z.at(b, 0);
        }
        CHECK_THAT(task_loss(z, y), WithinAbs(std::log(static_cast<double>(v)), 1e-12));
    }
}

TEST_CASE("balance_stats examples", "[objectives]") {
    const std::vector<RoutingRecord> split{one_hot(2, 0), one_hot(2, 0), one_hot(2, 1), one_hot(2, 1)};
    const BalanceStats a = balance_stats(split, 2, 1);
    CHECK(a.importance == std::vector<double>{0.5, 0.5});
    CHECK(a.load == std::vector<double>{0.5, 0.5});
    CHECK(a.aux_loss == 1.0);
    CHECK(a.tokens == 4);

    const std::vector<RoutingRecord> collapse(16, one_hot(8, 0));
    const BalanceStats b = balance_stats(collapse, 8, 1);
    CHECK(b.importance[0] == 1.0);
    CHECK(b.load[0] == 1.0);
    CHECK(b.aux_loss == 8.0);

    // Uniform: every token routes to all experts with equal gates (k = N), or
    // tokens rotate over disjoint k-subsets with equal gates.
    for (std::size_t n : {2u, 4u, 8u}) {
        for (std::size_t k = 1; k <= n; ++k) {
            if (n % k != 0) continue;
            std::vector<RoutingRecord> recs;
            for (std::size_t start = 0; start < n; start += k) {
                RoutingRecord r;
                r.logits.assign(n, 0.0);
                r.gates.assign(n, 0.0);
                for (std::size_t e = start; e < start + k; ++e) {
                    r.selected.push_back(e);
                    r.gates[e] = 1.0 / static_cast<double>(k);
                }
                recs.push_back(r);
            }
            CHECK_THAT(balance_stats(recs, n, k).aux_loss, WithinAbs(static_cast<double>(k), 1e-12));
        }
    }
    CHECK_THROWS_AS(balance_stats(std::vector<RoutingRecord>{}, 2, 1), ConfigError);
    CHECK_THROWS_AS(balance_stats(split, 3, 1), ShapeError);
}

TEST_CASE("joint_loss", "[objectives]") {
    BalanceStats st;
    st.aux_loss = 1.5;
    CHECK(joint_loss(2.0, st, LossConfig{0.0, 8}) == 2.0);
    CHECK_THAT(joint_loss(2.0, st, LossConfig{0.01, 8}), WithinAbs(2.015, 1e-15));
    CHECK_THROWS_AS((LossConfig{-1.0, 8}.validate()), ConfigError);
    CHECK_THROWS_AS((LossConfig{0.1, 1}.validate()), ConfigError);
}

TEST_CASE("balance_stats invariants", "[objectives][property]") {
    Rng rng = make_rng(11, Stream::init);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + static_cast<std::size_t>(trial % 8);
        const std::size_t k = 1 + static_cast<std::size_t>(trial / 8) % n;
        const auto recs = random_routing(rng, 1 + static_cast<std::size_t>(trial % 13), 5, n, k, 2.0);
        for (ImportanceSource src : {ImportanceSource::post_topk, ImportanceSource::pre_topk}) {
            const BalanceStats st = balance_stats(recs, n, k, src);
            CHECK_THAT(std::accumulate(st.importance.begin(), st.importance.end(), 0.0), WithinAbs(1.0, 1e-10));
            CHECK_THAT(std::accumulate(st.load.begin(), st.load.end(), 0.0),
                       WithinAbs(static_cast<double>(k), 1e-10));
            for (std::size_t e = 0; e < n; ++e) {
                CHECK(st.importance[e] >= 0.0);
                CHECK(st.importance[e] <= 1.0);
                CHECK(st.load[e] >= 0.0);
                CHECK(st.load[e] <= 1.0);
            }
        }
        if (k == 1) {
            const double aux = balance_stats(recs, n, k).aux_loss;
            CHECK(aux >= 1.0 - 1e-12);
            CHECK(aux <= static_cast<double>(n) + 1e-12);
        }
    }
}

TEST_CASE("aux loss permutation symmetry", "[objectives][property]") {
    Rng rng = make_rng(12, Stream::init);
    for (int trial = 0; trial < 50; ++trial) {
        auto recs = random_routing(rng, 9, 4, 6, 2, 1.5);
        const BalanceStats base = balance_stats(recs, 6, 2);

        std::shuffle(recs.begin(), recs.end(), rng);
        CHECK_THAT(balance_stats(recs, 6, 2).aux_loss, WithinRel(base.aux_loss, 1e-12));

        std::vector<std::size_t> perm(6);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<RoutingRecord> moved;
        for (const auto& r : recs) {
            RoutingRecord q;
            q.logits.assign(6, 0.0);
            q.gates.assign(6, 0.0);
            for (std::size_t e = 0; e < 6; ++e) {
                q.logits[perm[e]] = r.logits[e];
                q.gates[perm[e]] = r.gates[e];
            }
            for (std::size_t e : r.selected) q.selected.push_back(perm[e]);
            std::sort(q.selected.begin(), q.selected.end());
            moved.push_back(q);
        }
        const BalanceStats p = balance_stats(moved, 6, 2);
        CHECK_THAT(p.aux_loss, WithinRel(base.aux_loss, 1e-12));
        for (std::size_t e = 0; e < 6; ++e) {
            CHECK_THAT(p.importance[perm[e]], WithinAbs(base.importance[e], 1e-15));
            CHECK(p.load[perm[e]] == base.load[e]);
        }
    }
}

TEST_CASE("aux loss gradient through the gate", "[objectives][grad_check]") {
    // A gate row whose expert no token selects has an exactly zero analytic
    // gradient, where central differences only see O(1e-11) roundoff. A batch
    // large enough to route every expert keeps the check well conditioned.
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng = make_rng(seed, Stream::init, 21);
        const Tensor x = random_tensor(rng, {64, 4});
        for (ImportanceSource src : {ImportanceSource::post_topk, ImportanceSource::pre_topk}) {
            const Tensor w = random_tensor(rng, {5, 4});
            LinearParams gate = LinearParams::zeros(5, 4);
            gate.weight = w;
            const BalanceStats st = balance_stats(route(gate, x, 2), 5, 2);
            REQUIRE(std::count(st.load.begin(), st.load.end(), 0.0) == 0);
            const auto r = grad_check(aux_of_gate(x, 5, 2, src), {w});
            INFO("seed " << seed << " analytic " << r.analytic << " numeric " << r.numeric);
            CHECK(r.max_rel_error < 1e-4);
        }
    }
}

TEST_CASE("lambda changes gate gradients", "[objectives]") {
    const AdapterConfig c = small_moe(6, 4, 2, 5);
    const Adapter a = init_params(c, 3);
    Rng rng = make_rng(3, Stream::init, 1);
    const Tensor x = random_tensor(rng, {12, 6});
    const Tensor readout = random_tensor(rng, {5, 6});
    std::vector<std::size_t> y(12);
    for (std::size_t b = 0; b < 12; ++b) y[b] = b % 5;

    const auto gate_grad = [&](double lambda) {
        const auto f = adapter_objective(a, x, JointHead{readout, y, LossConfig{lambda, 5}});
        std::vector<Tensor> g;
        f(param_values(a), &g);
        return g[2]; // ln_in.gamma, ln_in.beta, gate.weight
    };
    REQUIRE(named_params(a)[2].name == "gate.weight");
    const Tensor g0 = gate_grad(0.0), g1 = gate_grad(0.01);
    CHECK_FALSE(bit_equal(g0, g1));
    CHECK(bit_equal(g0, gate_grad(0.0)));

    const auto f = adapter_objective(a, x, JointHead{readout, y, LossConfig{0.5, 5}});
    Adapter r = a;
    randomize_params(r, rng);
    CHECK(grad_check(f, param_values(r)).max_rel_error < 1e-4);
}
