// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "support.hpp"

using namespace moeadapter;
using namespace moeadapter::testing;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ConflictDataset tiny_data(double alpha = 1.0, std::uint64_t seed = 0) {
    ConflictDatasetConfig c;
    c.d = 8;
    c.out_dim = 8;
    c.vocab = 4;
    c.n_per_category = 100;
    c.alpha = alpha;
    c.seed = seed;
    return make_dataset(c);
}

OptimConfig short_schedule(std::size_t total) {
    OptimConfig o;
    o.warmup_steps = 5;
    o.stable_steps = 10;
    o.decay_steps = 5;
    o.total_steps = total;
    o.batch_size = 16;
    return o;
}

bool same_params(const Adapter& a, const Adapter& b) {
    const auto pa = param_values(a), pb = param_values(b);
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (!bit_equal(pa[i], pb[i])) return false;
    }
    return true;
}

} // namespace

TEST_CASE("wsd_lr", "[trainer]") {
    OptimConfig c = OptimConfig::full_scale();
    c.stable_steps = 100;
    c.decay_steps = 50;
    CHECK_THAT(wsd_lr(9, c), WithinRel(5e-6, 1e-15));
    CHECK_THAT(wsd_lr(0, c), WithinRel(5e-7, 1e-15));
    CHECK(wsd_lr(19, c) == c.lr_peak);
    for (std::size_t s = 20; s < 120; ++s) CHECK(wsd_lr(s, c) == c.lr_peak);
    CHECK(wsd_lr(169, c) == c.lr_min);
    CHECK(wsd_lr(500, c) == c.lr_min);
    for (std::size_t s = 121; s < 170; ++s) CHECK(wsd_lr(s, c) < wsd_lr(s - 1, c));

    OptimConfig bad;
    bad.beta1 = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = {};
    bad.lr_min = bad.lr_peak * 2;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("adamw_step closed forms", "[trainer]") {
    OptimConfig c;
    c.weight_decay = 0.0;
    Tensor p = Tensor::vector({1.0, -2.0, 0.5});
    std::vector<Tensor*> params{&p};
    AdamState st = AdamState::zeros_like(params);
    const std::vector<Tensor> g{Tensor::vector({0.3, -7.0, 1e-3})};
    adamw_step(params, g, st, 1e-2, c);
    CHECK_THAT(p[0], WithinAbs(1.0 - 1e-2, 1e-9));
    CHECK_THAT(p[1], WithinAbs(-2.0 + 1e-2, 1e-9));
    CHECK_THAT(p[2], WithinAbs(0.5 - 1e-2, 1e-7));
    CHECK(st.step == 1);

    Tensor q = Tensor::vector({1.0, -2.0});
    std::vector<Tensor*> qp{&q};
    AdamState qs = AdamState::zeros_like(qp);
    const std::vector<Tensor> zero{Tensor({2})};
    adamw_step(qp, zero, qs, 1e-2, c);
    CHECK(q == Tensor::vector({1.0, -2.0}));

    c.weight_decay = 0.1;
    adamw_step(qp, zero, qs, 1e-2, c);
    CHECK(q[0] == 1.0 - 1e-2 * 0.1 * 1.0);
    CHECK(q[1] == -2.0 - 1e-2 * 0.1 * -2.0);

    // Masked parameters skip decay.
    Tensor r = Tensor::vector({3.0});
    std::vector<Tensor*> rp{&r};
    AdamState rs = AdamState::zeros_like(rp);
    const std::vector<std::uint8_t> mask{0};
    adamw_step(rp, std::vector<Tensor>{Tensor({1})}, rs, 1e-2, c, mask);
    CHECK(r[0] == 3.0);

    const std::vector<Tensor> nan{Tensor::vector({std::nan(""), 0.0})};
    const Tensor before = q;
    CHECK_THROWS_AS(adamw_step(qp, nan, qs, 1e-2, c), NumericError);
    CHECK(bit_equal(q, before));
}

TEST_CASE("global norm clipping", "[trainer]") {
    std::vector<Tensor> g{Tensor::vector({3.0}), Tensor::vector({4.0})};
    CHECK(clip_global_norm(g, 1.0) == 5.0);
    CHECK_THAT(global_norm(g), WithinAbs(1.0, 1e-15));
    std::vector<Tensor> h{Tensor::vector({0.3})};
    clip_global_norm(h, 1.0);
    CHECK(h[0][0] == 0.3);
}

TEST_CASE("zero steps leave the initialization unchanged", "[trainer]") {
    const ConflictDataset ds = tiny_data();
    AdapterConfig cfg = small_moe(8, 4, 2, 4);
    OptimConfig o = short_schedule(0);
    const TrainResult r = train(cfg, LossConfig{0.01, 4}, ds, o);
    CHECK(r.log.steps.empty());
    CHECK(r.adapter == init_params(cfg, o.seed));
}

TEST_CASE("training is bit-deterministic", "[trainer]") {
    const ConflictDataset ds = tiny_data();
    for (const AdapterConfig& cfg : {small_moe(8, 4, 2, 4), small_dense(8, 12)}) {
        const TrainResult a = train(cfg, LossConfig{0.01, 4}, ds, short_schedule(20));
        const TrainResult b = train(cfg, LossConfig{0.01, 4}, ds, short_schedule(20));
        CHECK(a.log.steps == b.log.steps);
        CHECK(log_csv(a.log) == log_csv(b.log));
        CHECK(same_params(a.adapter, b.adapter));
        REQUIRE(a.log.steps.size() == 20);
        for (std::size_t s = 0; s < 20; ++s) {
            CHECK(a.log.steps[s].step == s);
            CHECK(a.log.steps[s].lr == wsd_lr(s, short_schedule(20)));
        }
        OptimConfig other = short_schedule(20);
        other.seed = 1;
        CHECK_FALSE(train(cfg, LossConfig{0.01, 4}, ds, other).log.steps == a.log.steps);
    }
}

TEST_CASE("log records", "[trainer]") {
    const ConflictDataset ds = tiny_data();
    const TrainResult r = train(small_moe(8, 4, 2, 4), LossConfig{0.01, 4}, ds, short_schedule(3));
    for (const auto& s : r.log.steps) {
        CHECK_THAT(s.joint_loss, WithinRel(s.task_loss + 0.01 * s.aux_loss, 1e-12));
        CHECK(s.load.size() == 4);
        CHECK_THAT(std::accumulate(s.load.begin(), s.load.end(), 0.0), WithinAbs(2.0, 1e-12));
        CHECK(s.grad_norm > 0.0);
    }
    const std::string csv = log_csv(r.log);
    CHECK(csv.starts_with("step,lr,task_loss,aux_loss,joint_loss,grad_norm,load_0,load_1,load_2,load_3\n"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    CHECK(r.log.manifest.at("seeds").at("optim") == 0);
    CHECK(r.log.manifest.at("dataset_hash") == dataset_hash(ds));

    json m = r.log.manifest;
    const std::string h = manifest_hash(m);
    m["created"] = "1999-01-01T00:00:00Z";
    CHECK(manifest_hash(m) == h);
    m["steps_done"] = 4;
    CHECK(manifest_hash(m) != h);

    const LoadSummary flat = load_summary(r.log);
    CHECK(flat.mean_load.size() == 4);
    CHECK(flat.max_mean_load >= 0.5);
}

TEST_CASE("the dense adapter learns the shared map", "[trainer][slow]") {
    ConflictDatasetConfig dc;
    dc.alpha = 0.0;
    const ConflictDataset ds = make_dataset(dc);
    OptimConfig o;
    o.total_steps = 500;
    const TrainResult r = train(adapter_preset("dense-base"), LossConfig{0.01, 8}, ds, o);
    double tail = 0.0;
    for (std::size_t s = 450; s < 500; ++s) tail += r.log.steps[s].task_loss / 50.0;
    INFO("mean task loss over the last 50 steps " << tail);
    CHECK(tail < std::log(8.0) * 0.5);
    CHECK(r.log.steps.front().task_loss > std::log(8.0) * 0.5);
}

TEST_CASE("checkpoint persistence", "[trainer][io]") {
    const auto dir = temp_dir("checkpoint");
    const ConflictDataset ds = tiny_data();
    Trainer t(init_params(small_moe(8, 4, 2, 4), 0), ds, LossConfig{0.01, 4}, short_schedule(20));
    for (int i = 0; i < 7; ++i) t.step();
    const Checkpoint ck = t.checkpoint(true, dataset_hash(ds));

    save_checkpoint(dir / "a.bin", ck);
    const Checkpoint back = load_checkpoint(dir / "a.bin");
    save_checkpoint(dir / "b.bin", back);
    CHECK(read_file(dir / "a.bin") == read_file(dir / "b.bin"));
    CHECK(back.adapter == ck.adapter);
    CHECK(back.optimizer == ck.optimizer);
    CHECK(back.step == 7);
    CHECK(back.dataset_hash == dataset_hash(ds));

    std::string bytes = read_file(dir / "a.bin");
    std::string corrupt = bytes;
    corrupt[corrupt.size() - 3] ^= 0x01;
    CHECK_THROWS_AS(decode_container(corrupt), ChecksumError);
    std::string version = bytes;
    version[8] = 9;
    CHECK_THROWS_AS(decode_container(version), FormatError);
    CHECK_THROWS_AS(decode_container(bytes.substr(0, 30)), FormatError);
    CHECK_THROWS_AS(decode_container("NOTMAGIC" + bytes.substr(8)), FormatError);
    CHECK_THROWS_AS(checkpoint_from_container(dataset_container(ds)), FormatError);

    // Single-precision export round-trips its own payload exactly.
    save_checkpoint(dir / "f32.bin", ck, Dtype::f32);
    const Checkpoint narrow = load_checkpoint(dir / "f32.bin");
    save_checkpoint(dir / "f32b.bin", narrow, Dtype::f32);
    CHECK(read_file(dir / "f32.bin") == read_file(dir / "f32b.bin"));
    const auto wide = param_values(ck.adapter), thin = param_values(narrow.adapter);
    for (std::size_t i = 0; i < wide.size(); ++i) {
        for (std::size_t j = 0; j < wide[i].size(); ++j) {
            CHECK(thin[i][j] == static_cast<double>(static_cast<float>(wide[i][j])));
        }
    }

    const Checkpoint bare = t.checkpoint(false);
    CHECK_THROWS_AS(Trainer(bare, ds), FormatError);
}

TEST_CASE("resume matches an uninterrupted run bit for bit", "[trainer][io]") {
    const auto dir = temp_dir("resume");
    const ConflictDataset ds = tiny_data();
    for (const AdapterConfig& cfg : {small_moe(8, 4, 2, 4), small_dense(8, 12)}) {
        Trainer full(init_params(cfg, 0), ds, LossConfig{0.01, 4}, short_schedule(20));
        full.run();

        Trainer first(init_params(cfg, 0), ds, LossConfig{0.01, 4}, short_schedule(20));
        for (int i = 0; i < 10; ++i) first.step();
        save_checkpoint(dir / "mid.bin", first.checkpoint());
        Trainer second(load_checkpoint(dir / "mid.bin"), ds);
        second.run();

        REQUIRE(second.log().steps.size() == 10);
        for (std::size_t i = 0; i < 10; ++i) CHECK(second.log().steps[i] == full.log().steps[10 + i]);
        CHECK(same_params(second.adapter(), full.adapter()));
        CHECK(second.optimizer_state() == full.optimizer_state());
    }
}

TEST_CASE("only adapter parameters change", "[trainer]") {
    const ConflictDataset ds = tiny_data();
    const ConflictDataset copy = ds;
    const TrainResult r = train(small_moe(8, 4, 2, 4), LossConfig{0.01, 4}, ds, short_schedule(10));
    CHECK(bit_equal(ds.readout, copy.readout));
    CHECK(bit_equal(ds.inputs, copy.inputs));
    for (std::size_t c = 0; c < 3; ++c) CHECK(bit_equal(ds.models[c].target_map, copy.models[c].target_map));
    CHECK_FALSE(same_params(r.adapter, init_params(small_moe(8, 4, 2, 4), 0)));
}

TEST_CASE("divergence is reported with the failing step", "[trainer]") {
    const ConflictDataset ds = tiny_data();
    Adapter a = init_params(small_dense(8, 12), 0);
    Trainer t(a, ds, LossConfig{0.01, 4}, short_schedule(20));
    t.step();
    t.step();
    Adapter broken = t.adapter();
    std::get<DenseAdapter>(broken).w1.weight[0] = std::numeric_limits<double>::infinity();
    Checkpoint ck = t.checkpoint();
    ck.adapter = broken;
    Trainer bad(ck, ds);
    try {
        bad.step();
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.step() == 2);
    }
}

TEST_CASE("incompatible shapes are configuration errors", "[trainer]") {
    const ConflictDataset ds = tiny_data();
    CHECK_THROWS_AS(Trainer(init_params(small_dense(6, 4), 0), ds, LossConfig{0.01, 4}, short_schedule(1)),
                    ConfigError);
    CHECK_THROWS_AS(Trainer(init_params(small_dense(8, 4), 0), ds, LossConfig{0.01, 5}, short_schedule(1)),
                    ConfigError);
}
