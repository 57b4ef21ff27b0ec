// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "moeadapter/adapter.hpp"
#include "moeadapter/conflict_lab.hpp"
#include "moeadapter/container.hpp"
#include "moeadapter/dataset_io.hpp"
#include "moeadapter/json_io.hpp"
#include "moeadapter/objectives.hpp"
#include "moeadapter/optim.hpp"

namespace moeadapter {

// ---------------------------------------------------------------------------
// Loss and gradient on one batch.

struct BatchEvaluation {
    double task_loss = 0.0;
    double aux_loss = 0.0;
    double joint_loss = 0.0;
    std::optional<BalanceStats> balance; // MoE only
    std::vector<Tensor> grads;           // canonical parameter order; empty unless requested
};

/// Forward (and optionally backward) of the joint objective on `batch`.
/// With `include_aux` false the aux term is still reported but contributes
/// neither to joint_loss nor to the gradient.
inline BatchEvaluation evaluate_batch(const Adapter& adapter, const Tensor& readout, const Batch& batch,
                                      const LossConfig& loss, bool include_aux = true, bool need_grads = true) {
    GradTape tape;
    ParamBinder bind(tape, need_grads);
    AdapterOutput out = forward(tape, bind, adapter, tape.constant(batch.x));
    Var logits = logits_on_tape(tape, out, readout);
    Var task = ad::cross_entropy(tape, logits, batch.labels);
    Var root = task;

    BatchEvaluation ev;
    ev.task_loss = tape.scalar(task);
    if (const auto* m = std::get_if<MoEAdapter>(&adapter)) {
        ev.balance = balance_stats(out.routing, m->config.n_experts, m->config.top_k, loss.importance);
        ev.aux_loss = ev.balance->aux_loss;
        if (include_aux && loss.lambda > 0.0) {
            Var aux = aux_loss_on_tape(tape, out, *ev.balance, loss.importance);
            root = ad::axpby(tape, 1.0, task, loss.lambda, aux);
        }
    }
    ev.joint_loss = tape.scalar(root);
    if (need_grads) {
        tape.backward(root);
        for_each_param(adapter, [&](const std::string&, const Tensor& p) { ev.grads.push_back(bind.grad(p)); });
    }
    return ev;
}

// ---------------------------------------------------------------------------
// Logs.

struct StepRecord {
    std::uint64_t step = 0;
    double lr = 0.0;
    double task_loss = 0.0;
    double aux_loss = 0.0;
    double joint_loss = 0.0;
    double grad_norm = 0.0; // before clipping
    std::vector<double> load;

    friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    json manifest = json::object();
};

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// One row per step, fixed column order; doubles printed round-trip exact.
inline void write_log_csv(std::ostream& os, const TrainLog& log) {
    const std::size_t n_load = log.steps.empty() ? 0 : log.steps.front().load.size();
    os << "step,lr,task_loss,aux_loss,joint_loss,grad_norm";
    for (std::size_t e = 0; e < n_load; ++e) os << ",load_" << e;
    os << "\n";
    for (const auto& r : log.steps) {
        os << r.step << ',' << format_double(r.lr) << ',' << format_double(r.task_loss) << ','
           << format_double(r.aux_loss) << ',' << format_double(r.joint_loss) << ',' << format_double(r.grad_norm);
        for (double l : r.load) os << ',' << format_double(l);
        os << "\n";
    }
}

inline std::string log_csv(const TrainLog& log) {
    std::ostringstream os;
    write_log_csv(os, log);
    return os.str();
}

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

/// Digest of a manifest with its "created" timestamp removed.
inline std::string manifest_hash(json manifest) {
    manifest.erase("created");
    return hex_digest(manifest.dump());
}

struct LoadSummary {
    double mean_cv = 0.0;          // per-step coefficient of variation of f across experts, averaged
    double max_mean_load = 0.0;    // largest per-expert load averaged over the window
    std::vector<double> mean_load; // per-expert load averaged over the window
};

/// Expert-load statistics over the last `tail_fraction` of logged steps.
inline LoadSummary load_summary(const TrainLog& log, double tail_fraction = 0.2) {
    LoadSummary s;
    if (log.steps.empty() || log.steps.front().load.empty()) return s;
    const std::size_t n = log.steps.size();
    const auto window = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(tail_fraction * n)));
    const std::size_t experts = log.steps.front().load.size();
    s.mean_load.assign(experts, 0.0);
    for (std::size_t i = n - window; i < n; ++i) {
        const auto& load = log.steps[i].load;
        double mean = 0.0;
        for (double l : load) mean += l;
        mean /= static_cast<double>(experts);
        double var = 0.0;
        for (double l : load) var += (l - mean) * (l - mean);
        var /= static_cast<double>(experts);
        s.mean_cv += std::sqrt(var) / mean;
        for (std::size_t e = 0; e < experts; ++e) s.mean_load[e] += load[e];
    }
    s.mean_cv /= static_cast<double>(window);
    for (double& l : s.mean_load) l /= static_cast<double>(window);
    s.max_mean_load = *std::max_element(s.mean_load.begin(), s.mean_load.end());
    return s;
}

// ---------------------------------------------------------------------------
// Checkpoints.

struct Checkpoint {
    Adapter adapter;
    LossConfig loss;
    OptimConfig optim;
    std::uint64_t step = 0;
    std::optional<AdamState> optimizer;
    std::string dataset_hash;
};

inline Container checkpoint_container(const Checkpoint& ck, Dtype dtype = Dtype::f64) {
    Container c;
    c.kind = "checkpoint";
    c.meta = {{"config", {{"adapter", to_json(config_of(ck.adapter))}, {"loss", to_json(ck.loss)}, {"optim", to_json(ck.optim)}}},
              {"seed", ck.optim.seed},
              {"step", ck.step},
              {"dataset_hash", ck.dataset_hash},
              {"has_optimizer", ck.optimizer.has_value()},
              {"optimizer_step", ck.optimizer ? ck.optimizer->step : 0}};
    const auto params = named_params(ck.adapter);
    for (const auto& p : params) c.tensors.push_back({"param/" + p.name, *p.tensor, dtype});
    if (ck.optimizer) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            c.tensors.push_back({"adam.m/" + params[i].name, ck.optimizer->m.at(i), dtype});
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            c.tensors.push_back({"adam.v/" + params[i].name, ck.optimizer->v.at(i), dtype});
        }
    }
    return c;
}

inline Checkpoint checkpoint_from_container(const Container& c) {
    if (c.kind != "checkpoint") throw FormatError("expected a checkpoint container, got \"" + c.kind + "\"");
    Checkpoint ck;
    AdapterConfig cfg;
    bool has_optimizer = false;
    try {
        const json& conf = c.meta.at("config");
        cfg = adapter_config_from_json(conf.at("adapter"));
        ck.loss = loss_config_from_json(conf.at("loss"));
        ck.optim = optim_config_from_json(conf.at("optim"));
        ck.step = c.meta.at("step").get<std::uint64_t>();
        ck.dataset_hash = c.meta.at("dataset_hash").get<std::string>();
        has_optimizer = c.meta.at("has_optimizer").get<bool>();
        if (has_optimizer) {
            ck.optimizer = AdamState{};
            ck.optimizer->step = c.meta.at("optimizer_step").get<std::uint64_t>();
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint manifest: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint manifest: ") + e.what());
    }
    ck.adapter = init_params(cfg, 0);
    for_each_param(ck.adapter, [&](const std::string& name, Tensor& t) {
        const Tensor& stored = c.get("param/" + name);
        if (stored.shape() != t.shape()) throw FormatError("checkpoint tensor \"" + name + "\" has wrong shape");
        t = stored;
        if (ck.optimizer) {
            ck.optimizer->m.push_back(c.get("adam.m/" + name));
            ck.optimizer->v.push_back(c.get("adam.v/" + name));
        }
    });
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck, Dtype dtype = Dtype::f64) {
    save_container(path, checkpoint_container(ck, dtype));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_container(load_container(path));
}

// ---------------------------------------------------------------------------
// Training loop.

/// Deterministic AdamW training of an adapter against the frozen readout.
///
/// The batch of step s is drawn from derive_seed(optim.seed, s), so a run
/// resumed from a checkpoint reproduces the uninterrupted run exactly.
class Trainer {
public:
    using StepCallback = std::function<void(const Trainer&)>;

    Trainer(Adapter adapter, const ConflictDataset& data, LossConfig loss, OptimConfig optim)
        : adapter_(std::move(adapter)), data_(&data), loss_(loss), optim_(optim) {
        loss_.validate();
        optim_.validate();
        check_compatible();
        params_ = mutable_params(adapter_);
        state_ = AdamState::zeros_like(params_);
        for (const Tensor* p : params_) decay_.push_back(p->rank() == 2 ? 1 : 0);
    }

    /// Resumes from a checkpoint that carries optimizer state.
    Trainer(const Checkpoint& ck, const ConflictDataset& data) : Trainer(ck.adapter, data, ck.loss, ck.optim) {
        if (!ck.optimizer) throw FormatError("checkpoint has no optimizer state; cannot resume");
        if (ck.optimizer->m.size() != params_.size()) throw FormatError("optimizer state does not match adapter");
        state_ = *ck.optimizer;
    }

    const StepRecord& step() {
        const std::uint64_t s = state_.step;
        const Batch batch = sample_batch(*data_, std::nullopt, optim_.batch_size, derive_seed(optim_.seed, s));

        StepRecord rec;
        rec.step = s;
        rec.lr = wsd_lr(s, optim_);
        BatchEvaluation ev;
        try {
            ev = evaluate_batch(adapter_, data_->readout, batch, loss_);
        } catch (const NumericError& e) {
            throw DivergenceError(s, e.what());
        }
        if (!std::isfinite(ev.joint_loss)) throw DivergenceError(s, "non-finite loss");
        rec.task_loss = ev.task_loss;
        rec.aux_loss = ev.aux_loss;
        rec.joint_loss = ev.joint_loss;
        if (ev.balance) rec.load = ev.balance->load;
        rec.grad_norm = clip_global_norm(ev.grads, optim_.clip_norm);
        try {
            adamw_step(params_, ev.grads, state_, rec.lr, optim_, decay_);
        } catch (const NumericError& e) {
            throw DivergenceError(s, e.what());
        }
        log_.steps.push_back(std::move(rec));
        return log_.steps.back();
    }

    /// Steps until total_steps, calling `on_step` after each update.
    void run(const StepCallback& on_step = {}) {
        while (state_.step < optim_.total_steps) {
            step();
            if (on_step) on_step(*this);
        }
    }

    [[nodiscard]] const Adapter& adapter() const noexcept { return adapter_; }
    [[nodiscard]] const AdamState& optimizer_state() const noexcept { return state_; }
    [[nodiscard]] std::uint64_t steps_done() const noexcept { return state_.step; }
    [[nodiscard]] const TrainLog& log() const noexcept { return log_; }
    [[nodiscard]] TrainLog& log() noexcept { return log_; }
    [[nodiscard]] const LossConfig& loss_config() const noexcept { return loss_; }
    [[nodiscard]] const OptimConfig& optim_config() const noexcept { return optim_; }
    [[nodiscard]] const ConflictDataset& data() const noexcept { return *data_; }

    [[nodiscard]] Checkpoint checkpoint(bool with_optimizer = true, std::string dataset_hash = {}) const {
        Checkpoint ck{adapter_, loss_, optim_, state_.step, std::nullopt, std::move(dataset_hash)};
        if (with_optimizer) ck.optimizer = state_;
        return ck;
    }

private:
    void check_compatible() const {
        const AdapterConfig& c = config_of(adapter_);
        if (c.d != data_->config.d) {
            throw ConfigError("adapter.d (" + std::to_string(c.d) + ") does not match data.d (" +
                              std::to_string(data_->config.d) + ")");
        }
        if (c.out_dim != data_->readout.cols()) {
            throw ConfigError("adapter.out_dim (" + std::to_string(c.out_dim) + ") does not match data.out_dim (" +
                              std::to_string(data_->readout.cols()) + ")");
        }
        if (loss_.vocab != data_->config.vocab) {
            throw ConfigError("loss.vocab (" + std::to_string(loss_.vocab) + ") does not match data.vocab (" +
                              std::to_string(data_->config.vocab) + ")");
        }
    }


    Adapter adapter_;
    const ConflictDataset* data_;
    LossConfig loss_;
    OptimConfig optim_;
    std::vector<Tensor*> params_;
    AdamState state_;
    std::vector<std::uint8_t> decay_; // 1 for weight matrices
    TrainLog log_;
};

/// Run manifest: every config and seed needed to reproduce a run.
inline json run_manifest(const Trainer& t, const std::string& dataset_hash) {
    return {{"created", utc_timestamp()},
            {"config",
             {{"adapter", to_json(config_of(t.adapter()))},
              {"loss", to_json(t.loss_config())},
              {"data", to_json(t.data().config)},
              {"optim", to_json(t.optim_config())}}},
            {"seeds", {{"data", t.data().config.seed}, {"optim", t.optim_config().seed}}},
            {"dataset_hash", dataset_hash},
            {"steps_done", t.steps_done()}};
}

struct TrainResult {
    Adapter adapter;
    TrainLog log;
};

/// Initializes from optim.seed and trains for optim.total_steps.
inline TrainResult train(const AdapterConfig& adapter_cfg, const LossConfig& loss_cfg, const ConflictDataset& data,
                         const OptimConfig& optim_cfg, const Trainer::StepCallback& on_step = {}) {
    Trainer t(init_params(adapter_cfg, optim_cfg.seed), data, loss_cfg, optim_cfg);
    t.run(on_step);
    t.log().manifest = run_manifest(t, dataset_hash(data));
    return {t.adapter(), t.log()};
}

} // namespace moeadapter
