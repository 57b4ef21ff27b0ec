// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

// moeadapter command-line tool.
//
// Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
// 4 numerical divergence, 1 anything else.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moeadapter/moeadapter.hpp"

namespace fs = std::filesystem;
using namespace moeadapter;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitDivergence = 4;

constexpr const char* kSeedEnv = "MOEADAPTER_SEED";

/// Seed precedence: flag > environment > config file > default.
std::optional<std::uint64_t> seed_override(const std::optional<std::uint64_t>& flag) {
    if (flag) return flag;
    const char* env = std::getenv(kSeedEnv);
    if (env == nullptr || *env == '\0') return std::nullopt;
    try {
        std::size_t used = 0;
        const std::string s(env);
        if (s.front() == '-') throw std::invalid_argument(s);
        const unsigned long long v = std::stoull(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(std::string(kSeedEnv) + " must be a non-negative integer, got \"" + env + "\"");
    }
}

RunConfig load_config(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

void write_text(const fs::path& path, std::string_view text) { write_file_atomic(path, text); }

std::string pretty(const json& j) { return j.dump(2) + "\n"; }

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::string snapshot_name(std::uint64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step-%08llu.bin", static_cast<unsigned long long>(step));
    return buf;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
};

int cmd_gen_data(const GenDataArgs& a) {
    RunConfig cfg = load_config(a.config);
    if (auto s = seed_override(a.seed)) cfg.data.seed = *s;
    cfg.data.validate();
    const ConflictDataset ds = make_dataset(cfg.data);
    save_dataset(a.out, ds);
    std::cout << "dataset " << a.out << "\n"
              << "  categories " << ds.config.categories << ", d " << ds.config.d << ", vocab " << ds.config.vocab
              << ", samples " << ds.size() << ", seed " << ds.config.seed << ", hash " << dataset_hash(ds) << "\n";
    for (std::size_t c = 0; c < ds.config.categories; ++c) {
        std::cout << "  " << category_name(c) << " labels:";
        for (std::size_t h : label_histogram(ds, c)) std::cout << ' ' << h;
        std::cout << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string data;
    std::string out;
    std::string preset;
    std::string resume;
    std::string dtype = "f64";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
};

void print_summary(const Trainer& t) {
    const TrainLog& log = t.log();
    std::cout << "steps " << t.steps_done();
    if (!log.steps.empty()) {
        const StepRecord& r = log.steps.back();
        std::cout << ", final task_loss " << format_double(r.task_loss) << ", aux_loss " << format_double(r.aux_loss)
                  << ", joint_loss " << format_double(r.joint_loss);
    }
    std::cout << "\n";
    const LoadSummary ls = load_summary(log);
    if (!ls.mean_load.empty()) {
        std::cout << "expert load (last 20% of steps):";
        for (double l : ls.mean_load) std::cout << ' ' << format_double(l);
        std::cout << "\n  cv " << format_double(ls.mean_cv) << ", max " << format_double(ls.max_mean_load) << "\n";
    }
}

int cmd_train(const TrainArgs& a) {
    const ConflictDataset ds = load_dataset(a.data);
    const std::string ds_hash = dataset_hash(ds);
    const Dtype dtype = parse_dtype(a.dtype);

    RunConfig cfg = load_config(a.config);
    std::optional<Trainer> trainer;
    if (!a.resume.empty()) {
        Checkpoint ck = load_checkpoint(a.resume);
        if (ck.dataset_hash != ds_hash) {
            throw ConfigError("checkpoint was trained on dataset " + ck.dataset_hash + ", not " + ds_hash);
        }
        if (a.steps) ck.optim.total_steps = *a.steps;
        trainer.emplace(ck, ds);
        cfg.adapter = config_of(ck.adapter);
        cfg.loss = ck.loss;
        cfg.optim = ck.optim;
    } else {
        if (!a.preset.empty()) cfg.adapter = adapter_preset(a.preset);
        if (auto s = seed_override(a.seed)) cfg.optim.seed = *s;
        if (a.steps) cfg.optim.total_steps = *a.steps;
        cfg.data = ds.config;
        cfg.validate();
        trainer.emplace(init_params(cfg.adapter, cfg.optim.seed), ds, cfg.loss, cfg.optim);
    }

    const fs::path out(a.out);
    ensure_dir(out);
    const std::size_t every = cfg.analysis.snapshot_every;
    const fs::path snap_dir = out / "snapshots";
    auto snapshot = [&](const Trainer& t) {
        if (every == 0) return;
        const std::uint64_t s = t.steps_done();
        if (s % every != 0 && s != t.optim_config().total_steps) return;
        save_checkpoint(snap_dir / snapshot_name(s), t.checkpoint(false, ds_hash), dtype);
    };
    if (every > 0) {
        ensure_dir(snap_dir);
        snapshot(*trainer);
    }

    try {
        trainer->run(snapshot);
    } catch (const DivergenceError& e) {
        write_text(out / "train_log.csv", log_csv(trainer->log()));
        throw;
    }

    const fs::path ckpt_path = out / "checkpoint.bin";
    const Checkpoint ck = trainer->checkpoint(true, ds_hash);
    save_checkpoint(ckpt_path, ck, dtype);
    const std::string log_text = log_csv(trainer->log());
    write_text(out / "train_log.csv", log_text);

    json manifest = run_manifest(*trainer, ds_hash);
    manifest["config"]["analysis"] = to_json(cfg.analysis);
    manifest["resumed_from_step"] = a.resume.empty() ? json(nullptr) : json(trainer->steps_done() - trainer->log().steps.size());
    manifest["checkpoint_dtype"] = to_string(dtype);
    manifest["outputs"] = {{"checkpoint", hex_digest(read_file(ckpt_path))}, {"train_log", hex_digest(log_text)}};
    manifest["manifest_hash"] = manifest_hash(manifest);
    write_text(out / "run_manifest.json", pretty(manifest));

    print_summary(*trainer);
    std::cout << "wrote " << ckpt_path.string() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
    std::string checkpoint;
    std::string data;
    std::string out;
    std::string config;
    std::string trajectory;
    std::optional<std::uint64_t> seed;
};

std::vector<fs::path> list_snapshots(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("snapshot directory not found: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".bin") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no snapshots in " + dir.string());
    return files;
}

int cmd_analyze(const AnalyzeArgs& a) {
    const ConflictDataset ds = load_dataset(a.data);
    const std::string ds_hash = dataset_hash(ds);
    const std::string ckpt_bytes = read_file(a.checkpoint);
    const Checkpoint ck = checkpoint_from_container(decode_container(ckpt_bytes));
    if (ck.dataset_hash != ds_hash) {
        throw ConfigError("checkpoint was trained on dataset " + ck.dataset_hash + ", not " + ds_hash);
    }
    AnalysisConfig acfg = a.config.empty() ? AnalysisConfig{} : load_run_config(a.config).analysis;
    if (auto s = seed_override(a.seed)) acfg.seed = *s;

    AnalysisReport report;
    if (a.trajectory.empty()) {
        report = analyze(ck.adapter, ds, ck.loss, acfg);
        report.snapshot_steps = {ck.step};
    } else {
        std::vector<Adapter> snaps;
        std::vector<std::uint64_t> steps;
        for (const auto& p : list_snapshots(a.trajectory)) {
            Checkpoint s = load_checkpoint(p);
            if (s.dataset_hash != ds_hash) throw ConfigError("snapshot " + p.string() + " uses a different dataset");
            if (!(config_of(s.adapter) == config_of(ck.adapter))) {
                throw ConfigError("snapshot " + p.string() + " has a different adapter configuration");
            }
            snaps.push_back(std::move(s.adapter));
            steps.push_back(s.step);
        }
        report = analyze_trajectory(snaps, steps, ds, ck.loss, acfg);
    }
    report.dataset_hash = ds_hash;
    report.run_hash = hex_digest(ckpt_bytes);
    report.config["optim"] = to_json(ck.optim);
    report.config["data"] = to_json(ds.config);

    const fs::path out(a.out);
    ensure_dir(out);
    const std::string tag = report.run_hash;
    const fs::path report_path = out / ("report-" + tag + ".json");
    write_text(report_path, pretty(to_json(report)));
    write_text(out / ("cosine-" + tag + ".csv"), cosine_csv(report));
    write_text(out / ("influence-" + tag + ".csv"), influence_csv(report));
    write_text(out / ("activation-" + tag + ".csv"), activation_csv(report));

    std::cout << "mode " << report.mode << " (" << report.snapshots << " snapshot"
              << (report.snapshots == 1 ? "" : "s") << ")\n";
    std::cout << "mean off-diagonal cosine " << format_double(mean_off_diagonal(report.cosine))
              << ", negative influence cells " << negative_off_diagonal(report.influence) << "\n";
    for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << "wrote " << report_path.string() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct CompareArgs {
    std::string report_a;
    std::string report_b;
    std::string out;
};

AnalysisReport read_report(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": " + e.what());
    }
    return report_from_json(j);
}

int cmd_compare(const CompareArgs& a) {
    const AnalysisReport ra = read_report(a.report_a);
    const AnalysisReport rb = read_report(a.report_b);
    const CompareVerdict v = compare_runs(ra, rb);
    json j = to_json(v, ra.categories);
    j["report_a"] = a.report_a;
    j["report_b"] = a.report_b;
    j["dataset_hash"] = ra.dataset_hash;
    if (!a.out.empty()) write_text(a.out, pretty(j));
    std::cout << "verdict:";
    for (const auto& f : v.flags) std::cout << " [" << f << "]";
    std::cout << "\nmean off-diagonal cosine a " << format_double(v.mean_cosine_a) << ", b "
              << format_double(v.mean_cosine_b) << "\nnegative influence cells a " << v.negative_influence_a
              << ", b " << v.negative_influence_b << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct ParamsArgs {
    std::string config;
    std::string preset;
    std::string full_scale; // "", "moe", "dense" or "both"
    bool json_out = false;
    bool no_layer_norm = false;
};

int cmd_params(const ParamsArgs& a) {
    std::vector<std::pair<std::string, AdapterConfig>> rows;
    if (a.full_scale.empty() || !a.config.empty() || !a.preset.empty()) {
        AdapterConfig c = load_config(a.config).adapter;
        if (!a.preset.empty()) c = adapter_preset(a.preset);
        rows.emplace_back(a.preset.empty() ? "configured" : a.preset, c);
    }
    if (a.full_scale == "moe" || a.full_scale == "both") rows.emplace_back("full-moe", adapter_preset("full-moe"));
    if (a.full_scale == "dense" || a.full_scale == "both") {
        rows.emplace_back("full-dense", adapter_preset("full-dense"));
    }

    json out = json::array();
    for (const auto& [name, c] : rows) {
        const ParamCount p = count_params(c, !a.no_layer_norm);
        out.push_back({{"name", name}, {"kind", to_string(c.kind)}, {"total", p.total}, {"active", p.active},
                       {"ratio", p.ratio}});
    }
    if (a.json_out) {
        std::cout << out.dump(2) << "\n";
        return kExitOk;
    }
    std::printf("%-16s %-6s %14s %14s %8s\n", "name", "kind", "total", "active", "ratio");
    for (const auto& r : out) {
        std::printf("%-16s %-6s %14llu %14llu %8.4f\n", r["name"].get<std::string>().c_str(),
                    r["kind"].get<std::string>().c_str(), r["total"].get<unsigned long long>(),
                    r["active"].get<unsigned long long>(), r["ratio"].get<double>());
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct ShowConfigArgs {
    std::string config;
    std::string preset;
};

int cmd_show_config(const ShowConfigArgs& a) {
    RunConfig cfg = load_config(a.config);
    if (!a.preset.empty()) cfg.adapter = adapter_preset(a.preset);
    std::cout << pretty(to_json(cfg));
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dense and mixture-of-experts adapters on a synthetic conflicting-task benchmark"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "moeadapter 0.1.0");

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    gen_cmd->add_option("--config", gen.config, "Run configuration JSON")->check(CLI::ExistingFile);
    gen_cmd->add_option("--out", gen.out, "Dataset file to write")->required();
    gen_cmd->add_option("--seed", gen.seed, "Dataset seed (overrides " + std::string(kSeedEnv) + " and the file)");

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train an adapter");
    train_cmd->add_option("--config", tr.config, "Run configuration JSON")->check(CLI::ExistingFile);
    train_cmd->add_option("--data", tr.data, "Dataset file")->required();
    train_cmd->add_option("--out", tr.out, "Output directory")->required();
    train_cmd->add_option("--preset", tr.preset, "Adapter preset, replacing the configured adapter");
    train_cmd->add_option("--resume", tr.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
    train_cmd->add_option("--steps", tr.steps, "Total optimizer steps");
    train_cmd->add_option("--seed", tr.seed, "Training seed (overrides " + std::string(kSeedEnv) + " and the file)");
    train_cmd->add_option("--dtype", tr.dtype, "Checkpoint payload precision")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();

    AnalyzeArgs an;
    auto* analyze_cmd = app.add_subcommand("analyze", "Gradient cosine, influence and activation report");
    analyze_cmd->add_option("--checkpoint", an.checkpoint, "Checkpoint file")->required();
    analyze_cmd->add_option("--data", an.data, "Dataset file")->required();
    analyze_cmd->add_option("--out", an.out, "Output directory")->required();
    analyze_cmd->add_option("--config", an.config, "Run configuration JSON (analysis section)")
        ->check(CLI::ExistingFile);
    analyze_cmd->add_option("--trajectory", an.trajectory, "Snapshot directory; averages over all snapshots");
    analyze_cmd->add_option("--seed", an.seed, "Analysis seed (overrides " + std::string(kSeedEnv) + " and the file)");

    CompareArgs cmp;
    auto* compare_cmd = app.add_subcommand("compare", "Compare two analysis reports");
    compare_cmd->add_option("--report-a", cmp.report_a, "Baseline report")->required();
    compare_cmd->add_option("--report-b", cmp.report_b, "Candidate report")->required();
    compare_cmd->add_option("--out", cmp.out, "Verdict JSON to write");

    ParamsArgs par;
    auto* params_cmd = app.add_subcommand("params", "Parameter counts");
    params_cmd->add_option("--config", par.config, "Run configuration JSON")->check(CLI::ExistingFile);
    params_cmd->add_option("--preset", par.preset, "Adapter preset");
    params_cmd->add_option("--full-scale", par.full_scale, "Also count the full-size layout")
        ->expected(0, 1)
        ->default_str("both")
        ->check(CLI::IsMember({"moe", "dense", "both"}));
    params_cmd->add_flag("--json", par.json_out, "Print JSON");
    params_cmd->add_flag("--no-layer-norm", par.no_layer_norm, "Exclude layer-norm parameters");

    ShowConfigArgs show;
    auto* show_cmd = app.add_subcommand("show-config", "Print the fully resolved run configuration");
    show_cmd->add_option("--config", show.config, "Run configuration JSON")->check(CLI::ExistingFile);
    show_cmd->add_option("--preset", show.preset, "Adapter preset");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*gen_cmd) return cmd_gen_data(gen);
        if (*train_cmd) return cmd_train(tr);
        if (*analyze_cmd) return cmd_analyze(an);
        if (*compare_cmd) return cmd_compare(cmp);
        if (*params_cmd) return cmd_params(par);
        if (*show_cmd) return cmd_show_config(show);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence at step " << e.step() << ": " << e.what() << "\n";
        return kExitDivergence;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitFailure;
}
