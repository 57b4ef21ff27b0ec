// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>

#include "moeadapter/analysis.hpp"
#include "moeadapter/container.hpp"
#include "moeadapter/json_io.hpp"

namespace moeadapter {

/// Complete configuration of a run: one section per module. Every field is
/// optional in the file; missing fields keep their defaults.
struct RunConfig {
    AdapterConfig adapter;
    LossConfig loss;
    ConflictDatasetConfig data;
    OptimConfig optim;
    AnalysisConfig analysis;

    /// Cross-section consistency.
    void validate() const {
        adapter.validate();
        loss.validate();
        data.validate();
        optim.validate();
        analysis.validate();
        if (adapter.d != data.d) throw ConfigError("adapter.d must equal data.d");
        if (adapter.out_dim != data.out_dim) throw ConfigError("adapter.out_dim must equal data.out_dim");
        if (loss.vocab != data.vocab) throw ConfigError("loss.vocab must equal data.vocab");
    }

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

inline json to_json(const RunConfig& c) {
    return {{"adapter", to_json(c.adapter)},
            {"loss", to_json(c.loss)},
            {"data", to_json(c.data)},
            {"optim", to_json(c.optim)},
            {"analysis", to_json(c.analysis)}};
}

inline RunConfig run_config_from_json(const json& j) {
    StrictReader r(j, "config");
    RunConfig c;
    for (const char* key : {"adapter", "loss", "data", "optim", "analysis"}) r.skip(key);
    r.finish();
    if (j.contains("adapter")) c.adapter = adapter_config_from_json(j.at("adapter"));
    if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"));
    if (j.contains("data")) c.data = data_config_from_json(j.at("data"));
    if (j.contains("optim")) c.optim = optim_config_from_json(j.at("optim"));
    if (j.contains("analysis")) c.analysis = analysis_config_from_json(j.at("analysis"));
    c.validate();
    return c;
}

inline RunConfig parse_run_config(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return run_config_from_json(j);
}

inline RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_file(path)); }

} // namespace moeadapter
