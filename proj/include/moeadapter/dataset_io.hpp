// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>

#include "moeadapter/conflict_lab.hpp"
#include "moeadapter/container.hpp"
#include "moeadapter/json_io.hpp"

namespace moeadapter {

namespace detail {

inline Tensor index_tensor(const std::vector<std::size_t>& v) {
    std::vector<double> d(v.begin(), v.end());
    return Tensor({v.size()}, std::move(d));
}

inline std::vector<std::size_t> index_vector(const Tensor& t) {
    std::vector<std::size_t> out;
    out.reserve(t.size());
    for (double v : t.values()) out.push_back(static_cast<std::size_t>(v));
    return out;
}

} // namespace detail

inline Container dataset_container(const ConflictDataset& ds) {
    Container c;
    c.kind = "dataset";
    c.meta = {{"config", to_json(ds.config)},
              {"seed", ds.config.seed},
              {"construction_attempts", ds.construction_attempts}};
    c.tensors.push_back({"readout", ds.readout, Dtype::f64});
    for (std::size_t k = 0; k < ds.models.size(); ++k) {
        const std::string p = "models." + std::to_string(k) + ".";
        c.tensors.push_back({p + "mean", ds.models[k].mean, Dtype::f64});
        c.tensors.push_back({p + "factor", ds.models[k].factor, Dtype::f64});
        c.tensors.push_back({p + "target_map", ds.models[k].target_map, Dtype::f64});
    }
    c.tensors.push_back({"inputs", ds.inputs, Dtype::f64});
    c.tensors.push_back({"labels", detail::index_tensor(ds.labels), Dtype::f64});
    c.tensors.push_back({"categories", detail::index_tensor(ds.categories), Dtype::f64});
    return c;
}

inline ConflictDataset dataset_from_container(const Container& c) {
    if (c.kind != "dataset") throw FormatError("expected a dataset container, got \"" + c.kind + "\"");
    ConflictDataset ds;
    try {
        ds.config = data_config_from_json(c.meta.at("config"));
        ds.construction_attempts = c.meta.at("construction_attempts").get<std::size_t>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("dataset manifest: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("dataset manifest: ") + e.what());
    }
    ds.readout = c.get("readout");
    for (std::size_t k = 0; k < ds.config.categories; ++k) {
        const std::string p = "models." + std::to_string(k) + ".";
        ds.models.push_back({c.get(p + "mean"), c.get(p + "factor"), c.get(p + "target_map")});
    }
    ds.inputs = c.get("inputs");
    ds.labels = detail::index_vector(c.get("labels"));
    ds.categories = detail::index_vector(c.get("categories"));
    const std::size_t n = ds.config.categories * ds.config.n_per_category;
    if (ds.inputs.shape() != Shape{n, ds.config.d} || ds.labels.size() != n || ds.categories.size() != n) {
        throw FormatError("dataset tensors do not match the manifest config");
    }
    return ds;
}

inline void save_dataset(const std::filesystem::path& path, const ConflictDataset& ds) {
    save_container(path, dataset_container(ds));
}

inline ConflictDataset load_dataset(const std::filesystem::path& path) {
    return dataset_from_container(load_container(path));
}

/// Digest of the serialized dataset; identifies a corpus across runs.
inline std::string dataset_hash(const ConflictDataset& ds) { return hex_digest(encode_container(dataset_container(ds))); }

} // namespace moeadapter
