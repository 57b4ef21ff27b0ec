// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

// Versioned binary container shared by checkpoints and datasets.
//
//   bytes 0..7    magic "MOEADAPT"
//   bytes 8..11   u32 LE format version
//   bytes 12..15  u32 LE reserved (0)
//   bytes 16..23  u64 LE manifest length L
//   next L bytes  JSON manifest
//   remainder     payload: raw little-endian IEEE-754 arrays
//
// The manifest lists every tensor with name, shape, dtype, payload offset,
// byte count and CRC-32 of its bytes.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "moeadapter/tensor.hpp"

namespace moeadapter {

using json = nlohmann::json;

inline constexpr std::string_view kContainerMagic = "MOEADAPT";
inline constexpr std::uint32_t kContainerVersion = 1;

enum class Dtype { f32, f64 };

inline std::string to_string(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

inline Dtype parse_dtype(std::string_view s) {
    if (s == "f32") return Dtype::f32;
    if (s == "f64") return Dtype::f64;
    throw FormatError("unknown dtype \"" + std::string(s) + "\"");
}

struct StoredTensor {
    std::string name;
    Tensor tensor;
    Dtype dtype = Dtype::f64;
};

struct Container {
    std::string kind;
    json meta = json::object();
    std::vector<StoredTensor> tensors;

    [[nodiscard]] const Tensor* find(std::string_view name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return &t.tensor;
        }
        return nullptr;
    }

    [[nodiscard]] const Tensor& get(std::string_view name) const {
        const Tensor* t = find(name);
        if (!t) throw FormatError("container has no tensor \"" + std::string(name) + "\"");
        return *t;
    }
};

inline std::uint32_t crc32_of(std::string_view bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
        crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + pos), static_cast<uInt>(n));
        pos += n;
    }
    return static_cast<std::uint32_t>(crc);
}

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> buf{};
    std::memcpy(buf.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
    out.append(buf.data(), buf.size());
}

template <class T>
T get_le(std::string_view in, std::size_t offset) {
    std::array<char, sizeof(T)> buf{};
    std::memcpy(buf.data(), in.data() + offset, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
    T value;
    std::memcpy(&value, buf.data(), sizeof(T));
    return value;
}

inline std::string encode_tensor(const Tensor& t, Dtype dtype) {
    std::string out;
    out.reserve(t.size() * (dtype == Dtype::f32 ? 4 : 8));
    for (double v : t.values()) {
        if (dtype == Dtype::f32) {
            put_le(out, static_cast<float>(v));
        } else {
            put_le(out, v);
        }
    }
    return out;
}

/// Throws FormatError unless the manifest has the fixed container schema.
inline void validate_manifest(const json& m, std::size_t payload_size) {
    auto fail = [](const std::string& why) { throw FormatError("invalid container manifest: " + why); };
    if (!m.is_object()) fail("not an object");
    if (!m.contains("format") || m["format"] != "moeadapter-container") fail("missing format tag");
    if (!m.contains("version") || !m["version"].is_number_unsigned()) fail("missing version");
    if (m["version"].get<std::uint32_t>() != kContainerVersion) {
        throw FormatError("unsupported container version " + m["version"].dump());
    }
    if (!m.contains("kind") || !m["kind"].is_string()) fail("missing kind");
    if (!m.contains("meta") || !m["meta"].is_object()) fail("missing meta object");
    if (!m.contains("tensors") || !m["tensors"].is_array()) fail("missing tensors array");
    std::size_t expected_offset = 0;
    for (const auto& t : m["tensors"]) {
        if (!t.is_object()) fail("tensor entry is not an object");
        for (const char* key : {"name", "shape", "dtype", "offset", "nbytes", "crc32"}) {
            if (!t.contains(key)) fail(std::string("tensor entry lacks \"") + key + "\"");
        }
        if (!t["name"].is_string() || !t["shape"].is_array() || !t["dtype"].is_string() ||
            !t["offset"].is_number_unsigned() || !t["nbytes"].is_number_unsigned() ||
            !t["crc32"].is_number_unsigned()) {
            fail("tensor entry has wrong field types");
        }
        Shape shape;
        for (const auto& d : t["shape"]) {
            if (!d.is_number_unsigned()) fail("shape entries must be unsigned integers");
            shape.push_back(d.get<std::size_t>());
        }
        const std::size_t width = parse_dtype(t["dtype"].get<std::string>()) == Dtype::f32 ? 4 : 8;
        const auto offset = t["offset"].get<std::size_t>();
        const auto nbytes = t["nbytes"].get<std::size_t>();
        if (offset != expected_offset) fail("tensor offsets are not contiguous");
        if (nbytes != shape_numel(shape) * width) fail("byte count does not match shape");
        expected_offset += nbytes;
    }
    if (expected_offset != payload_size) fail("payload size does not match manifest");
}

} // namespace detail

inline std::string encode_container(const Container& c) {
    json manifest;
    manifest["format"] = "moeadapter-container";
    manifest["version"] = kContainerVersion;
    manifest["kind"] = c.kind;
    manifest["meta"] = c.meta;
    manifest["tensors"] = json::array();
    std::string payload;
    for (const auto& st : c.tensors) {
        std::string bytes = detail::encode_tensor(st.tensor, st.dtype);
        manifest["tensors"].push_back({{"name", st.name},
                                       {"shape", st.tensor.shape()},
                                       {"dtype", to_string(st.dtype)},
                                       {"offset", payload.size()},
                                       {"nbytes", bytes.size()},
                                       {"crc32", crc32_of(bytes)}});
        payload += bytes;
    }
    const std::string text = manifest.dump();
    std::string out(kContainerMagic);
    detail::put_le<std::uint32_t>(out, kContainerVersion);
    detail::put_le<std::uint32_t>(out, 0);
    detail::put_le<std::uint64_t>(out, text.size());
    out += text;
    out += payload;
    return out;
}

inline Container decode_container(std::string_view bytes) {
    constexpr std::size_t header = 24;
    if (bytes.size() < header || bytes.substr(0, kContainerMagic.size()) != kContainerMagic) {
        throw FormatError("not a moeadapter container (bad magic)");
    }
    const auto version = detail::get_le<std::uint32_t>(bytes, 8);
    if (version != kContainerVersion) throw FormatError("unsupported container version " + std::to_string(version));
    const auto manifest_len = detail::get_le<std::uint64_t>(bytes, 16);
    if (manifest_len > bytes.size() - header) throw FormatError("truncated container manifest");

    json manifest;
    try {
        manifest = json::parse(bytes.substr(header, manifest_len));
    } catch (const json::exception& e) {
        throw FormatError(std::string("container manifest is not valid JSON: ") + e.what());
    }
    const std::string_view payload = bytes.substr(header + manifest_len);
    detail::validate_manifest(manifest, payload.size());

    Container c;
    c.kind = manifest["kind"].get<std::string>();
    c.meta = manifest["meta"];
    for (const auto& t : manifest["tensors"]) {
        const auto name = t["name"].get<std::string>();
        const auto offset = t["offset"].get<std::size_t>();
        const auto nbytes = t["nbytes"].get<std::size_t>();
        const std::string_view raw = payload.substr(offset, nbytes);
        if (crc32_of(raw) != t["crc32"].get<std::uint32_t>()) {
            throw ChecksumError("checksum mismatch in tensor \"" + name + "\"");
        }
        const Dtype dtype = parse_dtype(t["dtype"].get<std::string>());
        Shape shape = t["shape"].get<Shape>();
        std::vector<double> values(shape_numel(shape));
        for (std::size_t i = 0; i < values.size(); ++i) {
            values[i] = dtype == Dtype::f32 ? static_cast<double>(detail::get_le<float>(raw, i * 4))
                                            : detail::get_le<double>(raw, i * 8);
        }
        c.tensors.push_back({name, Tensor(std::move(shape), std::move(values)), dtype});
    }
    return c;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open \"" + path.string() + "\" for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed for \"" + path.string() + "\"");
    return ss.str();
}

/// Writes to a sibling temporary file, then renames over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open \"" + tmp.string() + "\" for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for \"" + tmp.string() + "\"");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename \"" + tmp.string() + "\" to \"" + path.string() + "\": " + ec.message());
}

inline void save_container(const std::filesystem::path& path, const Container& c) {
    write_file_atomic(path, encode_container(c));
}

inline Container load_container(const std::filesystem::path& path) { return decode_container(read_file(path)); }

/// Short stable hex digest of a byte string.
inline std::string hex_digest(std::string_view bytes) {
    char buf[9];
    std::snprintf(buf, sizeof(buf), "%08x", crc32_of(bytes));
    return buf;
}

} // namespace moeadapter
