// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

namespace moeadapter {

/// Independent random streams derived from one user seed. Every consumer of
/// randomness draws from its own stream so adding draws in one place never
/// shifts another.
enum class Stream : std::uint64_t {
    init = 1,
    batch = 2,
    data_maps = 3,
    data_samples = 4,
    analysis = 5,
    holdout = 6,
};

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return Rng(seq);
}

/// Deterministic 64-bit seed for item `index` of a seeded sequence.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

} // namespace moeadapter
