// Copyright (c) 2026 The moeadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace moeadapter {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not compose.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value. The message names the offending field.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A NaN or Inf appeared where a finite value is required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss or gradient at `step`.
class DivergenceError : public NumericError {
public:
    DivergenceError(std::uint64_t step, const std::string& what)
        : NumericError("diverged at step " + std::to_string(step) + ": " + what), step_(step) {}

    [[nodiscard]] std::uint64_t step() const noexcept { return step_; }

private:
    std::uint64_t step_;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Unrecognized magic, unsupported version or malformed manifest.
class FormatError : public IoError {
public:
    using IoError::IoError;
};

class ChecksumError : public IoError {
public:
    using IoError::IoError;
};

} // namespace moeadapter
