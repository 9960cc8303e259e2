// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace kdpl {

/// Bad configuration detected before any compute runs.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

/// Tensor/sequence dimensions do not match the model configuration.
class ShapeError : public std::runtime_error {
public:
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

/// A caller broke an operation's preconditions.
class ContractViolation : public std::logic_error {
public:
  explicit ContractViolation(const std::string& msg)
      : std::logic_error("contract violation: " + msg) {}
};

/// Numerically degenerate input (zero-norm embedding and friends).
class DegenerateInputError : public std::runtime_error {
public:
  explicit DegenerateInputError(const std::string& msg)
      : std::runtime_error("degenerate input: " + msg) {}
};

/// Visual prompting requested on a backbone without a ViT image tower.
class UnsupportedBackboneError : public std::runtime_error {
public:
  explicit UnsupportedBackboneError(const std::string& msg)
      : std::runtime_error("unsupported backbone: " + msg) {}
};

/// Persistent teacher-prediction cache is unreadable or inconsistent.
class CacheError : public std::runtime_error {
public:
  explicit CacheError(const std::string& msg) : std::runtime_error("cache error: " + msg) {}
};

/// Malformed split/vocabulary/config file.
class ParseError : public std::runtime_error {
public:
  explicit ParseError(const std::string& msg) : std::runtime_error("parse error: " + msg) {}
};

/// An item in a dataset cannot be materialized (missing file, bad id, ...).
class DataError : public std::runtime_error {
public:
  explicit DataError(const std::string& msg) : std::runtime_error("data error: " + msg) {}
};

/// Synthetic dataset generation failed to meet its own constraints.
class GenerationError : public std::runtime_error {
public:
  explicit GenerationError(const std::string& msg)
      : std::runtime_error("generation error: " + msg) {}
};

}  // namespace kdpl
