// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dpr {

/// Base class for every error this library raises. `category()` is stable and
/// maps 1:1 onto CLI exit codes (see tools/).
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

/// Bad configuration: invalid hyperparameters, mismatched model dimensions.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

/// Shape/extent mismatch between tensors.
class DimensionError : public ConfigError {
 public:
  explicit DimensionError(const std::string& what) : ConfigError(what) {}
};

/// Unusable input data: missing files, unparsable cells, empty frames.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data", what) {}
};

/// Numerical failure: NaN/Inf where finite values are required, singular
/// regression systems, diverged training.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

/// A diagnostic whose defining ratio is 0/0 on this input (constant series).
class UndefinedDiagnosticError : public NumericError {
 public:
  explicit UndefinedDiagnosticError(const std::string& what) : NumericError(what) {}
};

/// API misuse inside the library (caller broke a precondition).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract", what) {}
};

}  // namespace dpr
