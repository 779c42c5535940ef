#pragma once

#include <stdexcept>
#include <string>

namespace adapterlab {

/// Operand shapes are incompatible for the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration value is out of its legal range (group count, rank, budget, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An operation produced NaN or Inf, or a solver state became non-finite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an API precondition (non-scalar loss, missing tape, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A design point violates the ordering or same-kind rule.
class ConstraintError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or missing data in records, manifests or files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace adapterlab
