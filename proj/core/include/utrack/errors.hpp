#pragma once

#include <stdexcept>
#include <string>

namespace utrack {

/// Invalid or inconsistent configuration (bad file, unknown key, missing
/// model bucket). Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or incompatible data (checkpoint dim mismatch, bad CSV).
/// Maps to CLI exit code 3.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// A caller broke a documented precondition. Maps to CLI exit code 1.
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

}  // namespace utrack
