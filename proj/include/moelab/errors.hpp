#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

// Base for all library errors. Subclasses map to CLI exit codes:
// ConfigError -> 2, DivergenceError -> 3, everything else -> 1.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// Violated caller contract (non-scalar loss, non-normalized rows, k > n, ...).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Checkpoint loading failures, one subclass per failure mode so tests can
// tell them apart.
class LoadError : public Error {
 public:
  explicit LoadError(const std::string& msg) : Error(msg) {}
};

class CorruptManifestError : public LoadError {
 public:
  explicit CorruptManifestError(const std::string& msg) : LoadError(msg) {}
};

class ShapeMismatchError : public LoadError {
 public:
  explicit ShapeMismatchError(const std::string& msg) : LoadError(msg) {}
};

class TruncatedBlobError : public LoadError {
 public:
  explicit TruncatedBlobError(const std::string& msg) : LoadError(msg) {}
};

}  // namespace moelab
