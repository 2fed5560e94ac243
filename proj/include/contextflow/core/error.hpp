#pragma once

#include <stdexcept>
#include <string>

namespace contextflow {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration: bad shapes, unknown keys, inconsistent widths.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Matrix singular to working precision (pivot magnitude < 1e-12).
// During training this is a step-rejection signal, not a crash.
class SingularMatrixError : public Error {
 public:
  explicit SingularMatrixError(const std::string& msg) : Error(msg) {}
};

// A surjective encoder was asked to decode a value outside its image.
class DecodeError : public Error {
 public:
  explicit DecodeError(const std::string& msg) : Error(msg) {}
};

// Checkpoint file problems: bad magic, version, digest or fingerprint.
class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& msg) : Error(msg) {}
};

// Data ingestion problems: truncated files, bad magic numbers, missing fields.
class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// Non-finite values where finiteness is required (NaN loss, etc.).
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& msg) : Error(msg) {}
};

}  // namespace contextflow
