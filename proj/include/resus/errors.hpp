// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace resus {

// Error taxonomy mirrored by the CLI exit codes:
//   ConfigError -> 2, DataError -> 3, TrainingDiverged -> 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A user log too short to carve out the requested support set.
struct InsufficientHistoryError : DataError {
  using DataError::DataError;
};

// SPD factorization failed even after jitter escalation.
struct SingularSystemError : std::runtime_error {
  double condition_hint;
  SingularSystemError(const std::string& msg, double cond)
      : std::runtime_error(msg), condition_hint(cond) {}
};

// Checkpoint header does not match the requested architecture/config.
struct SpecMismatchError : ConfigError {
  using ConfigError::ConfigError;
};

struct TrainingDivergedError : std::runtime_error {
  std::string last_checkpoint;  // may be empty if nothing was saved yet
  TrainingDivergedError(const std::string& msg, std::string ckpt)
      : std::runtime_error(msg), last_checkpoint(std::move(ckpt)) {}
};

}  // namespace resus
