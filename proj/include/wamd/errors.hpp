#pragma once

#include <stdexcept>
#include <string>

namespace wamd {

/// Invalid argument values (malformed boxes, probabilities out of range, ...).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Incompatible configuration, shapes or checkpoints.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed annotation, report or checkpoint files.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Synthetic scene generation could not satisfy the request.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A metric is undefined for the given input (e.g. no ground truth).
class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// 3D initialization failed (no valid depth inside the region).
class InitializationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace wamd
