#pragma once

#include <stdexcept>
#include <string>

namespace pbrl {

/// Tensor extents do not line up; the message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration value is out of its legal range or a required key is missing.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// API misuse: stale forward cache, stepping a finished episode, bad index.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// The requested value does not exist yet (no snapshot published, empty history).
class NotReadyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Estimated memory footprint exceeds the configured budget.
class ResourceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One side of the actor/learner pipeline waited past its timeout for the other.
class DataStarvationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Kernel matrix could not be factorized even after adding jitter.
class DegeneratePopulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pbrl
