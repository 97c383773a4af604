#pragma once

#include <stdexcept>
#include <string>

namespace ugcem {

// Non-finite or out-of-domain input to a pure numeric routine.
struct DomainError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Shape disagreement between arguments (dimensions, member index, ...).
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed or truncated file content.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A required input artifact (dataset, checkpoint) is missing or unreadable.
struct MissingInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training or rollout produced non-finite numbers.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnsupportedModeError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace ugcem
