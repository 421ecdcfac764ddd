#pragma once

#include <stdexcept>
#include <string>

namespace promptct {

// Dimension mismatch between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A value outside the accepted domain (negative threshold, bad view count, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Autodiff graph misuse: stale tape, foreign variable, non-scalar loss.
class ConsistencyError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Bad magic, version or truncated payload in one of the binary formats.
class CorruptFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf surfaced during a computation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint does not match the model it is loaded into.
class ParameterMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace promptct
