#pragma once

#include <stdexcept>

namespace patchforge {

// Operand dimensions do not conform.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A config or argument violates a documented precondition.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dataset content is inconsistent (missing parallels, bad token ids, malformed lines).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operations invoked out of order, e.g. a second unfrozen patch.
class SequencingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A NaN or Inf showed up where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace patchforge
