#pragma once

#include <stdexcept>
#include <string>

namespace rgm {

// Invalid argument, shape mismatch or out-of-range setting.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Too few points / pairs, collinear sets, crops that leave nothing.
class DegenerateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN / Inf encountered in a numeric path.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File parsed but its header/version is not what we expect.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

// File ended early or a record is inconsistent with its header.
class CorruptionError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace rgm
