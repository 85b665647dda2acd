#pragma once

#include <stdexcept>
#include <string>

namespace csformer {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes that no broadcast rule covers, or extents that violate an
/// op's divisibility requirements.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// backward() on a tape that has already been consumed, or on a tensor that
/// was never recorded.
class TapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace csformer
