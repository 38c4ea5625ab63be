#pragma once

#include <stdexcept>
#include <string>

namespace dfdg {

/// Base class of every error raised by the library. The CLI maps
/// NumericError to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid hyperparameters, builder arguments or CLI options.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation precondition (empty batch, non-scalar root, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Class or element index out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset, checkpoint or config file.
class ParseError : public Error {
 public:
  using Error::Error;
};

}  // namespace dfdg
