#pragma once

#include <stdexcept>
#include <string>

namespace rahf {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A configuration value violates an invariant. The message leads with the
/// key path or invariant name.
struct ConfigError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

/// Tensor shapes, layer indices or example ids do not line up.
struct ShapeError : Error {
  using Error::Error;
};

/// Non-finite loss, divergence, or a failed consistency check during training.
struct TrainingError : Error {
  using Error::Error;
};

}  // namespace rahf
