#pragma once

#include <stdexcept>
#include <string>

namespace dtn {

/// Tensor operands with incompatible extents.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration violates a component invariant (divisibility, ranges, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Degenerate or non-overlapping boxes where a valid box is required.
class GeometryError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// NaN/Inf produced from finite inputs, or non-finite gradients and losses.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed dataset, annotation or image file.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Corrupt checkpoint or checkpoint incompatible with the model config.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Detections that reference images missing from the evaluated dataset.
class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace dtn
