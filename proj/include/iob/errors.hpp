#pragma once

#include <stdexcept>
#include <string>

namespace iob {

/// Vector or matrix dimensions do not line up.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// An input lies outside the domain an operation is defined on.
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// A gradient, loss or target contains NaN or infinity.
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Fixed-point iteration hit its cap before reaching tolerance.
struct ConvergenceError : std::runtime_error {
  ConvergenceError(const std::string& what, double residual)
      : std::runtime_error(what), residual(residual) {}
  double residual;
};

/// Invalid experiment or training configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace iob
