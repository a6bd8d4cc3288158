#pragma once

#include <stdexcept>
#include <string>

namespace mselab {

// Shape disagreements between MDPs, policies, encodings and tensors.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation (gamma >= 1,
// negative probabilities, unsupported environment sizes, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Valid arguments used in the wrong way (stepping a finished episode,
// passing an occupancy of the wrong kind, ...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN/Inf or a failed linear solve.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}

  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

}  // namespace mselab
