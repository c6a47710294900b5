#pragma once

#include <stdexcept>
#include <string>

namespace bayesgrid {

/// Caller broke a documented precondition (bad dimensions, invalid parameters).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A requested quantity does not exist for the given inputs (e.g. no stationary law).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Linear algebra broke down; carries the condition estimate of the offending matrix.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, double condition)
      : std::runtime_error(what + " (condition estimate " + std::to_string(condition) + ")"),
        condition_(condition) {}
  double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

/// An iterative scheme exhausted its budget.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double last_delta)
      : std::runtime_error(what + " (last change " + std::to_string(last_delta) + ")"),
        last_delta_(last_delta) {}
  double last_delta() const noexcept { return last_delta_; }

 private:
  double last_delta_;
};

}  // namespace bayesgrid
