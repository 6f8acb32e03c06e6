#ifndef ELVS_ERRORS_HPP
#define ELVS_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace elvs {

/// Malformed or inconsistent input data (bad CSV row, degenerate frame, ...).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// An iterative solver exhausted its iteration budget or stalled.
class NonConvergenceError : public std::runtime_error {
 public:
  explicit NonConvergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A linear system required by an estimator is rank-deficient.
class SingularSystemError : public std::runtime_error {
 public:
  explicit SingularSystemError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Empirical-likelihood constraint targets lie outside the convex hull of the
/// constraint values; the weighting problem has no solution.
class InfeasibleError : public std::runtime_error {
 public:
  InfeasibleError(const std::string& msg, std::string label)
      : std::runtime_error(msg), constraint_label(std::move(label)) {}
  std::string constraint_label;
};

}  // namespace elvs

#endif  // ELVS_ERRORS_HPP
