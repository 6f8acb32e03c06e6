// Test-only oracles: independent numerical routes (quadrature, bisection,
// finite differences, naive summation) used to check the library
// implementations. Nothing here calls the code paths under test.

#ifndef ELVS_TESTS_ORACLES_HPP
#define ELVS_TESTS_ORACLES_HPP

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>

namespace oracles {

/// Adaptive Simpson quadrature on [a, b].
inline double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                               double tol = 1e-12, int depth = 40) {
  auto simpson = [&](double lo, double hi) {
    const double mid = 0.5 * (lo + hi);
    return (hi - lo) / 6.0 * (f(lo) + 4.0 * f(mid) + f(hi));
  };
  std::function<double(double, double, double, int)> rec = [&](double lo, double hi, double whole,
                                                               int d) -> double {
    const double mid = 0.5 * (lo + hi);
    const double left = simpson(lo, mid);
    const double right = simpson(mid, hi);
    if (d <= 0 || std::fabs(left + right - whole) <= 15.0 * tol * std::max(1.0, std::fabs(whole)))
      return left + right + (left + right - whole) / 15.0;
    return rec(lo, mid, left, d - 1) + rec(mid, hi, right, d - 1);
  };
  return rec(a, b, simpson(a, b), depth);
}

/// Bisection root finder on a bracketing interval.
inline double bisect(const std::function<double(double)>& f, double lo, double hi,
                     double tol = 1e-14, int max_iter = 200) {
  double flo = f(lo), fhi = f(hi);
  if (flo == 0.0) return lo;
  if (fhi == 0.0) return hi;
  if ((flo > 0.0) == (fhi > 0.0)) throw std::runtime_error("bisect: no sign change");
  for (int it = 0; it < max_iter && hi - lo > tol; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double fm = f(mid);
    if (fm == 0.0) return mid;
    if ((fm > 0.0) == (flo > 0.0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

/// Central finite-difference derivative in one coordinate.
inline double central_diff(const std::function<double(Eigen::VectorXd)>& f,
                           const Eigen::VectorXd& x, Eigen::Index coord, double h) {
  Eigen::VectorXd xp = x, xm = x;
  xp[coord] += h;
  xm[coord] -= h;
  return (f(xp) - f(xm)) / (2.0 * h);
}

}  // namespace oracles

#endif  // ELVS_TESTS_ORACLES_HPP
