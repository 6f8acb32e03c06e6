#ifndef ELVS_EL_CORE_HPP
#define ELVS_EL_CORE_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "elvs/errors.hpp"
#include "elvs/population.hpp"

namespace elvs {

/// Linear constraints for the weight problem, stored centered:
/// u_ij = g_j(unit i) - target_j, one row per sample unit.
struct ConstraintSet {
  MatrixXd u;
  VectorXd targets;
  std::vector<std::string> labels;

  Index n() const { return u.rows(); }
  Index m() const { return u.cols(); }
};

/// Builds a constraint set from raw constraint values and targets.
inline ConstraintSet make_constraints(const MatrixXd& g, const VectorXd& targets,
                                      std::vector<std::string> labels) {
  if (g.cols() != targets.size() || static_cast<Index>(labels.size()) != g.cols())
    throw DataError("make_constraints: column/target/label count mismatch");
  if (!g.allFinite() || !targets.allFinite())
    throw DataError("make_constraints: non-finite constraint values");
  ConstraintSet c;
  c.u = g.rowwise() - targets.transpose();
  c.targets = targets;
  c.labels = std::move(labels);
  return c;
}

/// Bias-calibration constraint: the weighted mean of the selection
/// probabilities must equal the population-level target w_target
/// (mean smoothed probability, or the realized sampling fraction n/N).
inline ConstraintSet build_bias_calibration(const VectorXd& pi_sample, double w_target) {
  if (!(w_target > 0.0 && w_target < 1.0))
    throw DataError("build_bias_calibration: target must lie in (0,1)");
  for (Index i = 0; i < pi_sample.size(); ++i)
    if (!(pi_sample[i] > 0.0 && pi_sample[i] < 1.0))
      throw DataError("build_bias_calibration: propensity values must lie in (0,1)");
  VectorXd t(1);
  t[0] = w_target;
  return make_constraints(pi_sample, t, {"bias-calibration"});
}

/// Benchmarking constraints: weighted sample means of every x column must
/// equal the population means.
inline ConstraintSet build_benchmarking(const PopulationFrame& frame) {
  const auto& resp = frame.respondents();
  const Index n = static_cast<Index>(resp.size());
  const Index k = frame.n_covariates();
  MatrixXd g(n, k);
  for (Index j = 0; j < n; ++j) g.row(j) = frame.x().row(resp[static_cast<size_t>(j)]);
  const VectorXd targets = frame.x().colwise().mean();
  std::vector<std::string> labels;
  for (Index j = 0; j < k; ++j) labels.push_back("benchmark:" + frame.x_names()[static_cast<size_t>(j)]);
  return make_constraints(g, targets, std::move(labels));
}

/// Column-wise concatenation of two constraint sets over the same units.
inline ConstraintSet hstack(const ConstraintSet& a, const ConstraintSet& b) {
  if (a.n() != b.n()) throw DataError("hstack: row count mismatch");
  ConstraintSet c;
  c.u.resize(a.n(), a.m() + b.m());
  c.u << a.u, b.u;
  c.targets.resize(a.m() + b.m());
  c.targets << a.targets, b.targets;
  c.labels = a.labels;
  c.labels.insert(c.labels.end(), b.labels.begin(), b.labels.end());
  return c;
}

struct ElOptions {
  double tol = 1e-10;           // on the dual gradient inf-norm
  int max_iterations = 100;
  double rank_threshold = 1e-10;  // collinear constraint columns below this are dropped
};

struct ElSolution {
  VectorXd p;       // weights, strictly positive, sum to 1
  VectorXd lambda;  // dual multipliers (zero for dropped columns)
  int iterations = 0;
  bool converged = false;
  VectorXd constraint_residual;        // sum_i p_i u_ij for every original column
  std::vector<std::string> dropped;    // labels of collinear/degenerate columns
  std::vector<double> objective_trace;  // dual objective at accepted iterates

  /// Weights on the population scale (summing to the population size).
  VectorXd population_weights(double n_population) const { return n_population * p; }
};

/// Maximizes sum log p_i subject to sum p_i = 1 and sum p_i u_i = 0 through
/// the dual problem: minimize D(lambda) = -sum log(1 + lambda'u_i), which is
/// convex, by damped Newton with step halving keeping 1 + lambda'u_i >= 1/n
/// for every unit. Collinear constraint columns are dropped beforehand by a
/// rank-revealing QR. Infeasible targets (outside the convex hull of the
/// constraint values) raise InfeasibleError naming a violated constraint;
/// they are never repaired. Hitting the iteration cap returns converged=false.
inline ElSolution el_solve(const ConstraintSet& constraints, const ElOptions& options = {}) {
  const Index n = constraints.n();
  const Index m = constraints.m();
  if (n < 1) throw DataError("el_solve: empty sample");

  ElSolution sol;
  sol.p = VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  sol.lambda = VectorXd::Zero(m);
  sol.constraint_residual = VectorXd::Zero(m);
  if (m == 0) {
    sol.converged = true;
    return sol;
  }

  // Scale columns to unit max-abs for rank detection and conditioning.
  VectorXd scale(m);
  for (Index j = 0; j < m; ++j) scale[j] = std::max(constraints.u.col(j).cwiseAbs().maxCoeff(), 1e-300);
  MatrixXd us = constraints.u * scale.cwiseInverse().asDiagonal();

  Eigen::ColPivHouseholderQR<MatrixXd> qr(us);
  qr.setThreshold(options.rank_threshold);
  const Index rank = qr.rank();
  std::vector<Index> kept;
  {
    const auto& perm = qr.colsPermutation().indices();
    for (Index j = 0; j < rank; ++j) kept.push_back(perm[j]);
    std::sort(kept.begin(), kept.end());
    for (Index j = 0; j < m; ++j)
      if (std::find(kept.begin(), kept.end(), j) == kept.end())
        sol.dropped.push_back(constraints.labels[static_cast<size_t>(j)]);
  }

  MatrixXd uk(n, rank);
  for (Index j = 0; j < rank; ++j) uk.col(j) = us.col(kept[static_cast<size_t>(j)]);

  // Necessary feasibility: every column must change sign (or vanish).
  for (Index j = 0; j < rank; ++j) {
    const double lo = uk.col(j).minCoeff();
    const double hi = uk.col(j).maxCoeff();
    if (lo >= 0.0 || hi <= 0.0)
      throw InfeasibleError(
          "el_solve: target outside the convex hull of constraint values for '" +
              constraints.labels[static_cast<size_t>(kept[static_cast<size_t>(j)])] + "'",
          constraints.labels[static_cast<size_t>(kept[static_cast<size_t>(j)])]);
  }

  const double guard = 1.0 / static_cast<double>(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  VectorXd lam = VectorXd::Zero(rank);
  VectorXd d = VectorXd::Ones(n);  // 1 + lambda'u_i
  double objective = 0.0;          // -n^{-1} sum log d = 0 at lambda = 0

  auto violated_label = [&]() {
    Index worst = 0;
    (uk.transpose() * d.cwiseInverse()).cwiseAbs().maxCoeff(&worst);
    return constraints.labels[static_cast<size_t>(kept[static_cast<size_t>(worst)])];
  };

  bool converged = false;
  int it = 0;
  sol.objective_trace.push_back(objective);
  for (; it < options.max_iterations; ++it) {
    const VectorXd dinv = d.cwiseInverse();
    // gradient of the mean-form dual; equals -sum_i p_i u_i up to the final
    // renormalization, so the tolerance bounds the constraint residuals.
    const VectorXd grad = -inv_n * (uk.transpose() * dinv);
    if (grad.lpNorm<Eigen::Infinity>() <= options.tol) {
      converged = true;
      break;
    }
    const MatrixXd hess =
        inv_n * (uk.transpose() * dinv.array().square().matrix().asDiagonal() * uk);
    Eigen::LDLT<MatrixXd> ldlt(hess);
    VectorXd step = ldlt.solve(-grad);
    if (ldlt.info() != Eigen::Success || !step.allFinite())
      throw SingularSystemError("el_solve: singular dual Hessian");

    const VectorXd du = uk * step;
    double t = 1.0;
    double t_feasible = 0.0;  // largest tried step keeping the guard
    bool accepted = false;
    for (int h = 0; h < 60; ++h) {
      const VectorXd d_new = d + t * du;
      if (d_new.minCoeff() >= guard) {
        if (t_feasible == 0.0) t_feasible = t;
        const double obj_new = -inv_n * d_new.array().log().sum();
        if (obj_new < objective) {
          lam += t * step;
          d = d_new;
          objective = obj_new;
          accepted = true;
          break;
        }
      }
      t *= 0.5;
    }
    if (!accepted && t_feasible > 0.0) {
      // Near the optimum the objective decrease falls below double rounding
      // before the gradient reaches the tolerance; accept on gradient-norm
      // decrease instead. Restricted to tiny gradients so genuinely
      // infeasible problems still surface as a collapsed line search.
      const double gnorm = grad.lpNorm<Eigen::Infinity>();
      if (gnorm <= 1e-6) {
        const VectorXd d_new = d + t_feasible * du;
        const double gnorm_new =
            (inv_n * (uk.transpose() * d_new.cwiseInverse())).lpNorm<Eigen::Infinity>();
        if (gnorm_new < 0.9 * gnorm) {
          lam += t_feasible * step;
          d = d_new;
          objective = -inv_n * d.array().log().sum();
          accepted = true;
        }
      }
    }
    if (!accepted)
      throw InfeasibleError("el_solve: line search collapsed; constraint '" + violated_label() +
                                "' appears infeasible",
                            violated_label());
    sol.objective_trace.push_back(objective);
  }
  sol.iterations = it;
  sol.converged = converged;

  sol.p = (guard * d.cwiseInverse().array()).matrix();
  sol.p /= sol.p.sum();  // removes O(1e-14) drift
  for (Index j = 0; j < rank; ++j)
    sol.lambda[kept[static_cast<size_t>(j)]] = lam[j] / scale[kept[static_cast<size_t>(j)]];
  sol.constraint_residual = constraints.u.transpose() * sol.p;
  return sol;
}

/// Maximum empirical-likelihood estimate of the mean: sum_i p_i y_i.
inline double mele(const ElSolution& solution, const VectorXd& y_sample) {
  if (!solution.converged)
    throw NonConvergenceError("mele: refusing weights from an unconverged solve");
  if (solution.p.size() != y_sample.size()) throw DataError("mele: weight/outcome length mismatch");
  return solution.p.dot(y_sample);
}

}  // namespace elvs

#endif  // ELVS_EL_CORE_HPP
