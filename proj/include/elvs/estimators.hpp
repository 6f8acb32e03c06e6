#ifndef ELVS_ESTIMATORS_HPP
#define ELVS_ESTIMATORS_HPP

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "elvs/el_core.hpp"
#include "elvs/errors.hpp"
#include "elvs/population.hpp"
#include "elvs/ps_fit.hpp"
#include "elvs/smoothing.hpp"

namespace elvs {

enum class EstimatorKind { Full, ElMar, Ps, El1, El2, ElKnownPi, RpsOpt };

inline const char* estimator_label(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::Full: return "full";
    case EstimatorKind::ElMar: return "el-mar";
    case EstimatorKind::Ps: return "ps";
    case EstimatorKind::El1: return "el1";
    case EstimatorKind::El2: return "el2";
    case EstimatorKind::ElKnownPi: return "el-known-pi";
    case EstimatorKind::RpsOpt: return "rps-opt";
  }
  return "?";
}

inline EstimatorKind parse_estimator(const std::string& name) {
  for (EstimatorKind k : {EstimatorKind::Full, EstimatorKind::ElMar, EstimatorKind::Ps,
                          EstimatorKind::El1, EstimatorKind::El2, EstimatorKind::ElKnownPi,
                          EstimatorKind::RpsOpt})
    if (name == estimator_label(k)) return k;
  throw DataError("unknown estimator '" + name + "'");
}

/// Rule for the bias-calibration target W.
enum class WTargetRule {
  SmoothedMean,      // N^{-1} sum_i pi_hat(x_i; phi)
  SamplingFraction,  // n/N
};

/// Full-sample mean; synthetic/oracle frames only.
inline double theta_full(const PopulationFrame& frame) {
  if (!frame.has_oracle())
    throw DataError("theta_full: full outcome vector unavailable on this frame");
  return frame.oracle().y_full.mean();
}

/// Selection probabilities pi(x_i, y_i; phi_hat) for the sample units.
inline VectorXd ps_sample_probs(const PopulationFrame& frame, const PsParams& ps) {
  const auto& resp = frame.respondents();
  VectorXd pi(static_cast<Index>(resp.size()));
  for (Index j = 0; j < pi.size(); ++j) {
    const Index i = resp[static_cast<size_t>(j)];
    pi[j] = ps_prob(frame.x().row(i), frame.delta()[i] == 1 ? frame.y(i) : 0.0, ps);
  }
  return pi;
}

/// N^{-1} sum over all units of the smoothed probability.
inline double smoothed_mean_target(const PopulationFrame& frame, const SmoothedPsModel& model) {
  double s = 0.0;
  for (Index i = 0; i < frame.n_units(); ++i) s += smoothed_pi(frame.x().row(i), model);
  return s / static_cast<double>(frame.n_units());
}

/// Inverse-probability (propensity score) estimator
///   N^{-1} sum_{delta=1} y_i / pi(x_i, y_i; phi_hat).
inline double theta_ps(const PopulationFrame& frame, const PsParams& ps) {
  double s = 0.0;
  for (Index i : frame.respondents()) {
    const double lp = ps_linear_predictor(frame.x().row(i), frame.y(i), ps);
    s += (1.0 + detail::exp_clamped(-lp)) * frame.y(i);
  }
  return s / static_cast<double>(frame.n_units());
}

struct ElEstimate {
  double theta = std::numeric_limits<double>::quiet_NaN();
  ElSolution solution;
  double w_target = std::numeric_limits<double>::quiet_NaN();
};

/// Two-step empirical-likelihood estimator. The sample probabilities come
/// from the fitted outcome-dependent model; the bias-calibration target is
/// the population mean of the smoothed probabilities (or n/N). El2 adds the
/// benchmarking constraints on the x means.
inline ElEstimate theta_el(const PopulationFrame& frame, const PsParams& ps,
                           const SmoothedPsModel& smoothed, EstimatorKind kind,
                           WTargetRule rule = WTargetRule::SmoothedMean,
                           const ElOptions& options = {}) {
  if (kind != EstimatorKind::El1 && kind != EstimatorKind::El2)
    throw DataError("theta_el: kind must be el1 or el2");
  ElEstimate out;
  out.w_target = rule == WTargetRule::SmoothedMean
                     ? smoothed_mean_target(frame, smoothed)
                     : static_cast<double>(frame.sample_size()) /
                           static_cast<double>(frame.n_units());
  ConstraintSet constraints = build_bias_calibration(ps_sample_probs(frame, ps), out.w_target);
  if (kind == EstimatorKind::El2) constraints = hstack(constraints, build_benchmarking(frame));
  out.solution = el_solve(constraints, options);
  out.theta = mele(out.solution, frame.y_sample());
  return out;
}

enum class KnownPiWRule { ExactMean, SamplingFraction };

/// Empirical-likelihood estimator with known selection probabilities
/// (probability samples, or synthetic oracle runs). Applies the bias
/// calibration on the true pi plus the benchmarking constraints.
inline ElEstimate theta_el_known_pi(const PopulationFrame& frame,
                                    KnownPiWRule rule = KnownPiWRule::ExactMean,
                                    const ElOptions& options = {}) {
  if (!frame.has_true_pi())
    throw DataError("theta_el_known_pi: true selection probabilities unavailable");
  const VectorXd& pi_full = frame.oracle().true_pi;
  const auto& resp = frame.respondents();
  VectorXd pi_sample(static_cast<Index>(resp.size()));
  for (Index j = 0; j < pi_sample.size(); ++j) pi_sample[j] = pi_full[resp[static_cast<size_t>(j)]];

  ElEstimate out;
  out.w_target = rule == KnownPiWRule::ExactMean
                     ? pi_full.mean()
                     : static_cast<double>(frame.sample_size()) /
                           static_cast<double>(frame.n_units());
  ConstraintSet constraints =
      hstack(build_bias_calibration(pi_sample, out.w_target), build_benchmarking(frame));
  out.solution = el_solve(constraints, options);
  out.theta = mele(out.solution, frame.y_sample());
  return out;
}

struct ElMarEstimate {
  double theta = std::numeric_limits<double>::quiet_NaN();
  ElSolution solution;
  PsParams mar;
  double w_target = std::numeric_limits<double>::quiet_NaN();
};

/// Empirical-likelihood estimator under a missing-at-random working model:
/// logistic regression of delta on (1, x), then the same constraint set as
/// El2. With an x-only model the smoothed probability equals the fitted one,
/// so no outcome model is involved.
inline ElMarEstimate theta_el_mar(const PopulationFrame& frame, const ElOptions& options = {}) {
  std::vector<Index> covariates;
  for (Index j = 0; j < frame.n_covariates(); ++j) covariates.push_back(j);

  ElMarEstimate out;
  out.mar = fit_mar_logistic(frame, covariates);

  double wsum = 0.0;
  for (Index i = 0; i < frame.n_units(); ++i)
    wsum += ps_prob(frame.x().row(i), 0.0, out.mar);  // y unused: MAR model
  out.w_target = wsum / static_cast<double>(frame.n_units());

  ConstraintSet constraints = hstack(
      build_bias_calibration(ps_sample_probs(frame, out.mar), out.w_target),
      build_benchmarking(frame));
  out.solution = el_solve(constraints, options);
  out.theta = mele(out.solution, frame.y_sample());
  return out;
}

namespace detail {

/// Greedy keep-first column selection: a column is dropped when its residual
/// after projection on the kept columns falls below the threshold.
inline std::vector<Index> independent_columns(const MatrixXd& m, double threshold = 1e-10) {
  std::vector<Index> kept;
  std::vector<VectorXd> basis;  // orthonormal span of the kept columns
  for (Index j = 0; j < m.cols(); ++j) {
    const VectorXd col = m.col(j);
    const double norm = col.norm();
    if (!(norm > 0.0)) continue;
    VectorXd resid = col;
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& b : basis) resid -= b.dot(resid) * b;
    if (resid.norm() > threshold * norm) {
      kept.push_back(j);
      basis.push_back(resid / resid.norm());
    }
  }
  return kept;
}

}  // namespace detail

/// Optimal regression-adjusted inverse-probability estimator. Solves the
/// stacked moment system
///   sum_S O_i (y_i - x_i'beta - b_i'gamma) x_i = 0
///   sum_S O_i (y_i - x_i'beta - b_i'gamma) h_i = 0,   O_i = (1-pi_i)/pi_i,
/// as weighted linear least squares after removing duplicated columns
/// (x enters both the regressors and the instrument, so the raw stacked
/// system is rank-deficient by construction; duplicates are resolved in
/// favor of the x block, with zero coefficients reported for dropped b
/// columns). Returns N^{-1} sum_i { x_i'beta + delta_i/pi_i (y_i - x_i'beta) }.
inline double theta_rps_optimal(const PopulationFrame& frame, const PsParams& ps) {
  const auto& resp = frame.respondents();
  const Index ns = static_cast<Index>(resp.size());
  const Index k = frame.n_covariates();
  const Index qp = ps.instrument.dim(k);
  const Index q = ps.dim();

  MatrixXd regressors(ns, k + qp);   // [x, b]
  MatrixXd instruments(ns, k + q);   // [x, h]
  VectorXd w(ns), ys(ns);
  for (Index j = 0; j < ns; ++j) {
    const Index i = resp[static_cast<size_t>(j)];
    const double lp = ps_linear_predictor(frame.x().row(i), frame.y(i), ps);
    w[j] = detail::exp_clamped(-lp);
    ys[j] = frame.y(i);
    regressors.block(j, 0, 1, k) = frame.x().row(i);
    regressors.block(j, k, 1, qp) = instrument_row(frame.x().row(i), ps.instrument).transpose();
    instruments.block(j, 0, 1, k) = frame.x().row(i);
    instruments.block(j, k, 1, q) = h_grad(frame.x().row(i), frame.y(i), ps).transpose();
  }

  const std::vector<Index> zcols = detail::independent_columns(regressors);
  const std::vector<Index> rcols = detail::independent_columns(instruments);

  MatrixXd z(ns, static_cast<Index>(zcols.size()));
  for (size_t j = 0; j < zcols.size(); ++j) z.col(static_cast<Index>(j)) = regressors.col(zcols[j]);
  MatrixXd r(ns, static_cast<Index>(rcols.size()));
  for (size_t j = 0; j < rcols.size(); ++j) r.col(static_cast<Index>(j)) = instruments.col(rcols[j]);

  const MatrixXd m = r.transpose() * w.asDiagonal() * z;
  const VectorXd rhs = r.transpose() * w.asDiagonal() * ys;

  Eigen::ColPivHouseholderQR<MatrixXd> qr(m);
  qr.setThreshold(1e-10);
  if (qr.rank() < z.cols())
    throw SingularSystemError(
        "theta_rps_optimal: singular moment system; remove collinear x or instrument columns");
  const VectorXd coef = qr.solve(rhs);

  VectorXd beta = VectorXd::Zero(k);
  for (size_t j = 0; j < zcols.size(); ++j)
    if (zcols[j] < k) beta[zcols[j]] = coef[static_cast<Index>(j)];

  double s = 0.0;
  for (Index i = 0; i < frame.n_units(); ++i) {
    const double fitted = frame.x().row(i).dot(beta);
    s += fitted;
    if (frame.delta()[i] == 1) {
      const double lp = ps_linear_predictor(frame.x().row(i), frame.y(i), ps);
      s += (1.0 + detail::exp_clamped(-lp)) * (frame.y(i) - fitted);
    }
  }
  return s / static_cast<double>(frame.n_units());
}

}  // namespace elvs

#endif  // ELVS_ESTIMATORS_HPP
