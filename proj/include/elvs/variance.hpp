#ifndef ELVS_VARIANCE_HPP
#define ELVS_VARIANCE_HPP

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "elvs/el_core.hpp"
#include "elvs/errors.hpp"
#include "elvs/estimators.hpp"
#include "elvs/normal.hpp"
#include "elvs/population.hpp"
#include "elvs/ps_fit.hpp"
#include "elvs/smoothing.hpp"

namespace elvs {

/// Per-unit linearized contributions of an estimator, defined for all N
/// units (non-respondents enter through the covariate terms only), together
/// with the fitted auxiliary coefficients that produced them.
struct InfluenceVector {
  VectorXd eta;
  std::string estimator;
  double beta1 = std::numeric_limits<double>::quiet_NaN();
  VectorXd beta2;
  VectorXd gamma;
  VectorXd kappa1;
  VectorXd kappa2;
};

/// V = {N(N-1)}^{-1} sum_i (eta_i - mean)^2.
inline double var_from_influence(const VectorXd& eta) {
  const Index n = eta.size();
  if (n < 2) throw DataError("var_from_influence: need at least two units");
  const double mean = eta.mean();
  const double ss = (eta.array() - mean).square().sum();
  return ss / (static_cast<double>(n) * static_cast<double>(n - 1));
}

/// Coefficients of the linearization regression. The intercept carries the
/// normalization constraint sum p_i = 1: one regression coefficient per
/// empirical-likelihood constraint.
struct LinearizationFit {
  double intercept = 0.0;
  double beta1 = 0.0;  // on pi - W
  VectorXd beta2;      // on x - xbar (zero when benchmarking is off)
};

/// Weighted least squares of y on (1, pi_i - W, x_i - xbar) over the sample,
/// with weights pi_i^{-2}; the regression behind the known-pi linearization.
inline LinearizationFit beta_known_pi(const PopulationFrame& frame, const VectorXd& pi_full,
                                      double w) {
  if (pi_full.size() != frame.n_units())
    throw DataError("beta_known_pi: pi vector must cover all units");
  const Index k = frame.n_covariates();
  const Index p = 2 + k;
  const Eigen::RowVectorXd xbar = frame.x().colwise().mean();

  MatrixXd a = MatrixXd::Zero(p, p);
  VectorXd c = VectorXd::Zero(p);
  VectorXd v(p);
  for (Index i : frame.respondents()) {
    const double pi = pi_full[i];
    v[0] = 1.0;
    v[1] = pi - w;
    for (Index j = 0; j < k; ++j) v[j + 2] = frame.x()(i, j) - xbar[j];
    const double wgt = 1.0 / (pi * pi);
    a.noalias() += wgt * v * v.transpose();
    c += wgt * frame.y(i) * v;
  }
  Eigen::ColPivHouseholderQR<MatrixXd> qr(a);
  qr.setThreshold(1e-12);
  if (qr.rank() < p)
    throw SingularSystemError("beta_known_pi: singular regression design");
  const VectorXd beta = qr.solve(c);
  LinearizationFit fit;
  fit.intercept = beta[0];
  fit.beta1 = beta[1];
  fit.beta2 = beta.tail(k);
  return fit;
}

namespace detail {

/// sum_S (pi_i^{-1} - 1) b_i h_i'; the bracket inverted in the gamma and
/// kappa expressions.
inline MatrixXd response_bracket(const PopulationFrame& frame, const PsParams& ps) {
  const Index qp = ps.instrument.dim(frame.n_covariates());
  const Index q = ps.dim();
  MatrixXd bracket = MatrixXd::Zero(qp, q);
  VectorXd b(qp), h(q);
  for (Index i : frame.respondents()) {
    const double o = exp_clamped(-ps_linear_predictor(frame.x().row(i), frame.y(i), ps));
    fill_instrument_row(frame.x().row(i), ps.instrument, b);
    fill_h_row(frame.x().row(i), frame.y(i), ps, h);
    bracket.noalias() += o * b * h.transpose();
  }
  return bracket;
}

/// Solves gamma' * bracket = num' for gamma (bracket must be square).
inline VectorXd solve_row_system(const MatrixXd& bracket, const VectorXd& num,
                                 const char* what) {
  if (bracket.rows() != bracket.cols())
    throw SingularSystemError(std::string(what) + ": needs dim(b) == dim(h)");
  Eigen::ColPivHouseholderQR<MatrixXd> qr(bracket.transpose());
  qr.setThreshold(1e-12);
  if (qr.rank() < bracket.rows())
    throw SingularSystemError(std::string(what) + ": singular bracket matrix");
  return qr.solve(num);
}

}  // namespace detail

/// gamma' = { sum_S (pi^{-1}-1) y h' } { sum_S (pi^{-1}-1) b h' }^{-1}.
inline VectorXd gamma_hat(const PopulationFrame& frame, const PsParams& ps) {
  const Index q = ps.dim();
  VectorXd num = VectorXd::Zero(q);
  VectorXd h(q);
  for (Index i : frame.respondents()) {
    const double o =
        detail::exp_clamped(-ps_linear_predictor(frame.x().row(i), frame.y(i), ps));
    detail::fill_h_row(frame.x().row(i), frame.y(i), ps, h);
    num += o * frame.y(i) * h;
  }
  return detail::solve_row_system(detail::response_bracket(frame, ps), num, "gamma_hat");
}

/// kappa1' = -{ sum_i g_hat(x_i)' } { sum_S (pi^{-1}-1) b h' }^{-1};
/// the numerator runs over all N units.
inline VectorXd kappa1_hat(const PopulationFrame& frame, const PsParams& ps,
                           const SmoothedPsModel& smoothed) {
  VectorXd num = VectorXd::Zero(ps.dim());
  for (Index i = 0; i < frame.n_units(); ++i) num += g_hat(frame.x().row(i), smoothed);
  return detail::solve_row_system(detail::response_bracket(frame, ps), -num, "kappa1_hat");
}

/// kappa2' = { sum_S (pi^{-1}-1)(y - c - x'beta2) h' } { sum_S (pi^{-1}-1) b h' }^{-1}.
/// The level c is the intercept of the linearization regression (zero when
/// the regression had none); the residual must be taken around the full
/// fitted level or a constant offset leaks into the correction.
inline VectorXd kappa2_hat(const PopulationFrame& frame, const PsParams& ps,
                           const VectorXd& beta2, double intercept = 0.0) {
  const Index q = ps.dim();
  VectorXd num = VectorXd::Zero(q);
  VectorXd h(q);
  for (Index i : frame.respondents()) {
    const double o =
        detail::exp_clamped(-ps_linear_predictor(frame.x().row(i), frame.y(i), ps));
    const double resid = frame.y(i) - intercept - frame.x().row(i).dot(beta2);
    detail::fill_h_row(frame.x().row(i), frame.y(i), ps, h);
    num += o * resid * h;
  }
  return detail::solve_row_system(detail::response_bracket(frame, ps), num, "kappa2_hat");
}

struct VarReport {
  double variance = std::numeric_limits<double>::quiet_NaN();
  InfluenceVector influence;
};

namespace detail {

/// Stacked per-unit estimating contributions of the full two-step pipeline,
/// used to linearize the empirical-likelihood estimator exactly. Parameter
/// layout: phi (q), alpha (1+k), W, xbar (k, benchmarking only),
/// lambda (1 + k·benchmarking), theta.
struct ElPipelineStack {
  const PopulationFrame& frame;
  const PsParams& ps;
  bool benchmarking;
  bool ht_target;  // W equation: delta - W instead of pi_hat(x) - W
  double sigma2;
  Index k, q, qp, p, m, dim;
  Index o_phi = 0, o_alpha, o_w, o_xbar, o_lam, o_theta;

  ElPipelineStack(const PopulationFrame& f, const PsParams& model, bool bench, bool ht,
                  double s2)
      : frame(f), ps(model), benchmarking(bench), ht_target(ht), sigma2(s2) {
    k = frame.n_covariates();
    q = ps.dim();
    qp = ps.instrument.dim(k);
    p = 1 + k;
    if (!ps.includes_y)
      throw DataError("var_el: selection model must depend on the outcome");
    if (qp != q || qp != p)
      throw SingularSystemError(
          "var_el: exact linearization needs dim(b) == dim(phi) == dim(alpha); "
          "use the default instrument");
    o_alpha = q;
    o_w = o_alpha + p;
    o_xbar = o_w + 1;
    o_lam = o_xbar + (benchmarking ? k : 0);
    m = 1 + (benchmarking ? k : 0);
    o_theta = o_lam + m;
    dim = o_theta + 1;
  }

  void g_unit(const VectorXd& tau, Index i, VectorXd& out, VectorXd& b, VectorXd& v) const {
    out.setZero();
    const auto x_row = frame.x().row(i);
    const int d = frame.delta()[i];
    const double phi_y = tau[q - 1];

    double lp_x = tau[0];
    for (size_t j = 0; j < ps.ps_covariates.size(); ++j)
      lp_x += tau[static_cast<Index>(j) + 1] * x_row[ps.ps_covariates[j]];
    double xa = tau[o_alpha];
    for (Index j = 0; j < k; ++j) xa += tau[o_alpha + 1 + j] * x_row[j];

    fill_instrument_row(x_row, ps.instrument, b);
    if (d == 1) {
      const double y = frame.y(i);
      const double omega_m1 = exp_clamped(-lp_x - phi_y * y);
      const double e_cal = exp_clamped(-lp_x - phi_y * xa + 0.5 * phi_y * phi_y * sigma2);
      out.segment(0, qp) = omega_m1 * b;
      out.segment(o_alpha, qp) = e_cal * b;
    } else {
      out.segment(0, qp) = -b;
      out.segment(o_alpha, qp) = -b;
    }

    if (ht_target) {
      out[o_w] = static_cast<double>(d) - tau[o_w];
    } else {
      const double spi = expit(lp_x + phi_y * xa - 0.5 * phi_y * phi_y * sigma2);
      out[o_w] = spi - tau[o_w];
    }
    if (benchmarking)
      for (Index j = 0; j < k; ++j) out[o_xbar + j] = x_row[j] - tau[o_xbar + j];

    if (d == 1) {
      const double pi_i = expit(lp_x + phi_y * frame.y(i));
      v[0] = pi_i - tau[o_w];
      if (benchmarking)
        for (Index j = 0; j < k; ++j) v[1 + j] = x_row[j] - tau[o_xbar + j];
      double denom = 1.0;
      for (Index j = 0; j < m; ++j) denom += tau[o_lam + j] * v[j];
      for (Index j = 0; j < m; ++j) out[o_lam + j] = v[j] / denom;
      out[o_theta] = (frame.y(i) - tau[o_theta]) / denom;
    }
  }

  VectorXd g_mean(const VectorXd& tau) const {
    VectorXd acc = VectorXd::Zero(dim), tmp(dim), b(qp), v(m);
    for (Index i = 0; i < frame.n_units(); ++i) {
      g_unit(tau, i, tmp, b, v);
      acc += tmp;
    }
    return acc / static_cast<double>(frame.n_units());
  }
};

}  // namespace detail

/// Linearization variance of the inverse-probability estimator:
/// eta_i = b_i'gamma + delta_i/pi_i (y_i - b_i'gamma).
inline VarReport var_ps(const PopulationFrame& frame, const PsParams& ps) {
  const Index n = frame.n_units();
  VarReport out;
  out.influence.estimator = "ps";
  out.influence.gamma = gamma_hat(frame, ps);
  out.influence.eta.resize(n);
  for (Index i = 0; i < n; ++i) {
    const double fitted = instrument_row(frame.x().row(i), ps.instrument).dot(out.influence.gamma);
    double eta = fitted;
    if (frame.delta()[i] == 1) {
      const double lp = ps_linear_predictor(frame.x().row(i), frame.y(i), ps);
      eta += (1.0 + detail::exp_clamped(-lp)) * (frame.y(i) - fitted);
    }
    out.influence.eta[i] = eta;
  }
  out.variance = var_from_influence(out.influence.eta);
  return out;
}

/// Linearization variance of the two-step empirical-likelihood estimator.
/// The whole pipeline (selection-model fit, outcome-model calibration, the
/// target means, the dual solve, and the weighted mean) is one stack of
/// estimating equations; the influence values are the theta components of
/// the stacked sandwich,
///   eta_i = theta_hat - z' g_i(tau_hat),   A' z = e_theta,
/// with A the Jacobian of the mean estimating function, taken by central
/// finite differences. This keeps every uncertainty channel, including the
/// response of alpha_hat and the calibration target to phi_hat, which the
/// per-term plug-in corrections miss. Auxiliary regression and kappa
/// diagnostics are reported alongside.
inline VarReport var_el(const PopulationFrame& frame, const PsParams& ps,
                        const SmoothedPsModel& smoothed, bool benchmarking = true,
                        WTargetRule rule = WTargetRule::SmoothedMean) {
  const Index n = frame.n_units();
  const Index k = frame.n_covariates();
  const double w = rule == WTargetRule::SmoothedMean
                       ? smoothed_mean_target(frame, smoothed)
                       : static_cast<double>(frame.sample_size()) / static_cast<double>(n);
  const Eigen::RowVectorXd xbar = frame.x().colwise().mean();

  const EstimatorKind kind = benchmarking ? EstimatorKind::El2 : EstimatorKind::El1;
  const ElEstimate est = theta_el(frame, ps, smoothed, kind, rule);

  detail::ElPipelineStack stack(frame, ps, benchmarking,
                                rule == WTargetRule::SamplingFraction, smoothed.sigma2);
  VectorXd tau(stack.dim);
  tau.segment(0, stack.q) = ps.phi;
  tau.segment(stack.o_alpha, stack.p) = smoothed.alpha;
  tau[stack.o_w] = w;
  if (benchmarking)
    for (Index j = 0; j < k; ++j) tau[stack.o_xbar + j] = xbar[j];
  tau.segment(stack.o_lam, stack.m) = est.solution.lambda;
  tau[stack.o_theta] = est.theta;

  MatrixXd jac(stack.dim, stack.dim);
  for (Index c = 0; c < stack.dim; ++c) {
    const double h = 1e-6 * std::max(1.0, std::fabs(tau[c]));
    VectorXd tp = tau, tm = tau;
    tp[c] += h;
    tm[c] -= h;
    jac.col(c) = (stack.g_mean(tp) - stack.g_mean(tm)) / (2.0 * h);
  }
  VectorXd e = VectorXd::Zero(stack.dim);
  e[stack.o_theta] = 1.0;
  Eigen::PartialPivLU<MatrixXd> lu(jac.transpose());
  const VectorXd z = lu.solve(e);
  if (!z.allFinite())
    throw SingularSystemError("var_el: singular pipeline Jacobian");

  VarReport out;
  out.influence.estimator = benchmarking ? "el2" : "el1";
  out.influence.eta.resize(n);
  {
    VectorXd g(stack.dim), b(stack.qp), v(stack.m);
    for (Index i = 0; i < n; ++i) {
      stack.g_unit(tau, i, g, b, v);
      out.influence.eta[i] = est.theta - z.dot(g);
    }
  }
  out.variance = var_from_influence(out.influence.eta);

  // Regression and kappa diagnostics (the classical per-term decomposition).
  {
    const Index pr = benchmarking ? 2 + k : 2;
    MatrixXd a = MatrixXd::Zero(pr, pr);
    VectorXd c = VectorXd::Zero(pr);
    VectorXd v(pr);
    for (Index i : frame.respondents()) {
      const double pi = ps_prob(frame.x().row(i), frame.y(i), ps);
      v[0] = 1.0;
      v[1] = pi - w;
      if (benchmarking)
        for (Index j = 0; j < k; ++j) v[j + 2] = frame.x()(i, j) - xbar[j];
      const double wgt = 1.0 / (pi * pi);
      a.noalias() += wgt * v * v.transpose();
      c += wgt * frame.y(i) * v;
    }
    Eigen::LDLT<MatrixXd> ldlt(a);
    if (ldlt.info() == Eigen::Success) {
      const VectorXd beta = ldlt.solve(c);
      out.influence.beta1 = beta[1];
      out.influence.beta2 = benchmarking ? VectorXd(beta.tail(k)) : VectorXd(VectorXd::Zero(k));
      const double level = beta[0] - beta[1] * w - xbar.dot(out.influence.beta2);
      out.influence.kappa1 = kappa1_hat(frame, ps, smoothed);
      out.influence.kappa2 = kappa2_hat(frame, ps, out.influence.beta2, level);
    }
  }
  return out;
}

/// Linearization variance of the known-pi empirical-likelihood estimator:
/// eta_i = yhat_i + delta_i/pi_i (y_i - yhat_i) with yhat_i = pi_i beta1 + x_i'beta2.
/// No kappa corrections: there is no estimated phi.
inline VarReport var_el_known_pi(const PopulationFrame& frame,
                                 KnownPiWRule rule = KnownPiWRule::ExactMean) {
  if (!frame.has_true_pi())
    throw DataError("var_el_known_pi: true selection probabilities unavailable");
  const VectorXd& pi = frame.oracle().true_pi;
  const double w = rule == KnownPiWRule::ExactMean
                       ? pi.mean()
                       : static_cast<double>(frame.sample_size()) /
                             static_cast<double>(frame.n_units());
  const LinearizationFit fit = beta_known_pi(frame, pi, w);
  const Eigen::RowVectorXd xbar = frame.x().colwise().mean();

  VarReport out;
  out.influence.estimator = "el-known-pi";
  out.influence.beta1 = fit.beta1;
  out.influence.beta2 = fit.beta2;
  out.influence.eta.resize(frame.n_units());
  for (Index i = 0; i < frame.n_units(); ++i) {
    const double yhat =
        fit.intercept + (pi[i] - w) * fit.beta1 + (frame.x().row(i) - xbar).dot(fit.beta2);
    double eta = yhat;
    if (frame.delta()[i] == 1) eta += (frame.y(i) - yhat) / pi[i];
    out.influence.eta[i] = eta;
  }
  out.variance = var_from_influence(out.influence.eta);
  return out;
}

/// Wald interval theta_hat +/- z_{(1+level)/2} sqrt(v).
inline std::pair<double, double> confidence_interval(double theta, double v, double level) {
  if (!(v >= 0.0)) throw DataError("confidence_interval: negative variance");
  if (!(level >= 0.0 && level < 1.0))
    throw DataError("confidence_interval: level must lie in [0,1)");
  const double z = level == 0.0 ? 0.0 : normal_quantile(0.5 * (1.0 + level));
  const double half = z * std::sqrt(v);
  return {theta - half, theta + half};
}

/// Diagnostic export: one row per unit, one eta column per influence vector.
inline void write_influence_csv(const std::string& path,
                                const std::vector<InfluenceVector>& influences) {
  if (influences.empty()) throw DataError("write_influence_csv: nothing to write");
  const Index n = influences.front().eta.size();
  for (const auto& v : influences)
    if (v.eta.size() != n) throw DataError("write_influence_csv: length mismatch");
  std::ofstream out(path);
  if (!out) throw DataError("cannot open file for writing: " + path);
  out << "unit";
  for (const auto& v : influences) out << ",eta_" << v.estimator;
  out << '\n';
  char buf[40];
  for (Index i = 0; i < n; ++i) {
    out << i;
    for (const auto& v : influences) {
      std::snprintf(buf, sizeof(buf), "%.17g", v.eta[i]);
      out << ',' << buf;
    }
    out << '\n';
  }
}

}  // namespace elvs

#endif  // ELVS_VARIANCE_HPP
