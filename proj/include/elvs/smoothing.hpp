#ifndef ELVS_SMOOTHING_HPP
#define ELVS_SMOOTHING_HPP

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "elvs/errors.hpp"
#include "elvs/population.hpp"
#include "elvs/ps_fit.hpp"

namespace elvs {

/// Smoothed selection model: the fitted phi together with the respondent
/// outcome working model y | x, delta=1 ~ N(x_tilde'alpha, sigma2), where
/// x_tilde = (1, x). Integrating the inverse probability against that
/// density has the closed form
///   omega_hat(x) = 1 + exp(-lp_x(x) - phi_y * x_tilde'alpha + phi_y^2 sigma2 / 2),
/// so the smoothed probability pi_hat(x) = 1/omega_hat(x) is again logistic
/// in a shifted linear predictor.
struct SmoothedPsModel {
  PsParams ps;
  VectorXd alpha;
  double sigma2 = 1.0;
  bool degenerate = false;          // outcome coefficient ~ 0; alpha is the OLS fit
  double calibration_residual = 0.0;  // inf-norm of the calibration system at alpha
};

inline constexpr double kDegeneratePhiY = 1e-8;

namespace detail {

/// x-only part of the selection linear predictor.
inline double ps_lp_x(const Eigen::Ref<const Eigen::RowVectorXd>& x_row, const PsParams& params) {
  double lp = params.phi[0];
  for (size_t j = 0; j < params.ps_covariates.size(); ++j)
    lp += params.phi[static_cast<Index>(j) + 1] * x_row[params.ps_covariates[j]];
  return lp;
}

inline double ps_phi_y(const PsParams& params) {
  return params.includes_y ? params.phi[params.phi.size() - 1] : 0.0;
}

inline double xtilde_dot(const Eigen::Ref<const Eigen::RowVectorXd>& x_row,
                         const VectorXd& alpha) {
  double m = alpha[0];
  for (Index j = 0; j < x_row.size(); ++j) m += alpha[j + 1] * x_row[j];
  return m;
}

/// Shifted linear predictor of the smoothed probability.
inline double smoothed_lp(const Eigen::Ref<const Eigen::RowVectorXd>& x_row,
                          const SmoothedPsModel& model) {
  const double phi_y = ps_phi_y(model.ps);
  if (phi_y == 0.0) return ps_lp_x(x_row, model.ps);
  return ps_lp_x(x_row, model.ps) + phi_y * xtilde_dot(x_row, model.alpha) -
         0.5 * phi_y * phi_y * model.sigma2;
}

/// Ordinary least squares of y on (1, x) among respondents.
inline VectorXd respondent_ols(const PopulationFrame& frame) {
  const Index p = frame.n_covariates() + 1;
  if (frame.sample_size() < p)
    throw SingularSystemError("respondent outcome regression: too few respondents");
  MatrixXd xtx = MatrixXd::Zero(p, p);
  VectorXd xty = VectorXd::Zero(p);
  VectorXd z(p);
  for (Index i : frame.respondents()) {
    z[0] = 1.0;
    for (Index j = 0; j < frame.n_covariates(); ++j) z[j + 1] = frame.x()(i, j);
    xtx.noalias() += z * z.transpose();
    xty += frame.y(i) * z;
  }
  Eigen::LDLT<MatrixXd> ldlt(xtx);
  if (ldlt.info() != Eigen::Success)
    throw SingularSystemError("respondent outcome regression: singular design");
  return ldlt.solve(xty);
}

}  // namespace detail

/// Solves the calibration system for alpha:
///   sum_{delta=1} exp(-lp_x_i - phi_y x_tilde_i'alpha + phi_y^2 sigma2/2) b_i
///     = sum_{delta=0} b_i,
/// which is exactly the requirement that the smoothed weights reproduce the
/// instrument totals the fitted weights already reproduce. Newton with the
/// analytic Jacobian and step halving, started at the respondent OLS fit.
/// When the outcome coefficient is numerically zero the system does not
/// depend on alpha; the OLS fit is returned with the degenerate flag set.
inline SmoothedPsModel fit_alpha(const PopulationFrame& frame, const PsParams& phi_hat,
                                 double sigma2, double tol = 1e-9, int max_iterations = 200) {
  if (!(sigma2 > 0.0)) throw DataError("fit_alpha: sigma2 must be positive");
  const Index n = frame.n_units();
  const Index p = frame.n_covariates() + 1;
  const Index qp = phi_hat.instrument.dim(frame.n_covariates());

  SmoothedPsModel model;
  model.ps = phi_hat;
  model.sigma2 = sigma2;
  model.alpha = detail::respondent_ols(frame);

  const double phi_y = detail::ps_phi_y(phi_hat);

  // Residual of the calibration system at the current alpha.
  VectorXd b(qp), xt(p);
  auto residual = [&](const VectorXd& alpha) {
    VectorXd r = VectorXd::Zero(qp);
    for (Index i = 0; i < n; ++i) {
      detail::fill_instrument_row(frame.x().row(i), phi_hat.instrument, b);
      if (frame.delta()[i] == 1) {
        const double m = detail::xtilde_dot(frame.x().row(i), alpha);
        const double e = detail::exp_clamped(-detail::ps_lp_x(frame.x().row(i), phi_hat) -
                                             phi_y * m + 0.5 * phi_y * phi_y * sigma2);
        r += e * b;
      } else {
        r -= b;
      }
    }
    return r;
  };

  if (!phi_hat.includes_y || std::fabs(phi_y) <= kDegeneratePhiY) {
    model.degenerate = true;
    model.calibration_residual = residual(model.alpha).lpNorm<Eigen::Infinity>();
    return model;
  }
  if (qp != p)
    throw SingularSystemError(
        "fit_alpha: calibration system needs dim(b) == dim(alpha); use the default instrument "
        "(intercept + all x columns)");

  VectorXd r = residual(model.alpha);
  double rnorm = r.lpNorm<Eigen::Infinity>();
  const double tol_abs = tol * static_cast<double>(n);

  for (int it = 0; it < max_iterations; ++it) {
    if (rnorm <= tol_abs) {
      model.calibration_residual = rnorm;
      return model;
    }
    MatrixXd jac = MatrixXd::Zero(qp, p);
    for (Index i : frame.respondents()) {
      const double m = detail::xtilde_dot(frame.x().row(i), model.alpha);
      const double e = detail::exp_clamped(-detail::ps_lp_x(frame.x().row(i), phi_hat) -
                                           phi_y * m + 0.5 * phi_y * phi_y * sigma2);
      detail::fill_instrument_row(frame.x().row(i), phi_hat.instrument, b);
      xt[0] = 1.0;
      for (Index j = 0; j < frame.n_covariates(); ++j) xt[j + 1] = frame.x()(i, j);
      jac.noalias() -= phi_y * e * b * xt.transpose();
    }
    Eigen::PartialPivLU<MatrixXd> lu(jac);
    const VectorXd step = lu.solve(-r);
    if (!step.allFinite())
      throw SingularSystemError("fit_alpha: singular calibration Jacobian");

    double t = 1.0;
    bool decreased = false;
    for (int h = 0; h < 40; ++h) {
      const VectorXd r_new = residual(model.alpha + t * step);
      const double rn = r_new.lpNorm<Eigen::Infinity>();
      if (rn < rnorm) {
        model.alpha += t * step;
        r = r_new;
        rnorm = rn;
        decreased = true;
        break;
      }
      t *= 0.5;
    }
    if (!decreased)
      throw NonConvergenceError("fit_alpha: line search stalled at residual " +
                                std::to_string(rnorm));
  }
  if (rnorm <= tol_abs) {
    model.calibration_residual = rnorm;
    return model;
  }
  throw NonConvergenceError("fit_alpha: no convergence after " + std::to_string(max_iterations) +
                            " iterations");
}

enum class Sigma2Rule { FixedOne, RespondentResidual };

/// Convenience wrapper: choose sigma2 (fixed at 1, or the respondent OLS
/// residual variance) and solve for alpha.
inline SmoothedPsModel fit_smoothed_model(const PopulationFrame& frame, const PsParams& phi_hat,
                                          Sigma2Rule rule = Sigma2Rule::FixedOne) {
  double sigma2 = 1.0;
  if (rule == Sigma2Rule::RespondentResidual) {
    const VectorXd alpha = detail::respondent_ols(frame);
    const Index p = frame.n_covariates() + 1;
    double ss = 0.0;
    for (Index i : frame.respondents()) {
      const double resid = frame.y(i) - detail::xtilde_dot(frame.x().row(i), alpha);
      ss += resid * resid;
    }
    const Index dof = frame.sample_size() - p;
    if (dof < 1) throw SingularSystemError("fit_smoothed_model: no residual degrees of freedom");
    sigma2 = ss / static_cast<double>(dof);
  }
  return fit_alpha(frame, phi_hat, sigma2);
}

/// Smoothed selection probability pi_hat(x; phi), in (0,1) for finite input.
inline double smoothed_pi(const Eigen::Ref<const Eigen::RowVectorXd>& x_row,
                          const SmoothedPsModel& model) {
  return expit(detail::smoothed_lp(x_row, model));
}

/// Smoothed propensity weight omega_hat(x) = 1/pi_hat(x) >= 1.
inline double smoothed_weight(const Eigen::Ref<const Eigen::RowVectorXd>& x_row,
                              const SmoothedPsModel& model) {
  return 1.0 + detail::exp_clamped(-detail::smoothed_lp(x_row, model));
}

/// Gradient of pi_hat(x; phi) in phi, holding (alpha, sigma2) fixed.
/// Closed forms: d/dphi0 = pi(1-pi), d/dphi_j = x_j pi(1-pi) for the model
/// covariates, and d/dphi_y = (x_tilde'alpha - phi_y sigma2) pi(1-pi).
inline VectorXd g_hat(const Eigen::Ref<const Eigen::RowVectorXd>& x_row,
                      const SmoothedPsModel& model) {
  const PsParams& ps = model.ps;
  const double pi = smoothed_pi(x_row, model);
  const double v = pi * (1.0 - pi);
  VectorXd g(ps.dim());
  g[0] = v;
  for (size_t j = 0; j < ps.ps_covariates.size(); ++j)
    g[static_cast<Index>(j) + 1] = x_row[ps.ps_covariates[j]] * v;
  if (ps.includes_y)
    g[g.size() - 1] =
        (detail::xtilde_dot(x_row, model.alpha) - detail::ps_phi_y(ps) * model.sigma2) * v;
  return g;
}

struct ObsLoglik {
  double value = 0.0;
  Index clamped_terms = 0;  // log terms floored at log(smallest positive normal)
};

/// Observed log-likelihood
///   sum_i { delta_i log pi(x_i, y_i; phi) + (1-delta_i) log(1 - pi_hat(x_i; phi)) }.
/// Diagnostic value only; fitting goes through the estimating equation.
inline ObsLoglik obs_loglik(const PopulationFrame& frame, const SmoothedPsModel& model) {
  const double floor = std::log(std::numeric_limits<double>::min());
  auto log_expit = [](double t) {
    return t >= 0.0 ? -std::log1p(std::exp(-t)) : t - std::log1p(std::exp(t));
  };
  ObsLoglik out;
  for (Index i = 0; i < frame.n_units(); ++i) {
    double term;
    if (frame.delta()[i] == 1) {
      term = log_expit(ps_linear_predictor(frame.x().row(i), frame.y(i), model.ps));
    } else {
      term = log_expit(-detail::smoothed_lp(frame.x().row(i), model));
    }
    if (term < floor) {
      term = floor;
      ++out.clamped_terms;
    }
    out.value += term;
  }
  return out;
}

}  // namespace elvs

#endif  // ELVS_SMOOTHING_HPP
