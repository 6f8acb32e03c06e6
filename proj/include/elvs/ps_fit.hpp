#ifndef ELVS_PS_FIT_HPP
#define ELVS_PS_FIT_HPP

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "elvs/errors.hpp"
#include "elvs/population.hpp"

namespace elvs {

/// Instrument map b(x): optional intercept plus a subset of the x columns
/// (all of them by default). The default (intercept + all x) makes the
/// estimating-equation system exactly identified for the default selection
/// model and forces the inverse-probability weights to reproduce the
/// population size and the x totals.
struct InstrumentSpec {
  bool intercept = true;
  bool all_x = true;
  std::vector<Index> x_indices;  // used when all_x is false

  static InstrumentSpec intercept_only() { return {true, false, {}}; }
  static InstrumentSpec columns(std::vector<Index> idx, bool with_intercept = true) {
    return {with_intercept, false, std::move(idx)};
  }

  Index dim(Index n_covariates) const {
    const Index k = all_x ? n_covariates : static_cast<Index>(x_indices.size());
    return (intercept ? 1 : 0) + k;
  }
};

/// Parametric selection model: logit pi = phi0 + sum_j phi_{1+j} x_{c_j}
/// (+ phi_y * y when the model is outcome-dependent).
struct PsParams {
  VectorXd phi;
  std::vector<Index> ps_covariates{0};
  bool includes_y = true;
  InstrumentSpec instrument{};

  Index dim() const {
    return 1 + static_cast<Index>(ps_covariates.size()) + (includes_y ? 1 : 0);
  }
};

struct FitDiagnostics {
  int iterations = 0;
  double final_residual_norm = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  std::vector<double> objective_trace;
};

struct FitOptions {
  double tol_residual = 1e-9;   // on ||U_b||_inf
  double tol_step = 1e-12;      // on ||delta||_inf
  int max_iterations = 200;
  int max_halvings = 30;
  bool plain_newton = false;    // asymmetric Newton update; can be unstable
};

namespace detail {
inline double exp_clamped(double t) { return std::exp(t > 700.0 ? 700.0 : t); }

inline void fill_instrument_row(const Eigen::Ref<const Eigen::RowVectorXd>& x_row,
                                const InstrumentSpec& spec, VectorXd& b) {
  Index pos = 0;
  if (spec.intercept) b[pos++] = 1.0;
  if (spec.all_x) {
    for (Index j = 0; j < x_row.size(); ++j) b[pos++] = x_row[j];
  } else {
    for (Index j : spec.x_indices) b[pos++] = x_row[j];
  }
}

inline void fill_h_row(const Eigen::Ref<const Eigen::RowVectorXd>& x_row, double y,
                       const PsParams& params, VectorXd& h) {
  h[0] = 1.0;
  for (size_t j = 0; j < params.ps_covariates.size(); ++j)
    h[static_cast<Index>(j) + 1] = x_row[params.ps_covariates[j]];
  if (params.includes_y) h[h.size() - 1] = y;
}
}  // namespace detail

inline double ps_linear_predictor(const Eigen::Ref<const Eigen::RowVectorXd>& x_row, double y,
                                  const PsParams& params) {
  double lp = params.phi[0];
  for (size_t j = 0; j < params.ps_covariates.size(); ++j)
    lp += params.phi[static_cast<Index>(j) + 1] * x_row[params.ps_covariates[j]];
  if (params.includes_y) lp += params.phi[params.phi.size() - 1] * y;
  return lp;
}

/// Selection probability pi(x, y; phi), numerically stable for any
/// magnitude of the linear predictor.
inline double ps_prob(const Eigen::Ref<const Eigen::RowVectorXd>& x_row, double y,
                      const PsParams& params) {
  return expit(ps_linear_predictor(x_row, y, params));
}

/// Gradient of logit pi with respect to phi: (1, selected x, [y]).
inline VectorXd h_grad(const Eigen::Ref<const Eigen::RowVectorXd>& x_row, double y,
                       const PsParams& params) {
  VectorXd h(params.dim());
  detail::fill_h_row(x_row, y, params, h);
  return h;
}

inline VectorXd instrument_row(const Eigen::Ref<const Eigen::RowVectorXd>& x_row,
                               const InstrumentSpec& spec) {
  VectorXd b(spec.dim(x_row.size()));
  detail::fill_instrument_row(x_row, spec, b);
  return b;
}

/// N x q' matrix of instrument values b(x_i).
inline MatrixXd instrument_matrix(const PopulationFrame& frame, const InstrumentSpec& spec) {
  const Index n = frame.n_units();
  MatrixXd b(n, spec.dim(frame.n_covariates()));
  for (Index i = 0; i < n; ++i) b.row(i) = instrument_row(frame.x().row(i), spec).transpose();
  return b;
}

/// Calibration estimating function
///   U_b(phi) = N^{-1} sum_i { delta_i / pi(x_i, y_i; phi) - 1 } b(x_i).
/// The inverse probability is computed as 1 + exp(-lp), so it never divides
/// by a denormal pi; outcomes are read only for selected units.
inline VectorXd estimating_eq(const PopulationFrame& frame, const PsParams& params) {
  const Index n = frame.n_units();
  const Index qp = params.instrument.dim(frame.n_covariates());
  VectorXd u = VectorXd::Zero(qp);
  VectorXd b(qp);
  for (Index i = 0; i < n; ++i) {
    detail::fill_instrument_row(frame.x().row(i), params.instrument, b);
    if (frame.delta()[i] == 1) {
      const double lp = ps_linear_predictor(frame.x().row(i), frame.y(i), params);
      u += detail::exp_clamped(-lp) * b;  // omega - 1
    } else {
      u -= b;
    }
  }
  return u / static_cast<double>(n);
}

/// Jacobian dU_b/dphi' = -N^{-1} sum_{delta=1} O_i b_i h_i',
/// O_i = (1 - pi_i)/pi_i = exp(-lp_i).
inline MatrixXd estimating_eq_jacobian(const PopulationFrame& frame, const PsParams& params) {
  const Index n = frame.n_units();
  MatrixXd jac = MatrixXd::Zero(params.instrument.dim(frame.n_covariates()), params.dim());
  VectorXd b(jac.rows()), h(jac.cols());
  for (Index i : frame.respondents()) {
    const double lp = ps_linear_predictor(frame.x().row(i), frame.y(i), params);
    const double o = detail::exp_clamped(-lp);
    detail::fill_instrument_row(frame.x().row(i), params.instrument, b);
    detail::fill_h_row(frame.x().row(i), frame.y(i), params, h);
    jac.noalias() -= o * b * h.transpose();
  }
  return jac / static_cast<double>(n);
}

struct PsFit {
  PsParams params;
  FitDiagnostics diagnostics;
};

/// Fits phi by minimizing Q(phi) = U_b'U_b with Gauss-Newton steps and a
/// halving line search, so the objective never increases along the trace.
/// An exactly identified system converges on the residual norm; an
/// overidentified one (dim b > dim phi) cannot drive U_b to zero and
/// converges on the step norm instead. Hitting the iteration cap or a failed
/// line search returns diagnostics with converged=false; a rank-deficient
/// Gauss-Newton system throws SingularSystemError.
inline PsFit fit_ps(const PopulationFrame& frame, PsParams init, const FitOptions& options = {}) {
  if (!frame.fit_feasible())
    throw DataError("fit_ps: need at least one selected and one non-selected unit");
  const Index q = init.dim();
  if (init.phi.size() != q) throw DataError("fit_ps: init vector has wrong dimension");
  const Index qp = init.instrument.dim(frame.n_covariates());
  if (qp < q)
    throw DataError("fit_ps: instrument dimension below parameter dimension (underdetermined)");
  const bool overidentified = qp > q;
  if (options.plain_newton && overidentified)
    throw DataError("fit_ps: plain Newton requires an exactly identified system");

  PsParams params = std::move(init);
  FitDiagnostics diag;

  VectorXd u = estimating_eq(frame, params);
  double qval = u.squaredNorm();
  diag.objective_trace.push_back(qval);
  diag.final_residual_norm = u.lpNorm<Eigen::Infinity>();
  if (!overidentified && diag.final_residual_norm <= options.tol_residual) {
    diag.converged = true;
    return {params, diag};
  }

  for (int it = 1; it <= options.max_iterations; ++it) {
    diag.iterations = it;
    const MatrixXd jac = estimating_eq_jacobian(frame, params);

    Eigen::ColPivHouseholderQR<MatrixXd> qr(jac);
    if (qr.rank() < q)
      throw SingularSystemError(
          "fit_ps: Gauss-Newton normal equations are rank-deficient; "
          "choose a different instrument b(x)");
    VectorXd step = qr.solve(-u);

    if (options.plain_newton) step = jac.partialPivLu().solve(-u);

    if (step.lpNorm<Eigen::Infinity>() <= options.tol_step) {
      diag.converged = true;
      return {params, diag};
    }

    double t = 1.0;
    VectorXd phi_new;
    double q_new = qval;
    bool decreased = false;
    if (options.plain_newton) {
      phi_new = params.phi + step;
      PsParams trial = params;
      trial.phi = phi_new;
      q_new = estimating_eq(frame, trial).squaredNorm();
      decreased = true;  // the asymmetric update is applied as written
    } else {
      for (int h = 0; h <= options.max_halvings; ++h) {
        phi_new = params.phi + t * step;
        PsParams trial = params;
        trial.phi = phi_new;
        q_new = estimating_eq(frame, trial).squaredNorm();
        if (q_new < qval) {
          decreased = true;
          break;
        }
        t *= 0.5;
      }
      if (!decreased) {
        // An overidentified objective bottoms out when its decrease falls
        // below double rounding; treat a stalled micro-step as converged.
        diag.converged = overidentified && step.lpNorm<Eigen::Infinity>() <= 1e-6;
        return {params, diag};
      }
    }

    params.phi = phi_new;
    u = estimating_eq(frame, params);
    qval = u.squaredNorm();
    diag.objective_trace.push_back(qval);
    diag.final_residual_norm = u.lpNorm<Eigen::Infinity>();

    const double step_norm = (t * step).lpNorm<Eigen::Infinity>();
    if (!overidentified && diag.final_residual_norm <= options.tol_residual) {
      diag.converged = true;
      return {params, diag};
    }
    if (step_norm <= options.tol_step) {
      diag.converged = true;
      return {params, diag};
    }
  }
  diag.converged = false;
  return {params, diag};
}

/// Logistic-regression MLE of delta on (1, selected x columns) over all N
/// units, by Newton-Raphson on the Bernoulli log-likelihood. The selection
/// indicator and x are observed population-wide, so this is an ordinary
/// complete-data fit. Used for the misspecified missing-at-random pipeline
/// and as the starting point for fit_ps.
inline PsParams fit_mar_logistic(const PopulationFrame& frame, std::vector<Index> covariates,
                                 double tol = 1e-9, int max_iterations = 100) {
  const Index n = frame.n_units();
  const Index nresp = frame.sample_size();
  if (nresp == 0 || nresp == n)
    throw DataError("fit_mar_logistic: delta is constant; no maximum likelihood estimate");

  PsParams params;
  params.ps_covariates = std::move(covariates);
  params.includes_y = false;
  params.phi = VectorXd::Zero(params.dim());
  const Index q = params.dim();

  VectorXd z(q);
  auto fill_design_row = [&](Index i) {
    z[0] = 1.0;
    for (size_t j = 0; j < params.ps_covariates.size(); ++j)
      z[static_cast<Index>(j) + 1] = frame.x()(i, params.ps_covariates[j]);
  };

  for (int it = 0; it < max_iterations; ++it) {
    VectorXd score = VectorXd::Zero(q);
    MatrixXd info = MatrixXd::Zero(q, q);
    for (Index i = 0; i < n; ++i) {
      fill_design_row(i);
      const double pi = expit(params.phi.dot(z));
      score += (static_cast<double>(frame.delta()[i]) - pi) * z;
      info.noalias() += pi * (1.0 - pi) * z * z.transpose();
    }
    if (score.lpNorm<Eigen::Infinity>() <= tol) return params;

    Eigen::LDLT<MatrixXd> ldlt(info);
    if (ldlt.info() != Eigen::Success)
      throw SingularSystemError("fit_mar_logistic: singular information matrix");
    params.phi += ldlt.solve(score);
    if (params.phi.lpNorm<Eigen::Infinity>() > 50.0)
      throw NonConvergenceError("fit_mar_logistic: diverging coefficients (separation?)");
  }
  throw NonConvergenceError("fit_mar_logistic: Newton-Raphson did not converge");
}

/// Default starting point for fit_ps: the MAR logistic fit on the PS-model
/// covariates, with the outcome coefficient started at zero.
inline PsParams default_ps_init(const PopulationFrame& frame, const PsParams& model) {
  PsParams mar = fit_mar_logistic(frame, model.ps_covariates);
  PsParams init = model;
  init.phi = VectorXd::Zero(model.dim());
  init.phi.head(mar.phi.size()) = mar.phi;
  return init;
}

}  // namespace elvs

#endif  // ELVS_PS_FIT_HPP
