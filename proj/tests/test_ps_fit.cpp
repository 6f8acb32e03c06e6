#include <catch2/catch_amalgamated.hpp>

#include "elvs/population.hpp"
#include "elvs/ps_fit.hpp"
#include "frames.hpp"
#include "oracles.hpp"

using namespace elvs;
using Catch::Matchers::WithinAbs;

namespace {

PsParams default_model(const VectorXd& phi) {
  PsParams p;
  p.phi = phi;
  return p;
}

VectorXd phi3(double a, double b, double c) {
  VectorXd v(3);
  v << a, b, c;
  return v;
}

}  // namespace

TEST_CASE("ps_prob closed-form values") {
  Eigen::RowVectorXd row(2);
  row << 2.0, 5.0;
  CHECK(ps_prob(row, 1.7, default_model(phi3(0, 0, 0))) == 0.5);
  CHECK_THAT(ps_prob(row, 0.0, default_model(phi3(-2, 1, 0.5))), WithinAbs(0.5, 1e-15));
  Eigen::RowVectorXd zero(2);
  zero << 0.0, 3.0;
  CHECK_THAT(ps_prob(zero, 0.0, default_model(phi3(-2, 1, 0.5))),
             WithinAbs(1.0 / (1.0 + std::exp(2.0)), 1e-12));
  // stable in the far tails: no overflow, no NaN
  CHECK(ps_prob(row, 2000.0, default_model(phi3(0, 0, 1))) == 1.0);
  CHECK(ps_prob(row, -700.0, default_model(phi3(0, 0, 1))) > 0.0);
  CHECK(ps_prob(row, -2000.0, default_model(phi3(0, 0, 1))) >= 0.0);
  CHECK(std::isfinite(ps_prob(row, -2000.0, default_model(phi3(0, 0, 1)))));
}

TEST_CASE("h_grad is the logit gradient") {
  Eigen::RowVectorXd row(2);
  row << 2.0, 9.0;
  const VectorXd h = h_grad(row, 3.0, default_model(phi3(-2, 1, 0.5)));
  REQUIRE(h.size() == 3);
  CHECK(h[0] == 1.0);
  CHECK(h[1] == 2.0);
  CHECK(h[2] == 3.0);

  Eigen::RowVectorXd zero(2);
  zero << 0.0, 4.0;
  CHECK((h_grad(zero, 0.0, default_model(phi3(1, 2, 3))) - phi3(1, 0, 0)).norm() == 0.0);

  // finite differences of logit(ps_prob) in phi
  Rng rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    Eigen::RowVectorXd x(2);
    x << 3.0 * rng.normal(), 3.0 * rng.normal();
    const double y = 2.0 * rng.normal();
    const VectorXd phi = phi3(rng.normal(), rng.normal(), rng.normal());
    const PsParams params = default_model(phi);
    const VectorXd analytic = h_grad(x, y, params);
    for (Index c = 0; c < 3; ++c) {
      const double fd = oracles::central_diff(
          [&](VectorXd p) {
            PsParams trial = params;
            trial.phi = p;
            const double prob = ps_prob(x, y, trial);
            return std::log(prob / (1.0 - prob));
          },
          phi, c, 1e-6 * std::max(1.0, std::fabs(phi[c])));
      CHECK_THAT(analytic[c], WithinAbs(fd, 1e-6 * std::max(1.0, std::fabs(fd))));
    }
  }
}

TEST_CASE("estimating equation on tiny frames") {
  SECTION("two units cancel at pi = 1/2 with a constant instrument") {
    auto frame = frames::make({{1.0, 0.0}, {5.0, 2.0}}, {1, 0}, {0.3, 0.9});
    PsParams params = default_model(phi3(0, 0, 0));
    params.instrument = InstrumentSpec::intercept_only();
    const VectorXd u = estimating_eq(frame, params);
    REQUIRE(u.size() == 1);
    CHECK_THAT(u[0], WithinAbs(0.0, 1e-15));
  }

  SECTION("all selected makes the intercept coordinate strictly positive") {
    auto frame = frames::make({{1.0, 0.0}, {2.0, 1.0}}, {1, 1}, {0.3, 0.9});
    const VectorXd u = estimating_eq(frame, default_model(phi3(0.5, 0.1, -0.2)));
    CHECK(u[0] > 0.0);
  }

  SECTION("matches naive per-unit summation") {
    auto frame = frames::random(6, 99);
    const PsParams params = default_model(phi3(-0.4, 0.3, 0.2));
    const VectorXd u = estimating_eq(frame, params);
    VectorXd naive = VectorXd::Zero(3);
    for (Index i = 0; i < 6; ++i) {
      VectorXd b(3);
      b << 1.0, frame.x()(i, 0), frame.x()(i, 1);
      if (frame.delta()[i] == 1) {
        const double pi = ps_prob(frame.x().row(i), frame.y(i), params);
        naive += (1.0 / pi - 1.0) * b;
      } else {
        naive -= b;
      }
    }
    naive /= 6.0;
    CHECK((u - naive).lpNorm<Eigen::Infinity>() < 1e-14);
  }
}

TEST_CASE("estimating-equation Jacobian") {
  SECTION("no respondents gives the zero matrix") {
    auto frame = frames::make({{1.0, 0.0}, {2.0, 1.0}}, {0, 0}, {0.3, 0.9});
    CHECK(estimating_eq_jacobian(frame, default_model(phi3(0.1, 0.2, 0.3))).isZero(0.0));
  }

  SECTION("single respondent, scalar system, pi = 1/2") {
    auto frame = frames::make({{1.0, 2.0}}, {1}, {0.4});
    PsParams params;
    params.ps_covariates = {};
    params.includes_y = false;
    params.phi = VectorXd::Zero(1);
    params.instrument = InstrumentSpec::intercept_only();
    const MatrixXd jac = estimating_eq_jacobian(frame, params);
    REQUIRE(jac.rows() == 1);
    REQUIRE(jac.cols() == 1);
    CHECK_THAT(jac(0, 0), WithinAbs(-1.0, 1e-14));  // -O/N with O = 1 at pi = 1/2
  }

  SECTION("matches finite differences of the estimating equation") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
      auto frame = frames::random(8, seed);
      const VectorXd phi = phi3(-0.3, 0.25, 0.15);
      const PsParams params = default_model(phi);
      const MatrixXd jac = estimating_eq_jacobian(frame, params);
      for (Index r = 0; r < 3; ++r)
        for (Index c = 0; c < 3; ++c) {
          const double fd = oracles::central_diff(
              [&](VectorXd p) {
                PsParams trial = params;
                trial.phi = p;
                return estimating_eq(frame, trial)[r];
              },
              phi, c, 1e-6 * std::max(1.0, std::fabs(phi[c])));
          CHECK_THAT(jac(r, c), WithinAbs(fd, 1e-5 * std::max(1.0, std::fabs(fd))));
        }
    }
  }
}

TEST_CASE("fit_ps") {
  SECTION("an exact root is returned unchanged with zero iterations") {
    // Solve once, then re-feed the solution.
    ScenarioConfig cfg;
    cfg.n_units = 2000;
    cfg.seed = 31;
    const PopulationFrame frame = generate_population(cfg);
    PsParams model;
    const PsFit first = fit_ps(frame, default_ps_init(frame, model));
    REQUIRE(first.diagnostics.converged);
    const PsFit again = fit_ps(frame, first.params);
    CHECK(again.diagnostics.iterations == 0);
    CHECK((again.params.phi - first.params.phi).norm() == 0.0);
  }

  SECTION("recovers the truth on a large replicate") {
    ScenarioConfig cfg;
    cfg.n_units = 100000;
    cfg.seed = 17;
    const PopulationFrame frame = generate_population(cfg);
    PsParams model;
    const PsFit fit = fit_ps(frame, default_ps_init(frame, model));
    REQUIRE(fit.diagnostics.converged);
    CHECK_THAT(fit.params.phi[0], WithinAbs(-2.0, 0.05));
    CHECK_THAT(fit.params.phi[1], WithinAbs(1.0, 0.05));
    CHECK_THAT(fit.params.phi[2], WithinAbs(0.5, 0.05));

    // eq9-type identity: with an intercept in b, sum delta/pi = N.
    double s = 0.0;
    for (Index i : frame.respondents())
      s += 1.0 / ps_prob(frame.x().row(i), frame.y(i), fit.params);
    CHECK_THAT(s / frame.n_units(), WithinAbs(1.0, 1e-6));
  }

  SECTION("objective trace never increases") {
    ScenarioConfig cfg;
    cfg.n_units = 3000;
    cfg.seed = 99;
    const PopulationFrame frame = generate_population(cfg);
    PsParams init;
    init.phi = phi3(0.5, -0.5, 0.0);  // deliberately poor start
    const PsFit fit = fit_ps(frame, init);
    REQUIRE(fit.diagnostics.converged);
    for (size_t i = 1; i < fit.diagnostics.objective_trace.size(); ++i)
      CHECK(fit.diagnostics.objective_trace[i] <= fit.diagnostics.objective_trace[i - 1]);
  }

  SECTION("result does not depend on unit order") {
    ScenarioConfig cfg;
    cfg.n_units = 2000;
    cfg.seed = 55;
    const PopulationFrame frame = generate_population(cfg);
    PsParams model;
    const PsFit fit = fit_ps(frame, default_ps_init(frame, model));

    // reversed copy
    const Index n = frame.n_units();
    std::vector<std::vector<double>> x;
    std::vector<int> delta;
    std::vector<double> y;
    for (Index i = n - 1; i >= 0; --i) {
      x.push_back({frame.x()(i, 0), frame.x()(i, 1)});
      delta.push_back(frame.delta()[i]);
      y.push_back(frame.oracle().y_full[i]);
    }
    const PopulationFrame reversed = frames::make(x, delta, y);
    const PsFit fit2 = fit_ps(reversed, default_ps_init(reversed, model));
    CHECK((fit.params.phi - fit2.params.phi).lpNorm<Eigen::Infinity>() < 1e-6);
  }

  SECTION("overidentified instruments converge on the step criterion") {
    ScenarioConfig cfg;
    cfg.n_units = 4000;
    cfg.seed = 3;
    const PopulationFrame frame = generate_population(cfg);
    PsParams model;
    model.ps_covariates = {};  // logit pi = phi0 + phi_y y, b = (1, x1, x2)
    const PsFit fit = fit_ps(frame, default_ps_init(frame, model));
    CHECK(fit.diagnostics.converged);
    CHECK(fit.params.phi.size() == 2);
  }

  SECTION("degenerate frames are rejected") {
    auto frame = frames::make({{1, 2}, {3, 4}}, {1, 1}, {0.5, 0.7});
    PsParams init;
    init.phi = phi3(0, 0, 0);
    CHECK_THROWS_AS(fit_ps(frame, init), DataError);
  }
}

TEST_CASE("fit_mar_logistic") {
  SECTION("constant delta is degenerate") {
    auto frame = frames::make({{1, 2}, {3, 4}}, {1, 1}, {0.5, 0.7});
    CHECK_THROWS_AS(fit_mar_logistic(frame, {0, 1}), DataError);
  }

  SECTION("score vanishes at the fit and the truth is recovered when MAR holds") {
    ScenarioConfig cfg;
    cfg.n_units = 100000;
    cfg.seed = 21;
    cfg.phi_true = {-2.0, 1.0, 0.0};  // selection depends on x1 only
    const PopulationFrame frame = generate_population(cfg);
    const PsParams mar = fit_mar_logistic(frame, {0});
    CHECK_THAT(mar.phi[0], WithinAbs(-2.0, 0.05));
    CHECK_THAT(mar.phi[1], WithinAbs(1.0, 0.05));

    VectorXd score = VectorXd::Zero(2);
    for (Index i = 0; i < frame.n_units(); ++i) {
      VectorXd z(2);
      z << 1.0, frame.x()(i, 0);
      score += (frame.delta()[i] - ps_prob(frame.x().row(i), 0.0, mar)) * z;
    }
    CHECK(score.lpNorm<Eigen::Infinity>() <= 1e-9);
  }

  SECTION("separated data is reported") {
    // delta = 1 exactly when x1 > 0: perfectly separated.
    std::vector<std::vector<double>> x;
    std::vector<int> delta;
    std::vector<double> y;
    for (int i = 0; i < 40; ++i) {
      // tiny margin: the likelihood keeps improving as the slope grows
      const double x1 = (i % 2 == 0) ? 0.02 + 0.001 * i : -0.02 - 0.001 * i;
      x.push_back({x1, 0.5});
      delta.push_back(x1 > 0 ? 1 : 0);
      y.push_back(1.0);
    }
    auto frame = frames::make(x, delta, y);
    CHECK_THROWS_AS(fit_mar_logistic(frame, {0}), NonConvergenceError);
  }
}
