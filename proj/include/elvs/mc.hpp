#ifndef ELVS_MC_HPP
#define ELVS_MC_HPP

#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "elvs/el_core.hpp"
#include "elvs/errors.hpp"
#include "elvs/estimators.hpp"
#include "elvs/population.hpp"
#include "elvs/ps_fit.hpp"
#include "elvs/smoothing.hpp"
#include "elvs/variance.hpp"

namespace elvs {

/// Monte Carlo study configuration.
struct McConfig {
  Scenario scenario = Scenario::M1;
  Index n_units = 5000;
  int replications = 1000;
  std::uint64_t seed = 1;
  std::vector<EstimatorKind> estimators{EstimatorKind::Full, EstimatorKind::ElMar,
                                        EstimatorKind::Ps, EstimatorKind::El1,
                                        EstimatorKind::El2};
  double ci_level = 0.95;
  int workers = 1;
  WTargetRule w_rule = WTargetRule::SmoothedMean;
  Sigma2Rule sigma2_rule = Sigma2Rule::FixedOne;

  void validate() const {
    if (replications < 1) throw DataError("McConfig: replications must be >= 1");
    if (estimators.empty()) throw DataError("McConfig: estimator list is empty");
    if (!(ci_level >= 0.0 && ci_level < 1.0))
      throw DataError("McConfig: ci_level must lie in [0,1)");
    if (workers < 1) throw DataError("McConfig: workers must be >= 1");
    ScenarioConfig sc;
    sc.scenario = scenario;
    sc.n_units = n_units;
    sc.validate();
  }
};

struct ReplicateCell {
  bool attempted = false;
  bool ok = false;
  double theta = std::numeric_limits<double>::quiet_NaN();
  double vhat = std::numeric_limits<double>::quiet_NaN();
  bool has_vhat = false;
  bool ci_hit_mean = false;  // interval covers the scenario (model) mean
  bool ci_hit_fp = false;    // interval covers this replicate's theta_N
  std::string error;
};

struct ReplicateRecord {
  double theta_fp = std::numeric_limits<double>::quiet_NaN();
  std::array<ReplicateCell, 7> cells;  // indexed by EstimatorKind value
};

namespace detail {

inline size_t kind_index(EstimatorKind k) { return static_cast<size_t>(k); }

/// Lazily fitted shared state of one replicate; a failed fit is remembered
/// and re-thrown for every estimator that depends on it.
struct ReplicateFits {
  const PopulationFrame& frame;
  const McConfig& cfg;
  std::optional<PsParams> ps;
  std::optional<SmoothedPsModel> smoothed;
  std::string ps_error, smoothed_error;

  explicit ReplicateFits(const PopulationFrame& f, const McConfig& c) : frame(f), cfg(c) {}

  const PsParams& need_ps() {
    if (ps) return *ps;
    if (!ps_error.empty()) throw NonConvergenceError(ps_error);
    try {
      PsParams model;  // default: logit pi = phi0 + phi1 x1 + phi2 y, b = (1, x)
      PsFit fit = fit_ps(frame, default_ps_init(frame, model));
      if (!fit.diagnostics.converged)
        throw NonConvergenceError("fit_ps: no convergence (residual " +
                                  std::to_string(fit.diagnostics.final_residual_norm) + ")");
      ps = fit.params;
    } catch (const std::exception& e) {
      ps_error = e.what();
      throw;
    }
    return *ps;
  }

  const SmoothedPsModel& need_smoothed() {
    if (smoothed) return *smoothed;
    if (!smoothed_error.empty()) throw NonConvergenceError(smoothed_error);
    try {
      smoothed = fit_smoothed_model(frame, need_ps(), cfg.sigma2_rule);
    } catch (const std::exception& e) {
      smoothed_error = e.what();
      throw;
    }
    return *smoothed;
  }
};

}  // namespace detail

/// Runs every requested estimator on one synthetic replicate. The replicate
/// seed is derived from (config seed, index), so records depend only on the
/// pair and never on scheduling. Estimator failures are recorded in place;
/// the replicate carries on.
inline ReplicateRecord run_replicate(const McConfig& config, int replicate_index) {
  config.validate();
  ScenarioConfig sc;
  sc.scenario = config.scenario;
  sc.n_units = config.n_units;
  sc.seed = substream_seed(config.seed, static_cast<std::uint64_t>(replicate_index));
  const PopulationFrame frame = generate_population(sc);

  ReplicateRecord rec;
  rec.theta_fp = frame.oracle().y_full.mean();
  const double model_mean = sc.model_mean();

  detail::ReplicateFits fits(frame, config);

  for (EstimatorKind kind : config.estimators) {
    ReplicateCell& cell = rec.cells[detail::kind_index(kind)];
    cell.attempted = true;
    try {
      switch (kind) {
        case EstimatorKind::Full:
          cell.theta = theta_full(frame);
          break;
        case EstimatorKind::ElMar:
          cell.theta = theta_el_mar(frame).theta;
          break;
        case EstimatorKind::Ps: {
          const PsParams& ps = fits.need_ps();
          cell.theta = theta_ps(frame, ps);
          cell.vhat = var_ps(frame, ps).variance;
          cell.has_vhat = true;
          break;
        }
        case EstimatorKind::El1: {
          cell.theta = theta_el(frame, fits.need_ps(), fits.need_smoothed(), EstimatorKind::El1,
                                config.w_rule)
                           .theta;
          cell.vhat =
              var_el(frame, fits.need_ps(), fits.need_smoothed(), false, config.w_rule).variance;
          cell.has_vhat = true;
          break;
        }
        case EstimatorKind::El2: {
          cell.theta = theta_el(frame, fits.need_ps(), fits.need_smoothed(), EstimatorKind::El2,
                                config.w_rule)
                           .theta;
          cell.vhat =
              var_el(frame, fits.need_ps(), fits.need_smoothed(), true, config.w_rule).variance;
          cell.has_vhat = true;
          break;
        }
        case EstimatorKind::ElKnownPi:
          cell.theta = theta_el_known_pi(frame).theta;
          cell.vhat = var_el_known_pi(frame).variance;
          cell.has_vhat = true;
          break;
        case EstimatorKind::RpsOpt:
          cell.theta = theta_rps_optimal(frame, fits.need_ps());
          break;
      }
      cell.ok = true;
      if (cell.has_vhat) {
        const auto [lo, hi] = confidence_interval(cell.theta, cell.vhat, config.ci_level);
        cell.ci_hit_mean = lo <= model_mean && model_mean <= hi;
        cell.ci_hit_fp = lo <= rec.theta_fp && rec.theta_fp <= hi;
      }
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.error = e.what();
    }
  }
  return rec;
}

struct EstimatorSummary {
  EstimatorKind kind = EstimatorKind::Full;
  std::string method;
  int used = 0;
  int failures = 0;
  double bias = std::numeric_limits<double>::quiet_NaN();
  double variance = std::numeric_limits<double>::quiet_NaN();
  double mse = std::numeric_limits<double>::quiet_NaN();
  double mean_vhat = std::numeric_limits<double>::quiet_NaN();
  int vhat_count = 0;
  double coverage = std::numeric_limits<double>::quiet_NaN();     // vs model mean
  double coverage_fp = std::numeric_limits<double>::quiet_NaN();  // vs theta_N
  std::string first_error;
};

struct McSummary {
  std::string scenario;
  int replications = 0;
  std::uint64_t seed = 0;
  double ci_level = 0.95;
  std::vector<EstimatorSummary> rows;
};

/// Replicated study with a deterministic, order-independent reduce: records
/// are stored by replicate index and aggregated sequentially, so the summary
/// does not depend on the worker count. Aborts when more than 10% of the
/// replicates fail for some estimator. Monte Carlo bias is taken against
/// each replicate's own finite-population mean; the variance is the sample
/// variance of the estimator across replicates and mse = bias^2 + variance.
inline McSummary run_monte_carlo(const McConfig& config) {
  config.validate();
  const int b = config.replications;
  std::vector<ReplicateRecord> records(static_cast<size_t>(b));

  auto work = [&](int i) {
    try {
      records[static_cast<size_t>(i)] = run_replicate(config, i);
    } catch (const std::exception& e) {
      // config is validated, so only unexpected failures land here; mark
      // every requested cell failed for this replicate.
      ReplicateRecord rec;
      for (EstimatorKind kind : config.estimators) {
        ReplicateCell& cell = rec.cells[detail::kind_index(kind)];
        cell.attempted = true;
        cell.error = e.what();
      }
      records[static_cast<size_t>(i)] = std::move(rec);
    }
  };

  const int workers = std::min<int>(config.workers, b);
  if (workers <= 1) {
    for (int i = 0; i < b; ++i) work(i);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int t = 0; t < workers; ++t)
      pool.emplace_back([&]() {
        for (int i = next.fetch_add(1); i < b; i = next.fetch_add(1)) work(i);
      });
    for (auto& t : pool) t.join();
  }

  McSummary summary;
  summary.scenario = scenario_label(config.scenario);
  summary.replications = b;
  summary.seed = config.seed;
  summary.ci_level = config.ci_level;

  for (EstimatorKind kind : config.estimators) {
    EstimatorSummary row;
    row.kind = kind;
    row.method = estimator_label(kind);

    double sum_theta = 0.0, sum_dev = 0.0, sum_vhat = 0.0;
    int hits_mean = 0, hits_fp = 0;
    for (const auto& rec : records) {
      const ReplicateCell& cell = rec.cells[detail::kind_index(kind)];
      if (!cell.ok) {
        ++row.failures;
        if (row.first_error.empty() && !cell.error.empty()) row.first_error = cell.error;
        continue;
      }
      ++row.used;
      sum_theta += cell.theta;
      sum_dev += cell.theta - rec.theta_fp;
      if (cell.has_vhat) {
        ++row.vhat_count;
        sum_vhat += cell.vhat;
        hits_mean += cell.ci_hit_mean ? 1 : 0;
        hits_fp += cell.ci_hit_fp ? 1 : 0;
      }
    }
    if (row.failures > b / 10)
      throw NonConvergenceError("run_monte_carlo: estimator '" + row.method + "' failed in " +
                                std::to_string(row.failures) + " of " + std::to_string(b) +
                                " replicates (" + row.first_error + ")");
    if (row.used > 0) {
      const double mean_theta = sum_theta / row.used;
      row.bias = sum_dev / row.used;
      double ss = 0.0;
      for (const auto& rec : records) {
        const ReplicateCell& cell = rec.cells[detail::kind_index(kind)];
        if (cell.ok) ss += (cell.theta - mean_theta) * (cell.theta - mean_theta);
      }
      row.variance = row.used > 1 ? ss / (row.used - 1) : 0.0;
      row.mse = row.bias * row.bias + row.variance;
    }
    if (row.vhat_count > 0) {
      row.mean_vhat = sum_vhat / row.vhat_count;
      row.coverage = static_cast<double>(hits_mean) / row.vhat_count;
      row.coverage_fp = static_cast<double>(hits_fp) / row.vhat_count;
    }
    summary.rows.push_back(std::move(row));
  }
  return summary;
}

struct CoverageReport {
  double coverage = std::numeric_limits<double>::quiet_NaN();
  double coverage_fp = std::numeric_limits<double>::quiet_NaN();
  double mean_vhat = std::numeric_limits<double>::quiet_NaN();
  double mc_variance = std::numeric_limits<double>::quiet_NaN();
  double relative_bias = std::numeric_limits<double>::quiet_NaN();  // mean_vhat/mc_variance - 1
  int replicates_used = 0;
};

/// Coverage study for the el2 interval estimator; also reports the
/// variance-estimator calibration ratio mean(vhat)/mc_variance.
inline CoverageReport run_coverage(const McConfig& config) {
  bool has_el2 = false;
  for (EstimatorKind k : config.estimators) has_el2 |= (k == EstimatorKind::El2);
  if (!has_el2) throw DataError("run_coverage: estimator list must include el2");

  const McSummary summary = run_monte_carlo(config);
  CoverageReport report;
  for (const auto& row : summary.rows) {
    if (row.kind != EstimatorKind::El2) continue;
    report.coverage = row.coverage;
    report.coverage_fp = row.coverage_fp;
    report.mean_vhat = row.mean_vhat;
    report.mc_variance = row.variance;
    report.relative_bias = row.mean_vhat / row.variance - 1.0;
    report.replicates_used = row.used;
  }
  return report;
}

namespace detail {

inline std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace detail

/// CSV rendering of a summary; byte-stable for identical summaries.
inline std::string summary_to_csv(const McSummary& summary) {
  std::string out = "scenario,method,bias,var_x1000,mse_x1000,mean_vhat_x1000,coverage,failures\n";
  for (const auto& row : summary.rows) {
    out += summary.scenario;
    out += ',';
    out += row.method;
    out += ',';
    out += detail::fixed(row.bias, 6);
    out += ',';
    out += detail::fixed(row.variance * 1000.0, 6);
    out += ',';
    out += detail::fixed(row.mse * 1000.0, 6);
    out += ',';
    out += detail::fixed(row.mean_vhat * 1000.0, 6);
    out += ',';
    out += detail::fixed(row.coverage, 4);
    out += ',';
    out += std::to_string(row.failures);
    out += '\n';
  }
  return out;
}

/// JSON mirror of the CSV table, with the extra diagnostics (coverage of the
/// finite-population mean, replicate counts).
inline std::string summary_to_json(const McSummary& summary) {
  nlohmann::json j;
  j["scenario"] = summary.scenario;
  j["replications"] = summary.replications;
  j["seed"] = summary.seed;
  j["ci_level"] = summary.ci_level;
  j["rows"] = nlohmann::json::array();
  for (const auto& row : summary.rows) {
    nlohmann::json r;
    r["method"] = row.method;
    r["used"] = row.used;
    r["failures"] = row.failures;
    auto put = [&r](const char* key, double v) {
      if (std::isnan(v))
        r[key] = nullptr;
      else
        r[key] = v;
    };
    put("bias", row.bias);
    put("var_x1000", row.variance * 1000.0);
    put("mse_x1000", row.mse * 1000.0);
    put("mean_vhat_x1000", row.mean_vhat * 1000.0);
    put("coverage", row.coverage);
    put("coverage_fp", row.coverage_fp);
    j["rows"].push_back(std::move(r));
  }
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Single-dataset estimation on a user file.

struct EstimateOptions {
  std::vector<EstimatorKind> estimators{EstimatorKind::Ps, EstimatorKind::El1,
                                        EstimatorKind::El2};
  double ci_level = 0.95;
  WTargetRule w_rule = WTargetRule::SmoothedMean;
  Sigma2Rule sigma2_rule = Sigma2Rule::FixedOne;
  std::vector<Index> ps_covariates{0};  // x columns entering the selection model
};

struct EstimateReport {
  struct Row {
    std::string method;
    double theta = std::numeric_limits<double>::quiet_NaN();
    double vhat = std::numeric_limits<double>::quiet_NaN();
    bool has_vhat = false;
    double ci_lo = std::numeric_limits<double>::quiet_NaN();
    double ci_hi = std::numeric_limits<double>::quiet_NaN();
    double max_constraint_residual = std::numeric_limits<double>::quiet_NaN();
  };
  std::vector<Row> rows;
  PsParams ps;
  FitDiagnostics fit;
  SmoothedPsModel smoothed;
  ObsLoglik loglik;
  double w_target = std::numeric_limits<double>::quiet_NaN();
  std::vector<InfluenceVector> influences;
};

/// Full pipeline on a loaded frame: selection-model fit, smoothing,
/// requested estimators, linearization variances and intervals.
inline EstimateReport estimate_frame(const PopulationFrame& frame,
                                     const EstimateOptions& options) {
  if (!frame.fit_feasible())
    throw DataError("estimate: frame is degenerate (needs both selected and non-selected units)");
  for (EstimatorKind kind : options.estimators)
    if (kind == EstimatorKind::ElKnownPi)
      throw DataError("estimate: el-known-pi needs true selection probabilities");

  EstimateReport report;
  PsParams model;
  model.ps_covariates = options.ps_covariates;
  PsFit fit = fit_ps(frame, default_ps_init(frame, model));
  if (!fit.diagnostics.converged)
    throw NonConvergenceError("estimate: selection-model fit did not converge (residual " +
                              std::to_string(fit.diagnostics.final_residual_norm) + ")");
  report.ps = fit.params;
  report.fit = fit.diagnostics;
  report.smoothed = fit_smoothed_model(frame, report.ps, options.sigma2_rule);
  report.loglik = obs_loglik(frame, report.smoothed);
  report.w_target = options.w_rule == WTargetRule::SmoothedMean
                        ? smoothed_mean_target(frame, report.smoothed)
                        : static_cast<double>(frame.sample_size()) /
                              static_cast<double>(frame.n_units());

  for (EstimatorKind kind : options.estimators) {
    EstimateReport::Row row;
    row.method = estimator_label(kind);
    switch (kind) {
      case EstimatorKind::Full:
        row.theta = theta_full(frame);
        break;
      case EstimatorKind::ElMar:
        row.theta = theta_el_mar(frame).theta;
        break;
      case EstimatorKind::Ps: {
        row.theta = theta_ps(frame, report.ps);
        VarReport vr = var_ps(frame, report.ps);
        row.vhat = vr.variance;
        row.has_vhat = true;
        report.influences.push_back(std::move(vr.influence));
        break;
      }
      case EstimatorKind::El1:
      case EstimatorKind::El2: {
        const bool benchmarking = kind == EstimatorKind::El2;
        ElEstimate est = theta_el(frame, report.ps, report.smoothed, kind, options.w_rule);
        row.theta = est.theta;
        row.max_constraint_residual =
            est.solution.constraint_residual.cwiseAbs().maxCoeff();
        VarReport vr = var_el(frame, report.ps, report.smoothed, benchmarking, options.w_rule);
        row.vhat = vr.variance;
        row.has_vhat = true;
        report.influences.push_back(std::move(vr.influence));
        break;
      }
      case EstimatorKind::RpsOpt:
        row.theta = theta_rps_optimal(frame, report.ps);
        break;
      case EstimatorKind::ElKnownPi:
        break;  // rejected above
    }
    if (row.has_vhat) {
      const auto [lo, hi] = confidence_interval(row.theta, row.vhat, options.ci_level);
      row.ci_lo = lo;
      row.ci_hi = hi;
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace elvs

#endif  // ELVS_MC_HPP
