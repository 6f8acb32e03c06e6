// Command-line front end: Monte Carlo simulation, interval-coverage studies,
// and single-dataset estimation from CSV.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "elvs/elvs.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitInput = 2;
constexpr int kExitNonConvergence = 3;
constexpr int kExitInfeasible = 4;

elvs::Scenario parse_scenario(const std::string& s) {
  if (s == "m1" || s == "M1") return elvs::Scenario::M1;
  if (s == "m2" || s == "M2") return elvs::Scenario::M2;
  throw elvs::DataError("unknown scenario '" + s + "' (expected m1 or m2)");
}

std::vector<elvs::EstimatorKind> parse_estimators(const std::vector<std::string>& names) {
  std::vector<elvs::EstimatorKind> kinds;
  for (const auto& name : names) kinds.push_back(elvs::parse_estimator(name));
  return kinds;
}

elvs::WTargetRule parse_w_rule(const std::string& s) {
  if (s == "smoothed") return elvs::WTargetRule::SmoothedMean;
  if (s == "ht") return elvs::WTargetRule::SamplingFraction;
  throw elvs::DataError("unknown w-target rule '" + s + "' (expected smoothed or ht)");
}

elvs::Sigma2Rule parse_sigma2(const std::string& s) {
  if (s == "fixed1") return elvs::Sigma2Rule::FixedOne;
  if (s == "residual") return elvs::Sigma2Rule::RespondentResidual;
  throw elvs::DataError("unknown sigma2 rule '" + s + "' (expected fixed1 or residual)");
}

void write_or_print(const std::string& text, const std::string& path) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw elvs::DataError("cannot open output file: " + path);
  out << text;
}

struct McFlags {
  std::string scenario = "m1";
  long long n = 5000;
  int reps = 1000;
  unsigned long long seed = 1;
  std::vector<std::string> estimators{"full", "el-mar", "ps", "el1", "el2"};
  double ci_level = 0.95;
  int workers = 1;
  std::string out;
  std::string format = "csv";
  std::string w_target = "smoothed";
  std::string sigma2 = "fixed1";
};

void add_mc_flags(CLI::App* cmd, McFlags& f) {
  cmd->add_option("--scenario", f.scenario, "Scenario (m1|m2)")->capture_default_str();
  cmd->add_option("--n", f.n, "Population size per replicate")->capture_default_str();
  cmd->add_option("--reps", f.reps, "Number of Monte Carlo replicates")->capture_default_str();
  cmd->add_option("--seed", f.seed, "Master seed")->capture_default_str();
  cmd->add_option("--estimators", f.estimators,
                  "Estimators: full,el-mar,ps,el1,el2,el-known-pi,rps-opt")
      ->delimiter(',')
      ->capture_default_str();
  cmd->add_option("--ci-level", f.ci_level, "Confidence level")->capture_default_str();
  cmd->add_option("--workers", f.workers, "Worker threads")->capture_default_str();
  cmd->add_option("--out", f.out, "Output file (stdout when omitted)");
  cmd->add_option("--format", f.format, "Output format (csv|json)")->capture_default_str();
  cmd->add_option("--w-target", f.w_target, "Bias-calibration target (smoothed|ht)")
      ->capture_default_str();
  cmd->add_option("--sigma2", f.sigma2, "Outcome-model variance rule (fixed1|residual)")
      ->capture_default_str();
  cmd->set_config("--config", "", "Config file (key=value per flag; flags override)");
}

elvs::McConfig to_config(const McFlags& f) {
  elvs::McConfig cfg;
  cfg.scenario = parse_scenario(f.scenario);
  cfg.n_units = static_cast<elvs::Index>(f.n);
  cfg.replications = f.reps;
  cfg.seed = f.seed;
  cfg.estimators = parse_estimators(f.estimators);
  cfg.ci_level = f.ci_level;
  cfg.workers = f.workers;
  cfg.w_rule = parse_w_rule(f.w_target);
  cfg.sigma2_rule = parse_sigma2(f.sigma2);
  cfg.validate();
  if (f.format != "csv" && f.format != "json")
    throw elvs::DataError("unknown format '" + f.format + "'");
  return cfg;
}

int run_simulate(const McFlags& flags) {
  const elvs::McConfig cfg = to_config(flags);
  const elvs::McSummary summary = elvs::run_monte_carlo(cfg);
  write_or_print(flags.format == "csv" ? elvs::summary_to_csv(summary)
                                       : elvs::summary_to_json(summary),
                 flags.out);
  return kExitOk;
}

int run_coverage_cmd(const McFlags& flags) {
  elvs::McConfig cfg = to_config(flags);
  bool has_el2 = false;
  for (auto k : cfg.estimators) has_el2 |= k == elvs::EstimatorKind::El2;
  if (!has_el2) cfg.estimators.push_back(elvs::EstimatorKind::El2);

  const elvs::McSummary summary = elvs::run_monte_carlo(cfg);
  elvs::CoverageReport report;
  for (const auto& row : summary.rows)
    if (row.kind == elvs::EstimatorKind::El2) {
      report.coverage = row.coverage;
      report.coverage_fp = row.coverage_fp;
      report.mean_vhat = row.mean_vhat;
      report.mc_variance = row.variance;
      report.relative_bias = row.mean_vhat / row.variance - 1.0;
      report.replicates_used = row.used;
    }

  std::printf("el2 interval coverage (level %.4f, %d replicates used)\n", cfg.ci_level,
              report.replicates_used);
  std::printf("  coverage (model mean):      %.4f\n", report.coverage);
  std::printf("  coverage (population mean): %.4f\n", report.coverage_fp);
  std::printf("  mean variance estimate:     %.6e\n", report.mean_vhat);
  std::printf("  Monte Carlo variance:       %.6e\n", report.mc_variance);
  std::printf("  relative bias of vhat:      %+.4f\n", report.relative_bias);
  if (!flags.out.empty())
    write_or_print(flags.format == "csv" ? elvs::summary_to_csv(summary)
                                         : elvs::summary_to_json(summary),
                   flags.out);
  return kExitOk;
}

std::string estimate_csv(const elvs::EstimateReport& report) {
  std::string out = "method,theta,vhat,se,ci_lo,ci_hi,max_constraint_residual\n";
  char buf[64];
  auto cell = [&](double v) {
    if (std::isnan(v)) return std::string();
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return std::string(buf);
  };
  for (const auto& row : report.rows) {
    out += row.method + ',' + cell(row.theta) + ',' + cell(row.vhat) + ',' +
           cell(row.has_vhat ? std::sqrt(row.vhat) : std::nan("")) + ',' + cell(row.ci_lo) +
           ',' + cell(row.ci_hi) + ',' + cell(row.max_constraint_residual) + '\n';
  }
  return out;
}

std::string estimate_json(const elvs::EstimateReport& report) {
  nlohmann::json j;
  j["phi"] = std::vector<double>(report.ps.phi.data(),
                                 report.ps.phi.data() + report.ps.phi.size());
  j["fit_iterations"] = report.fit.iterations;
  j["fit_residual_norm"] = report.fit.final_residual_norm;
  j["alpha"] = std::vector<double>(report.smoothed.alpha.data(),
                                   report.smoothed.alpha.data() + report.smoothed.alpha.size());
  j["sigma2"] = report.smoothed.sigma2;
  j["calibration_residual"] = report.smoothed.calibration_residual;
  j["obs_loglik"] = report.loglik.value;
  j["w_target"] = report.w_target;
  j["rows"] = nlohmann::json::array();
  for (const auto& row : report.rows) {
    nlohmann::json r;
    r["method"] = row.method;
    r["theta"] = row.theta;
    if (row.has_vhat) {
      r["vhat"] = row.vhat;
      r["ci"] = {row.ci_lo, row.ci_hi};
    }
    if (!std::isnan(row.max_constraint_residual))
      r["max_constraint_residual"] = row.max_constraint_residual;
    j["rows"].push_back(std::move(r));
  }
  return j.dump(2) + "\n";
}

int run_estimate(const std::string& file, const std::vector<std::string>& x_cols,
                 const std::string& delta_col, const std::string& y_col,
                 const std::vector<std::string>& estimator_names,
                 const std::vector<std::string>& ps_x, double ci_level,
                 const std::string& w_target, const std::string& sigma2,
                 const std::string& out, const std::string& format,
                 const std::string& influence_out) {
  elvs::CsvSchema schema;
  schema.x_columns = x_cols;
  schema.delta_column = delta_col;
  schema.y_column = y_col;
  const elvs::PopulationFrame frame = elvs::load_population(file, schema);

  elvs::EstimateOptions options;
  options.estimators = parse_estimators(estimator_names);
  options.ci_level = ci_level;
  options.w_rule = parse_w_rule(w_target);
  options.sigma2_rule = parse_sigma2(sigma2);
  options.ps_covariates.clear();
  for (const auto& name : ps_x) {
    bool found = false;
    for (size_t j = 0; j < x_cols.size(); ++j)
      if (x_cols[j] == name) {
        options.ps_covariates.push_back(static_cast<elvs::Index>(j));
        found = true;
      }
    if (!found) throw elvs::DataError("--ps-x column '" + name + "' is not an x column");
  }

  const elvs::EstimateReport report = elvs::estimate_frame(frame, options);

  std::printf("units: %lld  selected: %lld\n",
              static_cast<long long>(frame.n_units()),
              static_cast<long long>(frame.sample_size()));
  std::printf("selection model phi:");
  for (elvs::Index j = 0; j < report.ps.phi.size(); ++j)
    std::printf(" %.6g", report.ps.phi[j]);
  std::printf("  (%d iterations, residual %.3e)\n", report.fit.iterations,
              report.fit.final_residual_norm);
  std::printf("outcome model alpha:");
  for (elvs::Index j = 0; j < report.smoothed.alpha.size(); ++j)
    std::printf(" %.6g", report.smoothed.alpha[j]);
  std::printf("  sigma2 %.6g  calibration residual %.3e\n", report.smoothed.sigma2,
              report.smoothed.calibration_residual);
  std::printf("observed log-likelihood: %.6f%s\n", report.loglik.value,
              report.loglik.clamped_terms > 0 ? " (clamped terms present)" : "");
  std::printf("bias-calibration target W: %.6f\n\n", report.w_target);
  for (const auto& row : report.rows) {
    if (row.has_vhat)
      std::printf("%-12s theta = %+.6f   vhat = %.6e   %.0f%% CI [%+.6f, %+.6f]\n",
                  row.method.c_str(), row.theta, row.vhat, ci_level * 100.0, row.ci_lo,
                  row.ci_hi);
    else
      std::printf("%-12s theta = %+.6f\n", row.method.c_str(), row.theta);
  }

  if (!out.empty())
    write_or_print(format == "csv" ? estimate_csv(report) : estimate_json(report), out);
  if (!influence_out.empty()) {
    if (report.influences.empty())
      throw elvs::DataError("--influence-out: no influence vectors were computed");
    elvs::write_influence_csv(influence_out, report.influences);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Propensity-weighted empirical-likelihood estimation for voluntary samples"};
  app.require_subcommand(1);

  McFlags sim_flags;
  CLI::App* simulate = app.add_subcommand("simulate", "Replicated Monte Carlo study");
  add_mc_flags(simulate, sim_flags);

  McFlags cov_flags;
  CLI::App* coverage = app.add_subcommand("coverage", "Interval coverage study (el2)");
  add_mc_flags(coverage, cov_flags);

  std::string est_file;
  std::vector<std::string> est_x{"x1", "x2"};
  std::string est_delta = "delta", est_y = "y";
  std::vector<std::string> est_estimators{"ps", "el1", "el2"};
  std::vector<std::string> est_ps_x{"x1"};
  double est_ci = 0.95;
  std::string est_w = "smoothed", est_sigma2 = "fixed1";
  std::string est_out, est_format = "csv", est_influence;
  CLI::App* estimate = app.add_subcommand("estimate", "Estimate from a CSV file");
  estimate->add_option("file", est_file, "CSV file with header")->required();
  estimate->add_option("--x", est_x, "Auxiliary column names")->delimiter(',')->capture_default_str();
  estimate->add_option("--delta", est_delta, "Selection-indicator column")->capture_default_str();
  estimate->add_option("--y", est_y, "Outcome column")->capture_default_str();
  estimate->add_option("--estimators", est_estimators, "Estimators to run")
      ->delimiter(',')
      ->capture_default_str();
  estimate->add_option("--ps-x", est_ps_x, "x columns in the selection model")
      ->delimiter(',')
      ->capture_default_str();
  estimate->add_option("--ci-level", est_ci, "Confidence level")->capture_default_str();
  estimate->add_option("--w-target", est_w, "Bias-calibration target (smoothed|ht)")
      ->capture_default_str();
  estimate->add_option("--sigma2", est_sigma2, "Outcome-model variance rule (fixed1|residual)")
      ->capture_default_str();
  estimate->add_option("--out", est_out, "Report output file");
  estimate->add_option("--format", est_format, "Report format (csv|json)")->capture_default_str();
  estimate->add_option("--influence-out", est_influence, "Influence-vector CSV for diagnostics");
  estimate->set_config("--config", "", "Config file (key=value per flag; flags override)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return run_simulate(sim_flags);
    if (coverage->parsed()) return run_coverage_cmd(cov_flags);
    if (estimate->parsed())
      return run_estimate(est_file, est_x, est_delta, est_y, est_estimators, est_ps_x, est_ci,
                          est_w, est_sigma2, est_out, est_format, est_influence);
  } catch (const elvs::InfeasibleError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInfeasible;
  } catch (const elvs::NonConvergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNonConvergence;
  } catch (const elvs::DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInput;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
