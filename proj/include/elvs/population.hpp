#ifndef ELVS_POPULATION_HPP
#define ELVS_POPULATION_HPP

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "elvs/errors.hpp"
#include "elvs/rng.hpp"

namespace elvs {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

inline double expit(double t) {
  if (t >= 0.0) {
    const double e = std::exp(-t);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(t);
  return e / (1.0 + e);
}

enum class Scenario { M1, M2 };

inline const char* scenario_label(Scenario s) {
  return s == Scenario::M1 ? "m1" : "m2";
}

/// Configuration of one synthetic finite population. Both scenarios share
/// the covariate and selection laws and differ only in the outcome mean:
///   M1: y = -4 + x1 + x2 + e          (linear)
///   M2: y = 0.5*(x1 + x2 - 5)^2 - 1.5 + e  (quadratic)
/// with x1, x2 ~ N(2,1), e ~ N(0,1) and selection probability
/// expit(phi0 + phi1*x1 + phi2*y). Both outcome means are 0 by construction.
struct ScenarioConfig {
  Scenario scenario = Scenario::M1;
  Index n_units = 5000;
  std::array<double, 3> phi_true{-2.0, 1.0, 0.5};
  std::uint64_t seed = 0;

  void validate() const {
    if (n_units < 10) throw DataError("ScenarioConfig: n_units must be >= 10");
    for (double v : phi_true)
      if (!std::isfinite(v)) throw DataError("ScenarioConfig: phi_true must be finite");
  }

  /// Superpopulation mean E(y); 0 for both scenarios.
  double model_mean() const { return 0.0; }
};

/// Finite population of N units: auxiliary matrix x (observed everywhere),
/// selection indicators delta, and outcomes y observed only where delta=1.
/// Immutable after construction and safe to share across threads.
///
/// Synthetic frames additionally carry an oracle block (full outcome vector
/// and true selection probabilities). The oracle block exists for test
/// oracles and the full-sample reference estimator only; estimation code
/// paths read outcomes through y() which refuses non-respondents.
class PopulationFrame {
 public:
  struct OracleData {
    VectorXd y_full;   // outcome for every unit
    VectorXd true_pi;  // empty when unknown (e.g. loaded data)
  };

  PopulationFrame(MatrixXd x, std::vector<std::string> x_names, VectorXi delta,
                  VectorXd y_observed, std::optional<OracleData> oracle = std::nullopt)
      : x_(std::move(x)),
        x_names_(std::move(x_names)),
        delta_(std::move(delta)),
        y_(std::move(y_observed)),
        oracle_(std::move(oracle)) {
    const Index n = x_.rows();
    if (n < 1) throw DataError("PopulationFrame: empty population");
    if (delta_.size() != n || y_.size() != n)
      throw DataError("PopulationFrame: column length mismatch");
    if (static_cast<Index>(x_names_.size()) != x_.cols())
      throw DataError("PopulationFrame: x column name count mismatch");
    for (Index i = 0; i < n; ++i) {
      if (delta_[i] != 0 && delta_[i] != 1)
        throw DataError("PopulationFrame: delta must be 0 or 1 at row " + std::to_string(i));
      if (delta_[i] == 1 && !std::isfinite(y_[i]))
        throw DataError("PopulationFrame: missing outcome for selected unit at row " +
                        std::to_string(i));
      if (delta_[i] == 1) respondents_.push_back(i);
    }
    if (oracle_) {
      if (oracle_->y_full.size() != n)
        throw DataError("PopulationFrame: oracle outcome length mismatch");
      if (oracle_->true_pi.size() != 0 && oracle_->true_pi.size() != n)
        throw DataError("PopulationFrame: oracle pi length mismatch");
    }
  }

  Index n_units() const { return x_.rows(); }
  Index n_covariates() const { return x_.cols(); }
  Index sample_size() const { return static_cast<Index>(respondents_.size()); }

  const MatrixXd& x() const { return x_; }
  const std::vector<std::string>& x_names() const { return x_names_; }
  const VectorXi& delta() const { return delta_; }
  const std::vector<Index>& respondents() const { return respondents_; }

  /// Outcome of a selected unit. Estimation code obtains every outcome
  /// through this guard; reading y where delta=0 is a logic error.
  double y(Index i) const {
    if (delta_[i] != 1)
      throw std::logic_error("PopulationFrame::y: outcome requested for non-selected unit " +
                             std::to_string(i));
    return y_[i];
  }

  /// Outcomes of the selected units, in respondent order.
  VectorXd y_sample() const {
    VectorXd out(sample_size());
    for (Index j = 0; j < out.size(); ++j) out[j] = y_[respondents_[static_cast<size_t>(j)]];
    return out;
  }

  bool has_oracle() const { return oracle_.has_value(); }
  bool has_true_pi() const { return oracle_ && oracle_->true_pi.size() > 0; }

  /// Oracle-only data; never consulted by estimators.
  const OracleData& oracle() const {
    if (!oracle_) throw DataError("PopulationFrame: no oracle data attached");
    return *oracle_;
  }

  /// True when selection-model fitting is well posed (some units in, some out).
  bool fit_feasible() const {
    const Index n = sample_size();
    return n >= 1 && n < n_units();
  }

 private:
  MatrixXd x_;
  std::vector<std::string> x_names_;
  VectorXi delta_;
  VectorXd y_;  // NaN where delta=0
  std::optional<OracleData> oracle_;
  std::vector<Index> respondents_;
};

/// Generates one finite population. Draw order per unit is fixed and part of
/// the reproducibility contract: x1, x2, e (normals by inverse CDF), then the
/// selection uniform. Identical config (including seed) gives a bit-identical
/// frame.
inline PopulationFrame generate_population(const ScenarioConfig& config) {
  config.validate();
  const Index n = config.n_units;
  Rng rng(config.seed);

  MatrixXd x(n, 2);
  VectorXd y_full(n), true_pi(n), y_obs(n);
  VectorXi delta(n);
  const auto [phi0, phi1, phi2] = config.phi_true;

  for (Index i = 0; i < n; ++i) {
    const double x1 = 2.0 + rng.normal();
    const double x2 = 2.0 + rng.normal();
    const double e = rng.normal();
    const double y = config.scenario == Scenario::M1
                         ? -4.0 + x1 + x2 + e
                         : 0.5 * (x1 + x2 - 5.0) * (x1 + x2 - 5.0) - 1.5 + e;
    const double pi = expit(phi0 + phi1 * x1 + phi2 * y);
    const bool selected = rng.bernoulli(pi);
    x(i, 0) = x1;
    x(i, 1) = x2;
    y_full[i] = y;
    true_pi[i] = pi;
    delta[i] = selected ? 1 : 0;
    y_obs[i] = selected ? y : std::numeric_limits<double>::quiet_NaN();
  }

  return PopulationFrame(std::move(x), {"x1", "x2"}, std::move(delta), std::move(y_obs),
                         PopulationFrame::OracleData{std::move(y_full), std::move(true_pi)});
}

/// Column-name map for CSV ingestion.
struct CsvSchema {
  std::vector<std::string> x_columns{"x1", "x2"};
  std::string delta_column = "delta";
  std::string y_column = "y";
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

inline double parse_double(const std::string& s, Index row, const std::string& col) {
  size_t pos = 0;
  double v;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw DataError("row " + std::to_string(row) + ": cannot parse '" + s + "' in column " + col);
  }
  while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
  if (pos != s.size())
    throw DataError("row " + std::to_string(row) + ": trailing junk in column " + col);
  return v;
}

inline bool is_blank(const std::string& s) {
  for (char c : s)
    if (c != ' ' && c != '\t') return false;
  return true;
}

}  // namespace detail

/// Reads a population from CSV. Header row is required; columns are located
/// by name through the schema. The outcome field must be non-empty exactly
/// where delta=1; rows violating that are rejected with their row number.
/// When every row carries an outcome, the full vector is retained as oracle
/// data (true selection probabilities are never available from files).
inline PopulationFrame load_population(const std::string& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  const auto header = detail::split_csv_line(line);

  auto column_index = [&](const std::string& name) -> Index {
    for (size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return static_cast<Index>(j);
    throw DataError(path + ": missing column '" + name + "'");
  };

  std::vector<Index> x_idx;
  for (const auto& name : schema.x_columns) x_idx.push_back(column_index(name));
  const Index delta_idx = column_index(schema.delta_column);
  const Index y_idx = column_index(schema.y_column);

  std::vector<std::vector<double>> x_rows;
  std::vector<int> delta;
  std::vector<double> y_obs, y_full;
  bool all_y_present = true;

  Index row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (detail::is_blank(line)) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size())
      throw DataError("row " + std::to_string(row) + ": expected " +
                      std::to_string(header.size()) + " fields, got " +
                      std::to_string(fields.size()));

    std::vector<double> xr;
    for (size_t j = 0; j < x_idx.size(); ++j)
      xr.push_back(detail::parse_double(fields[static_cast<size_t>(x_idx[j])], row,
                                        schema.x_columns[j]));

    const double dv = detail::parse_double(fields[static_cast<size_t>(delta_idx)], row,
                                           schema.delta_column);
    if (dv != 0.0 && dv != 1.0)
      throw DataError("row " + std::to_string(row) + ": delta must be 0 or 1");
    const int d = static_cast<int>(dv);

    const std::string& yf = fields[static_cast<size_t>(y_idx)];
    double yv = std::numeric_limits<double>::quiet_NaN();
    if (detail::is_blank(yf)) {
      if (d == 1)
        throw DataError("row " + std::to_string(row) + ": delta=1 but outcome is missing");
      all_y_present = false;
    } else {
      yv = detail::parse_double(yf, row, schema.y_column);
    }

    x_rows.push_back(std::move(xr));
    delta.push_back(d);
    y_obs.push_back(d == 1 ? yv : std::numeric_limits<double>::quiet_NaN());
    y_full.push_back(yv);
  }
  if (x_rows.empty()) throw DataError(path + ": no data rows");

  const Index n = static_cast<Index>(x_rows.size());
  const Index k = static_cast<Index>(schema.x_columns.size());
  MatrixXd x(n, k);
  VectorXi dv(n);
  VectorXd yo(n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < k; ++j) x(i, j) = x_rows[static_cast<size_t>(i)][static_cast<size_t>(j)];
    dv[i] = delta[static_cast<size_t>(i)];
    yo[i] = y_obs[static_cast<size_t>(i)];
  }

  std::optional<PopulationFrame::OracleData> oracle;
  if (all_y_present) {
    VectorXd yfull(n);
    for (Index i = 0; i < n; ++i) yfull[i] = y_full[static_cast<size_t>(i)];
    oracle = PopulationFrame::OracleData{std::move(yfull), VectorXd()};
  }

  return PopulationFrame(std::move(x), schema.x_columns, std::move(dv), std::move(yo),
                         std::move(oracle));
}

/// Writes a frame as CSV with round-trip float precision. By default only
/// respondent outcomes are written (the field is empty where delta=0);
/// include_oracle_y=true writes the full oracle outcome vector instead.
inline void save_population(const PopulationFrame& frame, const std::string& path,
                            bool include_oracle_y = false) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open file for writing: " + path);

  char buf[40];
  auto fmt = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };

  for (Index j = 0; j < frame.n_covariates(); ++j)
    out << frame.x_names()[static_cast<size_t>(j)] << ',';
  out << "delta,y\n";

  for (Index i = 0; i < frame.n_units(); ++i) {
    for (Index j = 0; j < frame.n_covariates(); ++j) out << fmt(frame.x()(i, j)) << ',';
    out << frame.delta()[i] << ',';
    if (frame.delta()[i] == 1)
      out << fmt(frame.y(i));
    else if (include_oracle_y && frame.has_oracle())
      out << fmt(frame.oracle().y_full[i]);
    out << '\n';
  }
}

}  // namespace elvs

#endif  // ELVS_POPULATION_HPP
