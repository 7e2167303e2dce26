#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace cdssl::metrics {

/// Coefficient of determination, 1 - SS_res / SS_tot. Negative values are
/// legal for predictors worse than the mean.
double r_squared(std::span<const double> y, std::span<const double> yhat);

/// Sample Pearson correlation.
double pearson_r(std::span<const double> y, std::span<const double> yhat);

double mse(std::span<const double> y, std::span<const double> yhat);

/// Fisher transform arctanh(r).
double fisher_z(double r);

struct SteigerResult {
  std::string model_a;
  std::string model_b;
  double r12 = 0.0;  // truth vs model A
  double r13 = 0.0;  // truth vs model B
  double r23 = 0.0;  // model A vs model B
  int n = 0;
  double z = 0.0;
  double p_two_tailed = 1.0;
};

/// Steiger's Z1* test for two dependent correlations sharing variable 1,
/// using the pooled correlation in the covariance term.
SteigerResult steiger_z1(double r12, double r13, double r23, int n);

/// Two-tailed p-value of a standard normal statistic.
double normal_two_tailed_p(double z);

/// "*", "**", "***" for p below 0.05, 0.01, 0.001; empty otherwise.
std::string significance_stars(double p);

struct ResidualHistogram {
  std::vector<double> bin_edges;  // bins + 1 entries
  std::vector<int> counts;
  double mean = 0.0;
  double sd = 0.0;  // sample sd, 0 for a single residual
};

/// Residuals are e = yhat - y; bins are uniform over [min(e), max(e)].
ResidualHistogram residual_stats(std::span<const double> y, std::span<const double> yhat, int bins);

struct FoldMetrics {
  double r2 = 0.0;
  double r = 0.0;
  double mse = 0.0;
};

FoldMetrics evaluate_fold(std::span<const double> y, std::span<const double> yhat);

struct Summary {
  double mean = 0.0;
  double sd = 0.0;
};

struct MetricsReport {
  std::vector<FoldMetrics> per_fold;
  Summary r2, r, mse;
  bool single_fold = false;
  ResidualHistogram residual_hist;
  std::vector<SteigerResult> significance;
};

/// Unweighted mean and sample standard deviation across folds. Invariant to
/// fold order (statistics are accumulated over sorted values).
MetricsReport aggregate_folds(std::span<const FoldMetrics> folds);

/// Mean and sample sd of a list, order-independent.
Summary summarize(std::span<const double> values);

nlohmann::json to_json(const SteigerResult& s);
nlohmann::json to_json(const ResidualHistogram& h);
nlohmann::json to_json(const MetricsReport& m);

/// Pairwise significance grid in CSV form: header row of model tags, each cell
/// "p<stars>" for the upper triangle and "-" on the diagonal.
std::string significance_csv(const std::vector<std::string>& tags,
                             const std::vector<SteigerResult>& results);

}  // namespace cdssl::metrics
