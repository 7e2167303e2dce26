#include "cdssl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace cdssl::metrics {

namespace {

void require_same_length(std::span<const double> a, std::span<const double> b, size_t min_len) {
  if (a.size() != b.size())
    throw std::invalid_argument("length mismatch: " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  if (a.size() < min_len)
    throw std::invalid_argument("need at least " + std::to_string(min_len) + " values");
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string format_p(double p) {
  std::ostringstream os;
  os.precision(4);
  os << p;
  return os.str();
}

}  // namespace

double r_squared(std::span<const double> y, std::span<const double> yhat) {
  require_same_length(y, yhat, 2);
  const double ybar = mean_of(y);
  double ss_res = 0.0, ss_tot = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    ss_res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    ss_tot += (y[i] - ybar) * (y[i] - ybar);
  }
  if (ss_tot == 0.0) throw std::invalid_argument("undefined total sum of squares");
  return 1.0 - ss_res / ss_tot;
}

double pearson_r(std::span<const double> y, std::span<const double> yhat) {
  require_same_length(y, yhat, 2);
  const double my = mean_of(y), mh = mean_of(yhat);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    const double a = y[i] - my, b = yhat[i] - mh;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("correlation undefined for constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double mse(std::span<const double> y, std::span<const double> yhat) {
  require_same_length(y, yhat, 1);
  double s = 0.0;
  for (size_t i = 0; i < y.size(); ++i) s += (y[i] - yhat[i]) * (y[i] - yhat[i]);
  return s / static_cast<double>(y.size());
}

double fisher_z(double r) {
  if (!(std::abs(r) < 1.0)) throw std::domain_error("fisher_z requires |r| < 1");
  return std::atanh(r);
}

double normal_two_tailed_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

SteigerResult steiger_z1(double r12, double r13, double r23, int n) {
  if (n < 4) throw std::invalid_argument("steiger_z1 requires n >= 4");
  for (double r : {r12, r13})
    if (!(std::abs(r) < 1.0)) throw std::domain_error("correlations with the truth must lie in (-1, 1)");
  // r23 = 1 is legitimate for identical predictors (a model compared with itself)
  if (!(std::abs(r23) <= 1.0)) throw std::domain_error("correlation between models must lie in [-1, 1]");
  const double det = 1.0 - r12 * r12 - r13 * r13 - r23 * r23 + 2.0 * r12 * r13 * r23;
  if (det < -1e-12) throw std::domain_error("correlation triple is not positive semi-definite");

  SteigerResult out;
  out.r12 = r12;
  out.r13 = r13;
  out.r23 = r23;
  out.n = n;
  if (r12 == r13) {
    out.z = 0.0;
    out.p_two_tailed = 1.0;
    return out;
  }
  // Covariance of the two Fisher-transformed correlations, with the pooled
  // estimate rbar standing in for rho12 and rho13.
  const double rbar = 0.5 * (r12 + r13);
  const double rb2 = rbar * rbar;
  const double psi = r23 * (1.0 - 2.0 * rb2) - 0.5 * rb2 * (1.0 - 2.0 * rb2 - r23 * r23);
  const double c = psi / ((1.0 - rb2) * (1.0 - rb2));
  out.z = (fisher_z(r12) - fisher_z(r13)) * std::sqrt(static_cast<double>(n - 3)) /
          std::sqrt(2.0 - 2.0 * c);
  out.p_two_tailed = std::clamp(normal_two_tailed_p(out.z), 0.0, 1.0);
  return out;
}

std::string significance_stars(double p) {
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  return "";
}

ResidualHistogram residual_stats(std::span<const double> y, std::span<const double> yhat, int bins) {
  require_same_length(y, yhat, 1);
  if (bins < 1) throw std::invalid_argument("bins must be >= 1");
  std::vector<double> e(y.size());
  for (size_t i = 0; i < y.size(); ++i) e[i] = yhat[i] - y[i];

  ResidualHistogram h;
  h.mean = mean_of(e);
  if (e.size() > 1) {
    double ss = 0.0;
    for (double v : e) ss += (v - h.mean) * (v - h.mean);
    h.sd = std::sqrt(ss / static_cast<double>(e.size() - 1));
  }

  auto [mn_it, mx_it] = std::minmax_element(e.begin(), e.end());
  double lo = *mn_it, hi = *mx_it;
  if (hi == lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / bins;
  h.bin_edges.resize(bins + 1);
  for (int b = 0; b <= bins; ++b) h.bin_edges[b] = lo + width * b;
  h.bin_edges[bins] = hi;
  h.counts.assign(bins, 0);
  for (double v : e) {
    int b = static_cast<int>(std::floor((v - lo) / width));
    h.counts[std::clamp(b, 0, bins - 1)]++;
  }
  return h;
}

FoldMetrics evaluate_fold(std::span<const double> y, std::span<const double> yhat) {
  FoldMetrics m;
  m.r2 = r_squared(y, yhat);
  m.r = pearson_r(y, yhat);
  m.mse = mse(y, yhat);
  return m;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  if (values.empty()) return s;
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

MetricsReport aggregate_folds(std::span<const FoldMetrics> folds) {
  if (folds.empty()) throw std::invalid_argument("aggregate_folds needs at least one fold");
  MetricsReport rep;
  rep.per_fold.assign(folds.begin(), folds.end());
  std::vector<double> r2, r, m;
  for (const auto& f : folds) {
    r2.push_back(f.r2);
    r.push_back(f.r);
    m.push_back(f.mse);
  }
  rep.r2 = summarize(r2);
  rep.r = summarize(r);
  rep.mse = summarize(m);
  rep.single_fold = folds.size() == 1;
  return rep;
}

nlohmann::json to_json(const SteigerResult& s) {
  return {{"model_a", s.model_a}, {"model_b", s.model_b}, {"r12", s.r12}, {"r13", s.r13},
          {"r23", s.r23},         {"n", s.n},             {"z", s.z},     {"p_two_tailed", s.p_two_tailed},
          {"stars", significance_stars(s.p_two_tailed)}};
}

nlohmann::json to_json(const ResidualHistogram& h) {
  return {{"bin_edges", h.bin_edges}, {"counts", h.counts}, {"mean", h.mean}, {"sd", h.sd}};
}

nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : m.per_fold) folds.push_back({{"r2", f.r2}, {"r", f.r}, {"mse", f.mse}});
  nlohmann::json sig = nlohmann::json::array();
  for (const auto& s : m.significance) sig.push_back(to_json(s));
  auto summary = [](const Summary& s) { return nlohmann::json{{"mean", s.mean}, {"sd", s.sd}}; };
  return {{"per_fold", folds},
          {"r2", summary(m.r2)},
          {"r", summary(m.r)},
          {"mse", summary(m.mse)},
          {"single_fold", m.single_fold},
          {"residual_hist", to_json(m.residual_hist)},
          {"significance", sig}};
}

std::string significance_csv(const std::vector<std::string>& tags,
                             const std::vector<SteigerResult>& results) {
  std::map<std::pair<std::string, std::string>, const SteigerResult*> lookup;
  for (const auto& r : results) {
    lookup[{r.model_a, r.model_b}] = &r;
    lookup[{r.model_b, r.model_a}] = &r;
  }
  std::ostringstream os;
  os << "model";
  for (const auto& t : tags) os << ',' << t;
  os << '\n';
  for (const auto& row : tags) {
    os << row;
    for (const auto& col : tags) {
      os << ',';
      if (row == col) {
        os << '-';
        continue;
      }
      auto it = lookup.find({row, col});
      if (it == lookup.end()) continue;
      os << format_p(it->second->p_two_tailed) << significance_stars(it->second->p_two_tailed);
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace cdssl::metrics
