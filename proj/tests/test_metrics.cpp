#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "cdssl/metrics.hpp"
#include "oracles.hpp"

using namespace cdssl::metrics;

TEST_CASE("r_squared worked values") {
  const std::vector<double> y{0, 1, 2};
  CHECK(r_squared(y, y) == 1.0);
  CHECK(r_squared(y, std::vector<double>{1, 1, 1}) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(std::abs(r_squared(y, std::vector<double>{0, 1, 1}) - 0.5) < 1e-9);
  // negative R^2 is a legal outcome
  CHECK(r_squared(y, std::vector<double>{2, 1, 0}) < 0.0);
  CHECK_THROWS(r_squared(std::vector<double>{1, 1}, std::vector<double>{0, 2}));
}

TEST_CASE("pearson_r worked values") {
  const std::vector<double> y{1, 2, 3, 5};
  std::vector<double> lin, neg;
  for (double v : y) {
    lin.push_back(2 * v + 3);
    neg.push_back(-v);
  }
  CHECK(std::abs(pearson_r(y, lin) - 1.0) < 1e-12);
  CHECK(std::abs(pearson_r(y, neg) + 1.0) < 1e-12);
  CHECK(std::abs(pearson_r(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 4}) - 9.0 / std::sqrt(84.0)) < 1e-9);
  CHECK_THROWS(pearson_r(std::vector<double>{1, 2}, std::vector<double>{3, 3}));
}

TEST_CASE("mse worked values") {
  CHECK(mse(std::vector<double>{1, 2}, std::vector<double>{1, 2}) == 0.0);
  CHECK(std::abs(mse(std::vector<double>{0, 0}, std::vector<double>{1, -1}) - 1.0) < 1e-9);
  CHECK(std::abs(mse(std::vector<double>{0, 3}, std::vector<double>{1, 1}) - 2.5) < 1e-9);
  CHECK_THROWS(mse(std::vector<double>{0, 3}, std::vector<double>{1}));
}

TEST_CASE("fisher_z") {
  CHECK(fisher_z(0.0) == 0.0);
  CHECK(fisher_z(0.5) == doctest::Approx(0.5493061443340549).epsilon(1e-12));
  for (double r : {0.1, 0.37, 0.8, 0.99}) CHECK(fisher_z(-r) == -fisher_z(r));
  CHECK_THROWS(fisher_z(1.0));
}

TEST_CASE("r_squared equals r^2 for the least-squares fit") {
  std::mt19937_64 rng(41);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 10; ++t) {
    std::vector<double> x(50), y(50);
    for (int i = 0; i < 50; ++i) {
      x[i] = nd(rng);
      y[i] = 0.7 * x[i] + nd(rng);
    }
    // closed-form OLS of y on x
    double mx = 0, my = 0;
    for (int i = 0; i < 50; ++i) {
      mx += x[i] / 50;
      my += y[i] / 50;
    }
    double sxy = 0, sxx = 0;
    for (int i = 0; i < 50; ++i) {
      sxy += (x[i] - mx) * (y[i] - my);
      sxx += (x[i] - mx) * (x[i] - mx);
    }
    std::vector<double> fit(50);
    for (int i = 0; i < 50; ++i) fit[i] = my + sxy / sxx * (x[i] - mx);
    const double r = pearson_r(y, fit);
    CHECK(std::abs(r_squared(y, fit) - r * r) < 1e-12);
  }
}

TEST_CASE("metric invariances") {
  std::mt19937_64 rng(43);
  std::normal_distribution<double> nd;
  std::vector<double> y(30), p(30), q(30);
  for (int i = 0; i < 30; ++i) {
    y[i] = nd(rng);
    p[i] = y[i] + nd(rng);
    q[i] = 0.5 * y[i] + nd(rng);
  }
  std::vector<size_t> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> yp, pp;
  for (size_t i : perm) {
    yp.push_back(y[i]);
    pp.push_back(p[i]);
  }
  CHECK(r_squared(yp, pp) == doctest::Approx(r_squared(y, p)).epsilon(1e-12));

  std::vector<double> y2, p2, q2;
  for (int i = 0; i < 30; ++i) {
    y2.push_back(3 * y[i] - 1);
    p2.push_back(0.2 * p[i] + 7);
    q2.push_back(5 * q[i] - 2);
  }
  CHECK(pearson_r(y2, p2) == doctest::Approx(pearson_r(y, p)).epsilon(1e-12));
  const auto s1 = steiger_z1(pearson_r(y, p), pearson_r(y, q), pearson_r(p, q), 30);
  const auto s2 = steiger_z1(pearson_r(y2, p2), pearson_r(y2, q2), pearson_r(p2, q2), 30);
  CHECK(s1.z == doctest::Approx(s2.z).epsilon(1e-9));
}

TEST_CASE("steiger_z1 basic contract") {
  const auto eq = steiger_z1(0.4, 0.4, 0.3, 50);
  CHECK(eq.z == 0.0);
  CHECK(eq.p_two_tailed == 1.0);

  const auto a = steiger_z1(0.46, 0.33, 0.4, 300), b = steiger_z1(0.33, 0.46, 0.4, 300);
  CHECK(a.z == doctest::Approx(-b.z).epsilon(1e-12));
  CHECK(a.p_two_tailed == doctest::Approx(b.p_two_tailed).epsilon(1e-12));
  CHECK(a.p_two_tailed < 0.05);
  // hand-computed from the pooled-rbar formula
  CHECK(a.z == doctest::Approx(2.2967).epsilon(1e-3));

  // identical predictors (r23 = 1) are accepted and give no difference
  CHECK(steiger_z1(0.5, 0.5, 1.0, 20).p_two_tailed == 1.0);
  CHECK_THROWS(steiger_z1(0.5, 0.4, 0.3, 3));
  CHECK_THROWS(steiger_z1(1.0, 0.4, 0.3, 30));
  CHECK_THROWS(steiger_z1(0.9, -0.9, 0.9, 30));  // not positive semi-definite
}

TEST_CASE("steiger_z1 agrees with a Monte-Carlo null distribution") {
  // Under H0 (rho12 = rho13 = pooled r, rho23 fixed) simulate r12 - r13 and
  // compare the tail probability of the observed difference.
  const double r12 = 0.46, r13 = 0.33, r23 = 0.4;
  const int n = 300, sims = 4000;
  const double rbar = 0.5 * (r12 + r13);
  std::mt19937_64 rng(47);
  int extreme = 0;
  for (int s = 0; s < sims; ++s) {
    const auto c = oracle::sample_correlations(rbar, rbar, r23, n, rng);
    if (std::abs(c[0] - c[1]) >= r12 - r13) ++extreme;
  }
  const double mc_p = static_cast<double>(extreme) / sims;
  const double p = steiger_z1(r12, r13, r23, n).p_two_tailed;
  CHECK(mc_p < 0.05);
  CHECK(std::abs(p - mc_p) < 0.01);
}

TEST_CASE("steiger_z1 null p-values are uniform") {
  std::mt19937_64 rng(53);
  std::vector<double> ps;
  for (int s = 0; s < 2000; ++s) {
    const auto c = oracle::sample_correlations(0.4, 0.4, 0.5, 100, rng);
    ps.push_back(steiger_z1(c[0], c[1], c[2], 100).p_two_tailed);
  }
  CHECK(oracle::ks_uniform(ps) < 0.05);
}

TEST_CASE("residual histogram") {
  const std::vector<double> y{1, 2, 3};
  const auto spike = residual_stats(y, y, 5);
  CHECK(spike.mean == 0.0);
  CHECK(spike.sd == 0.0);
  int total = 0;
  for (int c : spike.counts) total += c;
  CHECK(total == 3);

  const auto two = residual_stats(std::vector<double>{0, 0}, std::vector<double>{-1, 1}, 2);
  CHECK(two.counts == std::vector<int>{1, 1});
  CHECK(two.mean == 0.0);
  CHECK(two.sd == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));

  std::mt19937_64 rng(59);
  std::normal_distribution<double> nd;
  std::vector<double> a(101), b(101);
  for (int i = 0; i < 101; ++i) {
    a[i] = nd(rng);
    b[i] = nd(rng);
  }
  for (int bins : {1, 3, 17}) {
    const auto h = residual_stats(a, b, bins);
    int sum = 0;
    for (int c : h.counts) sum += c;
    CHECK(sum == 101);
    CHECK(h.bin_edges.size() == static_cast<size_t>(bins + 1));
  }
}

TEST_CASE("fold aggregation") {
  std::vector<FoldMetrics> f{{0.1, 0.5, 3.0}, {0.2, 0.4, 2.0}, {0.3, 0.6, 1.0}};
  const auto rep = aggregate_folds(f);
  CHECK(rep.r2.mean == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(rep.r2.sd == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(rep.per_fold.size() == 3);
  CHECK_FALSE(rep.single_fold);

  std::vector<FoldMetrics> g{f[2], f[0], f[1]};
  CHECK(to_json(aggregate_folds(g))["r2"] == to_json(rep)["r2"]);
  CHECK(to_json(aggregate_folds(g))["mse"] == to_json(rep)["mse"]);

  const auto one = aggregate_folds(std::vector<FoldMetrics>{{-0.04, 0.1, 5.0}});
  CHECK(one.single_fold);
  CHECK(one.r2.mean == -0.04);
  CHECK(one.r2.sd == 0.0);
  CHECK_THROWS(aggregate_folds(std::vector<FoldMetrics>{}));
}

TEST_CASE("significance grid") {
  CHECK(significance_stars(0.0005) == "***");
  CHECK(significance_stars(0.005) == "**");
  CHECK(significance_stars(0.02) == "*");
  CHECK(significance_stars(0.2) == "");
  auto s = steiger_z1(0.46, 0.33, 0.4, 300);
  s.model_a = "A";
  s.model_b = "B";
  const std::string csv = significance_csv({"A", "B"}, {s});
  CHECK(csv.find("model,A,B\n") == 0);
  CHECK(csv.find("A,-,") != std::string::npos);
  CHECK(csv.find('*') != std::string::npos);
}
