#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "cdssl/losses.hpp"
#include "cdssl/regress.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cdssl::ssl;
using Eigen::MatrixXd;

namespace {

MatrixXd unit_prototypes(std::mt19937_64& rng, int k, int d) { return normalize_rows(testutil::random_matrix(rng, k, d)); }

}  // namespace

TEST_CASE("nt-xent worked values") {
  MatrixXd e(2, 2);
  e << 1, 0, 0, 1;
  CHECK(nt_xent_loss(e, e, 1.0).value == doctest::Approx(std::log((std::numbers::e + 2) / std::numbers::e)).epsilon(1e-12));

  MatrixXd same = MatrixXd::Constant(2, 3, 0.7);
  CHECK(nt_xent_loss(same, same, 1.0).value == doctest::Approx(std::log(3.0)).epsilon(1e-12));

  std::mt19937_64 rng(3);
  const MatrixXd a = testutil::random_matrix(rng, 1, 5), b = testutil::random_matrix(rng, 1, 5);
  CHECK(nt_xent_loss(a, b, 0.5).value == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("nt-xent matches brute force on small random batches") {
  std::mt19937_64 rng(11);
  for (int n = 1; n <= 4; ++n)
    for (int d = 1; d <= 8; ++d)
      for (double tau : {0.1, 0.5, 1.0}) {
        const MatrixXd a = testutil::random_matrix(rng, n, d), b = testutil::random_matrix(rng, n, d);
        CHECK(std::abs(nt_xent_loss(a, b, tau).value - oracle::nt_xent(oracle::to_mat(a), oracle::to_mat(b), tau)) < 1e-6);
      }
}

TEST_CASE("nt-xent is invariant to a common row permutation") {
  std::mt19937_64 rng(5);
  const MatrixXd a = testutil::random_matrix(rng, 6, 4), b = testutil::random_matrix(rng, 6, 4);
  Eigen::PermutationMatrix<Eigen::Dynamic> p(6);
  p.setIdentity();
  std::shuffle(p.indices().data(), p.indices().data() + 6, rng);
  CHECK(nt_xent_loss(p * a, p * b, 0.5).value == doctest::Approx(nt_xent_loss(a, b, 0.5).value).epsilon(1e-12));
}

TEST_CASE("nt-xent rejects bad input") {
  MatrixXd a = MatrixXd::Ones(2, 3);
  CHECK_THROWS(nt_xent_loss(a, a, 0.0));
  CHECK_THROWS(nt_xent_loss(a, MatrixXd::Ones(3, 3), 0.5));
}

TEST_CASE("barlow twins worked values") {
  std::mt19937_64 rng(7);
  const int d = 5;
  // Large per-feature variance so the epsilon inside the square root is negligible.
  const MatrixXd z = testutil::random_matrix(rng, 16, d, 100.0);

  const MatrixXd h = standardize_columns(z);
  const MatrixXd c = h.transpose() * h / 16.0;
  for (int i = 0; i < d; ++i) CHECK(std::abs(c(i, i) - 1.0) < 1e-6);
  double off = 0.0;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (i != j) off += c(i, j) * c(i, j);
  CHECK(barlow_twins_loss(z, z, 5e-3).value == doctest::Approx(5e-3 * off).epsilon(1e-6));

  // z_b = -z_a: C_ii = -1, each diagonal term (1 - (-1))^2 = 4.
  CHECK(std::abs(barlow_twins_loss(z, -z, 0.0).value - 4.0 * d) < 1e-6);

  // Uncorrelated standardized features with lambda = 0 give exactly d.
  MatrixXd a(4, 2), b(4, 2);
  a << 1, 1, 1, -1, -1, 1, -1, -1;
  b << 1, 1, -1, -1, 1, -1, -1, 1;
  CHECK(barlow_twins_loss(a, b, 0.0).value == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("barlow twins matches direct matrix arithmetic") {
  std::mt19937_64 rng(13);
  for (int n = 2; n <= 4; ++n)
    for (int d = 1; d <= 8; ++d)
      for (double lambda : {0.0, 5e-3, 0.5}) {
        const MatrixXd a = testutil::random_matrix(rng, n, d), b = testutil::random_matrix(rng, n, d);
        CHECK(std::abs(barlow_twins_loss(a, b, lambda).value -
                       oracle::barlow_twins(oracle::to_mat(a), oracle::to_mat(b), lambda)) < 1e-6);
      }
}

TEST_CASE("barlow twins is invariant to per-feature positive affine maps") {
  std::mt19937_64 rng(17);
  const MatrixXd a = testutil::random_matrix(rng, 12, 6, 50.0), b = testutil::random_matrix(rng, 12, 6, 50.0);
  std::uniform_real_distribution<double> scale(0.5, 3.0), shift(-20.0, 20.0);
  MatrixXd a2 = a, b2 = b;
  for (int j = 0; j < 6; ++j) {
    a2.col(j) = a.col(j) * scale(rng) + Eigen::VectorXd::Constant(12, shift(rng));
    b2.col(j) = b.col(j) * scale(rng) + Eigen::VectorXd::Constant(12, shift(rng));
  }
  CHECK(std::abs(barlow_twins_loss(a, b, 5e-3).value - barlow_twins_loss(a2, b2, 5e-3).value) < 1e-6);
}

TEST_CASE("sinkhorn worked cases and marginals") {
  const MatrixXd flat = MatrixXd::Constant(3, 4, 0.25);
  const MatrixXd q = sinkhorn_normalize(flat, 0.05, 3);
  CHECK((q.array() - 1.0 / 12.0).abs().maxCoeff() < 1e-15);

  MatrixXd eye(2, 2);
  eye << 1, 0, 0, 1;
  const MatrixXd q2 = sinkhorn_normalize(eye, 1.0, 50);
  CHECK(q2(0, 0) == doctest::Approx(q2(1, 1)).epsilon(1e-12));
  CHECK(q2(0, 1) == doctest::Approx(q2(1, 0)).epsilon(1e-12));
  CHECK(q2(0, 0) > q2(0, 1));

  std::mt19937_64 rng(19);
  for (int t = 0; t < 20; ++t) {
    // cosine scores, as produced by unit embeddings against unit prototypes
    const MatrixXd s = normalize_rows(testutil::random_matrix(rng, 8, 16)) * unit_prototypes(rng, 4, 16).transpose();
    const MatrixXd qs = sinkhorn_normalize(s, 0.5, 50);
    CHECK((qs.array() > 0.0).all());
    CHECK((qs.rowwise().sum().array() - 1.0 / 8).abs().maxCoeff() < 1e-6);
    CHECK((qs.colwise().sum().array() - 1.0 / 4).abs().maxCoeff() < 1e-6);
    const auto ref = oracle::sinkhorn(oracle::to_mat(s), 0.5, 50);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 4; ++j) CHECK(std::abs(qs(i, j) - ref[i][j]) < 1e-12);
  }
  CHECK_THROWS(sinkhorn_normalize(eye, 0.0, 3));
  CHECK_THROWS(sinkhorn_normalize(eye, 1.0, 0));
}

TEST_CASE("swav matches the step-by-step oracle") {
  // Hand-set N=2, K=2 case.
  MatrixXd a(2, 2), b(2, 2), c(2, 2);
  a << 1, 0.2, -0.3, 1;
  b << 0.8, 0.1, 0.1, 0.9;
  c << 1, 0, 0, 1;
  const SwavParams p{0.1, 0.05, 3};
  const auto steps = oracle::swav(oracle::to_mat(a), oracle::to_mat(b), oracle::to_mat(c), 0.1, 0.05, 3);
  CHECK(std::abs(swav_loss(a, b, c, p).value - steps.loss) < 1e-6);

  std::mt19937_64 rng(23);
  for (int n = 2; n <= 4; ++n)
    for (int d = 2; d <= 8; d += 2)
      for (int k : {2, 3, 5}) {
        const MatrixXd za = testutil::random_matrix(rng, n, d), zb = testutil::random_matrix(rng, n, d);
        const MatrixXd protos = unit_prototypes(rng, k, d);
        const SwavParams q{0.1, 0.05, 3};
        const double ref = oracle::swav(oracle::to_mat(za), oracle::to_mat(zb), oracle::to_mat(protos), 0.1, 0.05, 3).loss;
        CHECK(std::abs(swav_loss(za, zb, protos, q).value - ref) < 1e-6);
      }
}

TEST_CASE("swav symmetric views give equal swapped terms") {
  std::mt19937_64 rng(29);
  const MatrixXd z = testutil::random_matrix(rng, 4, 6), protos = unit_prototypes(rng, 3, 6);
  const auto s = oracle::swav(oracle::to_mat(z), oracle::to_mat(z), oracle::to_mat(protos), 0.1, 0.05, 3);
  CHECK(s.term_ab == doctest::Approx(s.term_ba).epsilon(1e-12));
  CHECK(swav_loss(z, z, protos, {}).value == doctest::Approx(s.term_ab).epsilon(1e-9));
}

TEST_CASE("swav temperature only affects the softmax") {
  std::mt19937_64 rng(31);
  const MatrixXd za = testutil::random_matrix(rng, 4, 6), zb = testutil::random_matrix(rng, 4, 6);
  const MatrixXd protos = unit_prototypes(rng, 5, 6);
  const auto s1 = oracle::swav(oracle::to_mat(za), oracle::to_mat(zb), oracle::to_mat(protos), 0.1, 0.05, 3);
  const auto s2 = oracle::swav(oracle::to_mat(za), oracle::to_mat(zb), oracle::to_mat(protos), 0.2, 0.05, 3);
  CHECK(s1.codes_a == s2.codes_a);
  CHECK(s1.codes_b == s2.codes_b);
  CHECK(s1.prob_a != s2.prob_a);
  CHECK(std::abs(swav_loss(za, zb, protos, {0.2, 0.05, 3}).value - s2.loss) < 1e-9);
}

TEST_CASE("loss gradients match central finite differences") {
  std::mt19937_64 rng(37);
  const double h = 1e-4;
  for (int trial = 0; trial < 20; ++trial) {
    const MatrixXd a = testutil::random_matrix(rng, 4, 8), b = testutil::random_matrix(rng, 4, 8);

    const auto nt = nt_xent_loss(a, b, 0.5);
    CHECK(oracle::relative_error(nt.grad_a, oracle::fd_gradient([&](const MatrixXd& x) { return nt_xent_loss(x, b, 0.5).value; }, a, h)) < 1e-4);
    CHECK(oracle::relative_error(nt.grad_b, oracle::fd_gradient([&](const MatrixXd& x) { return nt_xent_loss(a, x, 0.5).value; }, b, h)) < 1e-4);

    const auto bt = barlow_twins_loss(a, b, 5e-3);
    CHECK(oracle::relative_error(bt.grad_a, oracle::fd_gradient([&](const MatrixXd& x) { return barlow_twins_loss(x, b, 5e-3).value; }, a, h)) < 1e-4);
    CHECK(oracle::relative_error(bt.grad_b, oracle::fd_gradient([&](const MatrixXd& x) { return barlow_twins_loss(a, x, 5e-3).value; }, b, h)) < 1e-4);

    // SwAV codes are constants of the objective (stop-gradient), so the
    // finite differences hold them fixed at the evaluation point.
    const MatrixXd protos = unit_prototypes(rng, 5, 8);
    const SwavParams p{0.1, 0.05, 3};
    const auto sw = swav_loss(a, b, protos, p);
    const auto steps = oracle::swav(oracle::to_mat(a), oracle::to_mat(b), oracle::to_mat(protos), p.temperature, p.epsilon, p.sinkhorn_iters);
    auto fixed = [&](const MatrixXd& x, const MatrixXd& y, const MatrixXd& c) {
      return oracle::swav_fixed_codes(oracle::to_mat(x), oracle::to_mat(y), oracle::to_mat(c), steps.codes_a, steps.codes_b, p.temperature);
    };
    CHECK(oracle::relative_error(sw.grad_a, oracle::fd_gradient([&](const MatrixXd& x) { return fixed(x, b, protos); }, a, h)) < 1e-4);
    CHECK(oracle::relative_error(sw.grad_b, oracle::fd_gradient([&](const MatrixXd& x) { return fixed(a, x, protos); }, b, h)) < 1e-4);
    CHECK(oracle::relative_error(sw.grad_prototypes, oracle::fd_gradient([&](const MatrixXd& x) { return fixed(a, b, x); }, protos, h)) < 1e-4);

    const Eigen::VectorXd pred = testutil::random_matrix(rng, 6, 1), target = testutil::random_matrix(rng, 6, 1);
    Eigen::VectorXd g;
    cdssl::regress::mse_loss(pred, target, &g);
    const MatrixXd num = oracle::fd_gradient([&](const MatrixXd& x) { return cdssl::regress::mse_loss(x, target); }, pred, h);
    CHECK(oracle::relative_error(g, num) < 1e-4);
  }
}
