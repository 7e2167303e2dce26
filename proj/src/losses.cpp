#include "cdssl/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace cdssl::ssl {

namespace {

constexpr double kNormFloor = 1e-12;

void require_pair(const MatrixXd& a, const MatrixXd& b, Eigen::Index min_rows) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("embedding batches differ in shape");
  if (a.rows() < min_rows)
    throw std::invalid_argument("batch needs at least " + std::to_string(min_rows) + " rows");
  if (a.cols() < 1) throw std::invalid_argument("embeddings need at least one feature");
}

// Row-wise log-softmax.
MatrixXd log_softmax_rows(const MatrixXd& s) {
  MatrixXd out(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    const double lse = m + std::log((s.row(i).array() - m).exp().sum());
    out.row(i) = s.row(i).array() - lse;
  }
  return out;
}

}  // namespace

MatrixXd normalize_rows(const MatrixXd& z) {
  MatrixXd u = z;
  for (Eigen::Index i = 0; i < z.rows(); ++i) u.row(i) /= std::max(z.row(i).norm(), kNormFloor);
  return u;
}

MatrixXd normalize_rows_backward(const MatrixXd& z, const MatrixXd& g) {
  MatrixXd dz(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double n = std::max(z.row(i).norm(), kNormFloor);
    const Eigen::RowVectorXd u = z.row(i) / n;
    dz.row(i) = (g.row(i) - u * g.row(i).dot(u)) / n;
  }
  return dz;
}

LossResult nt_xent_loss(const MatrixXd& z_a, const MatrixXd& z_b, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  require_pair(z_a, z_b, 1);
  const Eigen::Index n = z_a.rows(), two_n = 2 * n;

  MatrixXd z(two_n, z_a.cols());
  z << z_a, z_b;
  const MatrixXd u = normalize_rows(z);
  MatrixXd s = u * u.transpose() / temperature;
  s.diagonal().setConstant(-std::numeric_limits<double>::infinity());

  auto positive = [n](Eigen::Index i) { return i < n ? i + n : i - n; };
  double total = 0.0;
  MatrixXd g = MatrixXd::Zero(two_n, two_n);  // dL/ds
  for (Eigen::Index i = 0; i < two_n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < two_n; ++j)
      if (j != i) m = std::max(m, s(i, j));
    double denom = 0.0;
    for (Eigen::Index j = 0; j < two_n; ++j)
      if (j != i) denom += std::exp(s(i, j) - m);
    const double lse = m + std::log(denom);
    total += lse - s(i, positive(i));
    for (Eigen::Index j = 0; j < two_n; ++j)
      if (j != i) g(i, j) = std::exp(s(i, j) - lse);
    g(i, positive(i)) -= 1.0;
  }
  g /= static_cast<double>(two_n);

  const MatrixXd du = (g + g.transpose()) * u / temperature;
  const MatrixXd dz = normalize_rows_backward(z, du);
  LossResult r;
  r.value = total / static_cast<double>(two_n);
  r.grad_a = dz.topRows(n);
  r.grad_b = dz.bottomRows(n);
  return r;
}

MatrixXd standardize_columns(const MatrixXd& z, double eps) {
  const Eigen::RowVectorXd mu = z.colwise().mean();
  const MatrixXd centered = z.rowwise() - mu;
  const Eigen::RowVectorXd var = centered.cwiseAbs2().colwise().mean();
  const Eigen::RowVectorXd inv = (var.array() + eps).rsqrt();
  return centered.array().rowwise() * inv.array();
}

LossResult barlow_twins_loss(const MatrixXd& z_a, const MatrixXd& z_b, double lambda, double eps) {
  require_pair(z_a, z_b, 2);
  const double n = static_cast<double>(z_a.rows());
  const Eigen::Index d = z_a.cols();

  auto standardize = [eps](const MatrixXd& z, Eigen::RowVectorXd& inv_sd) {
    const Eigen::RowVectorXd mu = z.colwise().mean();
    const MatrixXd centered = z.rowwise() - mu;
    const Eigen::RowVectorXd var = centered.cwiseAbs2().colwise().mean();
    inv_sd = (var.array() + eps).rsqrt();
    return MatrixXd(centered.array().rowwise() * inv_sd.array());
  };
  Eigen::RowVectorXd inv_a, inv_b;
  const MatrixXd ha = standardize(z_a, inv_a);
  const MatrixXd hb = standardize(z_b, inv_b);
  const MatrixXd c = ha.transpose() * hb / n;

  double on = 0.0, off = 0.0;
  MatrixXd g(d, d);  // dL/dC
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      if (i == j) {
        on += (1.0 - c(i, i)) * (1.0 - c(i, i));
        g(i, j) = -2.0 * (1.0 - c(i, i));
      } else {
        off += c(i, j) * c(i, j);
        g(i, j) = 2.0 * lambda * c(i, j);
      }
    }
  }

  // Backward through standardization:
  // dx = inv_sd * (dh - mean(dh) - h * mean(dh * h)) per column.
  auto standardize_backward = [](const MatrixXd& h, const Eigen::RowVectorXd& inv_sd, const MatrixXd& dh) {
    const Eigen::RowVectorXd mean_dh = dh.colwise().mean();
    const Eigen::RowVectorXd mean_dh_h = dh.cwiseProduct(h).colwise().mean();
    MatrixXd dx = dh.rowwise() - mean_dh;
    dx -= MatrixXd(h.array().rowwise() * mean_dh_h.array());
    return MatrixXd(dx.array().rowwise() * inv_sd.array());
  };

  LossResult r;
  r.value = on + lambda * off;
  r.grad_a = standardize_backward(ha, inv_a, hb * g.transpose() / n);
  r.grad_b = standardize_backward(hb, inv_b, ha * g / n);
  return r;
}

MatrixXd sinkhorn_normalize(const MatrixXd& scores, double eps, int iters) {
  if (!(eps > 0.0)) throw std::invalid_argument("sinkhorn epsilon must be positive");
  if (iters < 1) throw std::invalid_argument("sinkhorn needs at least one iteration");
  if (scores.size() == 0) throw std::invalid_argument("sinkhorn on empty scores");
  if (!scores.allFinite()) throw std::invalid_argument("sinkhorn scores must be finite");
  const double n = static_cast<double>(scores.rows());
  const double k = static_cast<double>(scores.cols());

  MatrixXd q = scores;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const double m = q.row(i).maxCoeff();
    q.row(i) = ((q.row(i).array() - m) / eps).exp();
  }
  auto normalize_rows_to = [&](double target) {
    const Eigen::VectorXd sums = q.rowwise().sum();
    for (Eigen::Index i = 0; i < q.rows(); ++i) q.row(i) *= target / sums[i];
  };
  for (int it = 0; it < iters; ++it) {
    normalize_rows_to(1.0 / n);
    const Eigen::RowVectorXd col = q.colwise().sum();
    for (Eigen::Index j = 0; j < q.cols(); ++j) q.col(j) *= (1.0 / k) / col[j];
  }
  normalize_rows_to(1.0 / n);
  return q;
}

LossResult swav_loss(const MatrixXd& z_a, const MatrixXd& z_b, const MatrixXd& prototypes, const SwavParams& p) {
  require_pair(z_a, z_b, 2);
  if (prototypes.rows() < 2) throw std::invalid_argument("SwAV needs at least 2 prototypes");
  if (prototypes.cols() != z_a.cols()) throw std::invalid_argument("prototype dimension does not match embeddings");
  if (!(p.temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  const double n = static_cast<double>(z_a.rows());

  const MatrixXd ua = normalize_rows(z_a), ub = normalize_rows(z_b);
  const MatrixXd sa = ua * prototypes.transpose(), sb = ub * prototypes.transpose();
  const MatrixXd qa = n * sinkhorn_normalize(sa, p.epsilon, p.sinkhorn_iters);
  const MatrixXd qb = n * sinkhorn_normalize(sb, p.epsilon, p.sinkhorn_iters);
  const MatrixXd log_pa = log_softmax_rows(sa / p.temperature);
  const MatrixXd log_pb = log_softmax_rows(sb / p.temperature);

  LossResult r;
  r.value = 0.5 * (-(qa.cwiseProduct(log_pb)).sum() / n - (qb.cwiseProduct(log_pa)).sum() / n);

  // Codes rows sum to one, so d/ds of -q . log softmax(s / t) is (softmax - q) / t.
  const MatrixXd dsb = 0.5 / n * (log_pb.array().exp().matrix() - qa) / p.temperature;
  const MatrixXd dsa = 0.5 / n * (log_pa.array().exp().matrix() - qb) / p.temperature;
  r.grad_a = normalize_rows_backward(z_a, dsa * prototypes);
  r.grad_b = normalize_rows_backward(z_b, dsb * prototypes);
  r.grad_prototypes = dsa.transpose() * ua + dsb.transpose() * ub;
  return r;
}

}  // namespace cdssl::ssl
