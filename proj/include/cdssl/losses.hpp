#pragma once

#include <Eigen/Dense>

namespace cdssl::ssl {

using Eigen::MatrixXd;

/// Loss value with gradients w.r.t. both branches (and prototypes for SwAV).
struct LossResult {
  double value = 0.0;
  MatrixXd grad_a;
  MatrixXd grad_b;
  MatrixXd grad_prototypes;
};

/// NT-Xent over 2N anchors; rows are L2-normalized internally, positives are
/// the paired rows, self-similarity is excluded from the denominator.
LossResult nt_xent_loss(const MatrixXd& z_a, const MatrixXd& z_b, double temperature);

/// Barlow Twins: per-column batch standardization (x - mu) / sqrt(var + eps),
/// C = z_a^T z_b / N, loss = sum (1 - C_ii)^2 + lambda sum_{i != j} C_ij^2.
LossResult barlow_twins_loss(const MatrixXd& z_a, const MatrixXd& z_b, double lambda, double eps = 1e-5);

/// Batch standardization used by barlow_twins_loss.
MatrixXd standardize_columns(const MatrixXd& z, double eps = 1e-5);

/// Sinkhorn-Knopp on exp(scores / eps) (row max subtracted first). Each
/// iteration normalizes rows to 1/N then columns to 1/K; a final row
/// normalization makes row sums exactly 1/N.
MatrixXd sinkhorn_normalize(const MatrixXd& scores, double eps, int iters);

struct SwavParams {
  double temperature = 0.1;
  double epsilon = 0.05;
  int sinkhorn_iters = 3;
};

/// Swapped-prediction loss. Rows of z_a/z_b are L2-normalized; prototypes
/// are expected unit-norm. Codes come from Sinkhorn on the unscaled scores
/// and are treated as constants.
LossResult swav_loss(const MatrixXd& z_a, const MatrixXd& z_b, const MatrixXd& prototypes, const SwavParams& p);

/// Row-wise L2 normalization and its backward pass.
MatrixXd normalize_rows(const MatrixXd& z);
MatrixXd normalize_rows_backward(const MatrixXd& z, const MatrixXd& grad_normalized);

}  // namespace cdssl::ssl
