#include "trajgeo/transport.hpp"

#include "trajgeo/eigensolver.hpp"
#include "trajgeo/error.hpp"
#include "trajgeo/rng.hpp"

#include <cmath>

namespace trajgeo {

Vector augmented_transition(const Matrix& z, int t) {
  const int m = static_cast<int>(z.rows());
  require(t >= 1 && t <= m, ErrorCode::OutOfRange, "step " + std::to_string(t) + " outside [1," + std::to_string(m) + "]");
  const auto k = z.cols();
  const auto row = [&](int s) -> Vector { return s >= 1 ? Vector(z.row(s - 1).transpose()) : Vector::Zero(k); };
  const Vector z0 = row(t), z1 = row(t - 1), z2 = row(t - 2);
  Vector phi(3 * k);
  phi << z0, z0 - z1, z0 - 2.0 * z1 + z2;
  return phi;
}

Matrix augmented_transitions(const Matrix& z) {
  Matrix out(z.rows(), 3 * z.cols());
  for (int t = 1; t <= z.rows(); ++t) out.row(t - 1) = augmented_transition(z, t).transpose();
  return out;
}

TransitionCloud TransitionCloud::from_samples(const Matrix& samples, bool keep_samples) {
  require(samples.rows() >= 1, ErrorCode::InsufficientSamples, "empty transition cloud");
  TransitionCloud c;
  c.mean = samples.colwise().mean().transpose();
  const Matrix centered = samples.rowwise() - c.mean.transpose();
  c.cov = centered.transpose() * centered / static_cast<double>(samples.rows());
  c.cov = 0.5 * (c.cov + c.cov.transpose()).eval();
  if (keep_samples) c.samples = samples;
  return c;
}

GroundCost::GroundCost(Matrix a) : a_(std::move(a)) {
  require(is_symmetric(a_, 1e-10 * std::max(1.0, a_.cwiseAbs().maxCoeff())), ErrorCode::NonSymmetric,
          "ground cost is not symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> es(a_, Eigen::EigenvaluesOnly);
  require(es.eigenvalues().minCoeff() >= -1e-8, ErrorCode::NonPsd, "ground cost is not positive semidefinite");
}

GroundCost GroundCost::identity(int n) { return GroundCost(Matrix::Identity(n, n)); }

GroundCost GroundCost::block_diagonal(int k, double a0, double a1, double a2) {
  Vector diag(3 * k);
  diag << Vector::Constant(k, a0), Vector::Constant(k, a1), Vector::Constant(k, a2);
  return GroundCost(Matrix(diag.asDiagonal()));
}

double transport_score(const Vector& x, const TransitionCloud& cloud, const GroundCost& cost) {
  require(x.size() == cloud.mean.size() && cloud.cov.rows() == x.size() && cost.dim() == x.size(),
          ErrorCode::DimensionMismatch, "transport score dimensions disagree");
  const Vector diff = x - cloud.mean;
  const double quad = diff.dot(cost.matrix() * diff);
  const double spread = (cost.matrix() * cloud.cov).trace();
  return std::max(0.0, quad + spread);
}

double transport_gap_trace(const Matrix& u, const Vector& mu0, const Matrix& c0, const Vector& mu1,
                           const Matrix& c1) {
  require(u.rows() == mu0.size() && mu1.size() == mu0.size() && c0.rows() == mu0.size() && c1.rows() == mu0.size(),
          ErrorCode::DimensionMismatch, "transport gap dimensions disagree");
  require(orthonormality_error(u) <= 1e-8, ErrorCode::InvalidArgument, "U is not orthonormal");
  const Vector delta = mu1 - mu0;
  const Vector ud = u.transpose() * delta;
  return ud.squaredNorm() + (u.transpose() * (c1 - c0) * u).trace();
}

double transport_gap_empirical(const Matrix& u, const Matrix& samples0, const Matrix& samples1) {
  require(samples0.rows() >= 2, ErrorCode::InsufficientSamples, "need at least 2 background samples");
  require(samples1.rows() >= 1, ErrorCode::InsufficientSamples, "need at least 1 target sample");
  require(samples0.cols() == u.rows() && samples1.cols() == u.rows(), ErrorCode::DimensionMismatch,
          "sample width does not match U");
  const Matrix p0 = samples0 * u;
  const Matrix p1 = samples1 * u;
  const Eigen::RowVectorXd mu = p0.colwise().mean();
  // Both expectations share the Tr(U^T C0 U) term of the point-to-cloud
  // closed form, so it cancels in the difference.
  const double far = (p1.rowwise() - mu).rowwise().squaredNorm().mean();
  const double near = (p0.rowwise() - mu).rowwise().squaredNorm().mean();
  return far - near;
}

CpcaOptimalityReport verify_cpca_optimality(const Vector& mu0, const Matrix& c0, const Vector& mu1,
                                            const Matrix& c1, int k, int n_random, std::uint64_t seed,
                                            bool flip_sign) {
  const int d = static_cast<int>(mu0.size());
  require(k >= 1 && k <= d, ErrorCode::InvalidRank, "k outside [1,d]");
  require(n_random >= 1, ErrorCode::InvalidArgument, "n_random must be positive");
  const Vector delta = mu1 - mu0;
  Matrix m = delta * delta.transpose() + c1 - c0;
  m = 0.5 * (m + m.transpose()).eval();
  const Eigenpairs top = top_k_eigenspace(flip_sign ? Matrix(-m) : m, k, EigMethod::Dense);

  CpcaOptimalityReport r;
  r.n_random = n_random;
  r.seed = seed;
  r.gamma_star = transport_gap_trace(top.vectors, mu0, c0, mu1, c1);
  r.top_k_eigen_sum = flip_sign ? dense_top_k(m, k).values.sum() : top.values.sum();
  r.ky_fan_error = std::abs(r.gamma_star - r.top_k_eigen_sum);
  r.worst_slack = std::numeric_limits<double>::infinity();
  Rng rng(seed);
  for (int i = 0; i < n_random; ++i) {
    const Matrix ur = random_orthonormal(rng, d, k);
    const double slack = r.gamma_star - transport_gap_trace(ur, mu0, c0, mu1, c1);
    r.worst_slack = std::min(r.worst_slack, slack);
    if (slack < -1e-10) ++r.violations;
  }
  r.passed = r.violations == 0 && r.ky_fan_error <= 1e-8;
  return r;
}

}  // namespace trajgeo
