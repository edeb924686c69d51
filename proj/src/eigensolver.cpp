#include "trajgeo/eigensolver.hpp"

#include "trajgeo/error.hpp"
#include "trajgeo/rng.hpp"

#include <algorithm>
#include <cmath>

namespace trajgeo {

std::string to_string(EigMethod m) {
  switch (m) {
    case EigMethod::Auto: return "auto";
    case EigMethod::Dense: return "dense";
    case EigMethod::Randomized: return "randomized";
  }
  return "auto";
}

EigMethod eig_method_from_string(const std::string& s) {
  if (s == "auto") return EigMethod::Auto;
  if (s == "dense") return EigMethod::Dense;
  if (s == "randomized") return EigMethod::Randomized;
  fail(ErrorCode::InvalidArgument, "unknown eigensolver method '" + s + "'");
}

Eigenpairs dense_top_k(const Matrix& m, int k) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m);
  require(es.info() == Eigen::Success, ErrorCode::InvalidArgument, "dense eigendecomposition failed");
  const int d = static_cast<int>(m.rows());
  Eigenpairs out;
  out.vectors.resize(d, k);
  out.values.resize(k);
  for (int j = 0; j < k; ++j) {
    out.vectors.col(j) = es.eigenvectors().col(d - 1 - j);
    out.values(j) = es.eigenvalues()(d - 1 - j);
  }
  return out;
}

namespace {

Matrix orthonormal_basis(const Matrix& y) {
  Eigen::HouseholderQR<Matrix> qr(y);
  return qr.householderQ() * Matrix::Identity(y.rows(), y.cols());
}

}  // namespace

Eigenpairs randomized_top_k(const SymmetricOperator& op, int k, const RandomizedOptions& opts,
                            WorkspaceMeter* meter) {
  const int d = op.dim();
  require(k >= 1 && k <= d, ErrorCode::InvalidRank, "k=" + std::to_string(k) + " outside [1," + std::to_string(d) + "]");
  const int l = std::min(d, k + std::max(0, opts.oversampling));
  Rng rng(opts.seed);

  // Power iteration for the dominant eigenvalue, then for the far end of the
  // spectrum. Shifting by the (padded) magnitude of the most negative
  // eigenvalue makes the algebraically largest ones dominant without the
  // slow convergence a full spectral-radius shift causes when one eigenvalue
  // dwarfs the rest.
  auto power = [&](double offset, Matrix v) {
    v /= v.norm();
    double est = 0.0;
    for (int it = 0; it < 60; ++it) {
      Matrix w = op.apply(v) - offset * v;
      const double n = w.norm();
      if (n == 0.0) return 0.0;
      const double rq = (v.transpose() * w)(0, 0);
      v = w / n;
      if (it > 5 && std::abs(rq - est) <= 1e-4 * std::abs(rq)) return rq + offset;
      est = rq;
    }
    return est + offset;
  };
  const double dominant = power(0.0, rng.gaussian(d, 1));
  const double lowest = dominant > 0 ? power(dominant, rng.gaussian(d, 1)) : dominant;
  const double radius = std::max(std::abs(dominant), std::abs(lowest));
  const double shift = 1.2 * std::max(0.0, -lowest) + 1e-3 * radius;
  const double scale = std::max(radius, 1e-300);

  if (meter) {
    const std::size_t dl = static_cast<std::size_t>(d) * static_cast<std::size_t>(l) * sizeof(double);
    const std::size_t ll = static_cast<std::size_t>(l) * static_cast<std::size_t>(l) * sizeof(double);
    meter->note(4 * dl + 3 * ll + op.scratch_bytes(l));
  }

  Matrix omega = rng.gaussian(d, l);
  Matrix q = orthonormal_basis(op.apply(omega) + shift * omega);

  Eigenpairs out;
  for (int it = 1;; ++it) {
    Matrix mq = op.apply(q);
    Matrix b = q.transpose() * mq;
    b = 0.5 * (b + b.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Matrix> es(b);
    Matrix wk(l, k);
    Vector theta(k);
    for (int j = 0; j < k; ++j) {
      wk.col(j) = es.eigenvectors().col(l - 1 - j);
      theta(j) = es.eigenvalues()(l - 1 - j);
    }
    const Matrix residual = mq * wk - q * wk * theta.asDiagonal();
    const double rel = residual.norm() / scale;
    if ((it >= opts.power_iterations && rel <= opts.residual_tol) || it >= opts.max_iterations || l == d) {
      out.vectors = q * wk;
      out.values = theta;
      out.iterations = it;
      return out;
    }
    q = orthonormal_basis(mq + shift * q);
  }
}

void canonicalize_signs(Matrix& u) {
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    Eigen::Index arg = 0;
    u.col(j).cwiseAbs().maxCoeff(&arg);
    if (u(arg, j) < 0) u.col(j) = -u.col(j);
  }
}

bool is_symmetric(const Matrix& m, double tol) {
  if (m.rows() != m.cols()) return false;
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol;
}

double orthonormality_error(const Matrix& u) {
  return (u.transpose() * u - Matrix::Identity(u.cols(), u.cols())).cwiseAbs().maxCoeff();
}

double sin_theta(const Matrix& u, const Matrix& v) {
  require(u.rows() == v.rows() && u.cols() == v.cols(), ErrorCode::DimensionMismatch, "sin_theta shape mismatch");
  const Matrix perp = v - u * (u.transpose() * v);
  Eigen::JacobiSVD<Matrix> svd(perp);
  return svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
}

Eigenpairs top_k_eigenspace(const Matrix& m, int k, EigMethod method, std::uint64_t seed) {
  require(m.rows() == m.cols(), ErrorCode::NonSymmetric, "matrix is not square");
  const int d = static_cast<int>(m.rows());
  require(k >= 1 && k <= d, ErrorCode::InvalidRank, "k=" + std::to_string(k) + " outside [1," + std::to_string(d) + "]");
  const double tol = 1e-10 * std::max(1.0, m.cwiseAbs().maxCoeff());
  require(is_symmetric(m, tol), ErrorCode::NonSymmetric, "matrix is not symmetric");
  if (method == EigMethod::Auto) method = d <= 512 ? EigMethod::Dense : EigMethod::Randomized;
  Eigenpairs out;
  if (method == EigMethod::Dense) {
    out = dense_top_k(m, k);
  } else {
    RandomizedOptions opts;
    opts.seed = seed;
    out = randomized_top_k(DenseOperator(m), k, opts);
  }
  canonicalize_signs(out.vectors);
  return out;
}

}  // namespace trajgeo
