#pragma once

#include "trajgeo/trace.hpp"

#include <cstdint>
#include <optional>

namespace trajgeo {

/// [z_t, dz_t, d2z_t] for 1-based step t, with z_0 = z_{-1} = 0.
Vector augmented_transition(const Matrix& z, int t);

/// All augmented transitions of a trajectory, one row per step (m x 3k).
Matrix augmented_transitions(const Matrix& z);

/// Mean and covariance of a cloud of correct transitions. For the quadratic
/// cost these two moments determine every point-to-cloud score.
struct TransitionCloud {
  Vector mean;
  Matrix cov;
  std::optional<Matrix> samples;

  /// Population moments of the rows of `samples`.
  static TransitionCloud from_samples(const Matrix& samples, bool keep_samples = false);
  int dim() const { return static_cast<int>(mean.size()); }
};

/// Positive semidefinite ground cost for (x - y)^T A (x - y).
class GroundCost {
 public:
  /// Throws NonPsd when the smallest eigenvalue is below -1e-8 and
  /// NonSymmetric when A is not symmetric.
  explicit GroundCost(Matrix a);

  static GroundCost identity(int n);
  /// diag(a0 I_k, a1 I_k, a2 I_k) over position, velocity and acceleration blocks.
  static GroundCost block_diagonal(int k, double a0, double a1, double a2);

  const Matrix& matrix() const { return a_; }
  int dim() const { return static_cast<int>(a_.rows()); }

 private:
  Matrix a_;
};

/// (x - mu)^T A (x - mu) + Tr(A C).
double transport_score(const Vector& x, const TransitionCloud& cloud, const GroundCost& cost);

/// Tr(U^T M U) with M = (mu1 - mu0)(mu1 - mu0)^T + C1 - C0.
double transport_gap_trace(const Matrix& u, const Vector& mu0, const Matrix& c0, const Vector& mu1,
                           const Matrix& c1);

/// Plug-in gap against the empirical pushforward of samples0.
double transport_gap_empirical(const Matrix& u, const Matrix& samples0, const Matrix& samples1);

struct CpcaOptimalityReport {
  bool passed = false;
  double gamma_star = 0.0;
  double top_k_eigen_sum = 0.0;
  double ky_fan_error = 0.0;   // |Gamma(U*) - sum of top-k eigenvalues|
  double worst_slack = 0.0;    // min over draws of Gamma(U*) - Gamma(U_r)
  int violations = 0;
  int n_random = 0;
  std::uint64_t seed = 0;
};

/// Brute-force check that the top-k eigenspace of M maximizes the transport
/// gap against Haar-random orthonormal projections. `flip_sign` takes the
/// eigenspace of -M instead, which the check must catch.
CpcaOptimalityReport verify_cpca_optimality(const Vector& mu0, const Matrix& c0, const Vector& mu1,
                                            const Matrix& c1, int k, int n_random, std::uint64_t seed,
                                            bool flip_sign = false);

}  // namespace trajgeo
