#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <string>

namespace trajgeo {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Top-k invariant subspace, eigenvalues in descending order.
struct Eigenpairs {
  Matrix vectors;  // d x k, orthonormal columns
  Vector values;   // k
  int iterations = 0;
};

enum class EigMethod { Auto, Dense, Randomized };

std::string to_string(EigMethod m);
EigMethod eig_method_from_string(const std::string& s);

/// Symmetric linear map known only through block products V -> M V.
class SymmetricOperator {
 public:
  virtual ~SymmetricOperator() = default;
  virtual int dim() const = 0;
  virtual Matrix apply(const Matrix& block) const = 0;
  /// Bytes of scratch the operator holds while applying a block of `cols` columns.
  virtual std::size_t scratch_bytes(int /*cols*/) const { return 0; }
};

class DenseOperator final : public SymmetricOperator {
 public:
  explicit DenseOperator(const Matrix& m) : m_(m) {}
  int dim() const override { return static_cast<int>(m_.rows()); }
  Matrix apply(const Matrix& block) const override { return m_ * block; }

 private:
  const Matrix& m_;
};

/// Peak bytes of solver-owned buffers; lets tests pin the O(dk) working set.
struct WorkspaceMeter {
  std::size_t peak_bytes = 0;
  void note(std::size_t bytes) {
    if (bytes > peak_bytes) peak_bytes = bytes;
  }
};

struct RandomizedOptions {
  int oversampling = 8;
  int power_iterations = 2;         // minimum number of subspace iterations
  double residual_tol = 1e-11;      // relative Ritz residual that stops further iterations
  int max_iterations = 500;
  std::uint64_t seed = 0;
};

/// Largest-k eigenpairs from a dense symmetric eigendecomposition.
Eigenpairs dense_top_k(const Matrix& m, int k);

/// Randomized range finder followed by shifted subspace iteration and
/// Rayleigh-Ritz. Only block products with the operator are used.
Eigenpairs randomized_top_k(const SymmetricOperator& op, int k, const RandomizedOptions& opts = {},
                            WorkspaceMeter* meter = nullptr);

/// Validating front end: checks 1 <= k <= d and symmetry, dispatches by method
/// (Auto is dense for d <= 512), and applies the sign convention.
Eigenpairs top_k_eigenspace(const Matrix& m, int k, EigMethod method = EigMethod::Auto,
                            std::uint64_t seed = 0);

/// Flips each column so its largest-magnitude entry is positive.
void canonicalize_signs(Matrix& u);

/// Operator norm of sin(Theta) between the column spans of two orthonormal matrices.
double sin_theta(const Matrix& u, const Matrix& v);

bool is_symmetric(const Matrix& m, double tol);

/// max |U^T U - I|.
double orthonormality_error(const Matrix& u);

}  // namespace trajgeo
