#pragma once

#include "trajgeo/eigensolver.hpp"
#include "trajgeo/trace.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace trajgeo {

inline constexpr double kDefaultEpsilon = 1e-6;

/// Per-trace centering and scaling anchored at the correct steps.
struct TraceNormalizer {
  Vector mean;
  double scale = 0.0;
  double epsilon = kDefaultEpsilon;

  Matrix apply(const Matrix& states) const;
};

/// Fits mean and RMS scale over the given rows of `states`.
TraceNormalizer fit_normalizer(const Matrix& states, std::span<const int> rows, double epsilon);

struct NormalizedTrace {
  TraceNormalizer normalizer;
  Matrix states;  // m x d
};

/// Throws NoCorrectPrefix when the trace has no step labeled 0.
NormalizedTrace normalize_trace(const Trace& trace, double epsilon = kDefaultEpsilon);

/// Featurization variant: anchors on every step when the trace has no correct
/// step (or no labels at all). `fell_back` reports whether that happened.
NormalizedTrace normalize_with_fallback(const Trace& trace, double epsilon, bool* fell_back = nullptr);

/// Weighted mean and scatter with order-independent merging.
class MomentAccumulator {
 public:
  explicit MomentAccumulator(int dim = 0);

  void add(const Eigen::Ref<const Eigen::RowVectorXd>& x, double weight = 1.0);
  void merge(const MomentAccumulator& other);

  int dim() const { return static_cast<int>(mean_.size()); }
  double weight() const { return weight_; }
  long long count() const { return count_; }
  const Vector& mean() const { return mean_; }
  /// Population covariance (scatter divided by total weight).
  Matrix covariance() const;

 private:
  double weight_ = 0.0;
  long long count_ = 0;
  Vector mean_;
  Matrix scatter_;
};

struct MomentEstimates {
  Vector mu0;
  Matrix c0;
  Vector mu1;
  Matrix c1;
  double rho = 0.25;
  long long n0 = 0;
  double n1_effective = 0.0;
};

/// A normalized trace with its monotone labels, ready for moment estimation.
struct LabeledStates {
  const Matrix* states = nullptr;
  std::span<const int> labels;
};

/// Correct steps enter the background moments with weight 1; the first error
/// enters the target moments with weight 1 and later steps with weight rho.
MomentEstimates estimate_moments(std::span<const LabeledStates> traces, double rho);

/// (mu1 - mu0)(mu1 - mu0)^T + C1 - alpha C0, symmetrized.
Matrix contrastive_matrix(const MomentEstimates& moments, double alpha);

/// Streams weighted rows of each class without holding the full moment matrix.
/// The callback receives a block of rows, the class (0 background, 1 target)
/// and a per-row weight vector.
class StateStream {
 public:
  using Visitor = std::function<void(const Eigen::Ref<const Matrix>& rows, int cls, const Vector& weights)>;
  virtual ~StateStream() = default;
  virtual int dim() const = 0;
  virtual void for_each(const Visitor& visit) const = 0;
  /// Upper bound on rows delivered per callback.
  virtual int max_block_rows() const = 0;
};

/// Applies the contrastive matrix to a block using only the streamed states and
/// the class means; M is never formed.
class ContrastiveOperator final : public SymmetricOperator {
 public:
  ContrastiveOperator(const StateStream& stream, double alpha);

  int dim() const override { return stream_.dim(); }
  Matrix apply(const Matrix& block) const override;
  std::size_t scratch_bytes(int cols) const override;

  const Vector& mu0() const { return mu0_; }
  const Vector& mu1() const { return mu1_; }
  double weight0() const { return w0_; }
  double weight1() const { return w1_; }

 private:
  const StateStream& stream_;
  double alpha_;
  Vector mu0_, mu1_;
  double w0_ = 0.0, w1_ = 0.0;
};

struct LensOptions {
  int k = 16;
  double alpha = 1.0;
  double rho = 0.25;
  double epsilon = kDefaultEpsilon;
  EigMethod method = EigMethod::Auto;
  std::uint64_t seed = 0;
};

struct LensDiagnostics {
  int traces_used = 0;
  std::vector<std::string> excluded_ids;  // traces without a correct step
  long long n0 = 0;
  double n1_effective = 0.0;
  int solver_iterations = 0;
};

struct ContrastiveLens {
  int dim = 0;
  int k = 0;
  double alpha = 1.0;
  double rho = 0.25;
  double epsilon = kDefaultEpsilon;
  EigMethod method = EigMethod::Auto;
  std::string normalizer_policy = "per-trace-correct-steps";
  Matrix u;           // d x k
  Vector eigenvalues;  // k, descending
  LensDiagnostics diagnostics;
};

/// Normalize each labeled trace, estimate moments, form M and keep its top-k
/// eigenspace. Uses the matrix-free operator when the randomized method is selected.
ContrastiveLens fit_lens(std::span<const Trace> traces, const LensOptions& options);

/// z_t = U^T h~_t for every row.
Matrix project(const ContrastiveLens& lens, const Matrix& normalized_states);

void save_lens(const ContrastiveLens& lens, const std::filesystem::path& path);
ContrastiveLens load_lens(const std::filesystem::path& path);

}  // namespace trajgeo
