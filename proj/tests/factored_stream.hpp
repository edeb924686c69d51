#pragma once

#include "trajgeo/lens.hpp"
#include "trajgeo/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace testutil {

using trajgeo::Matrix;
using trajgeo::Vector;

/// Rows regenerated from a seed on every pass, so the data matrix never exists.
/// Background rows are isotropic noise plus a weak planted component; target
/// rows add a shift along k planted directions.
class SyntheticStream final : public trajgeo::StateStream {
 public:
  SyntheticStream(int d, int k, int n0, int n1, int block) : d_(d), k_(k), n0_(n0), n1_(n1), block_(block) {
    trajgeo::Rng rng(99);
    planted_ = trajgeo::random_orthonormal(rng, d, k);
  }
  int dim() const override { return d_; }
  int max_block_rows() const override { return block_; }
  const Matrix& planted() const { return planted_; }

  void for_each(const Visitor& visit) const override {
    int b = 0;
    for (int cls : {0, 1}) {
      const int total = cls == 0 ? n0_ : n1_;
      for (int start = 0; start < total; start += block_, ++b) {
        const int rows = std::min(block_, total - start);
        const std::uint64_t bseed = trajgeo::derive_seed(1234, static_cast<std::uint64_t>(b));
        Matrix x(rows, d_);
        // uniform noise with sd 0.05 from a counter-based hash; far cheaper than normal draws
        for (Eigen::Index j = 0; j < x.cols(); ++j)
          for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const std::uint64_t h = trajgeo::derive_seed(bseed, static_cast<std::uint64_t>(j * rows + i));
            x(i, j) = 0.05 * std::sqrt(3.0) * (2.0 * static_cast<double>(h >> 11) * 0x1.0p-53 - 1.0);
          }
        trajgeo::Rng rng(bseed);
        if (cls == 1) {
          Matrix coef = rng.gaussian(rows, k_);
          for (int j = 0; j < k_; ++j) coef.col(j).array() = coef.col(j).array() * 0.5 + (4.0 - j);
          x.noalias() += coef * planted_.transpose();
        }
        visit(x, cls, Vector::Ones(rows));
      }
    }
  }

 private:
  int d_, k_, n0_, n1_, block_;
  Matrix planted_;
};

}  // namespace testutil
