#pragma once

#include "trajgeo/trace.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace trajgeo {

/// Median and unscaled median absolute deviation of correct-step radii.
struct RadiusStats {
  double median = 0.0;
  double mad = 0.0;
};

double median_of(std::vector<double> values);

RadiusStats radius_stats_of(std::span<const double> radii);

/// Stats over ||z_u|| for the rows flagged in `correct_mask`.
RadiusStats radius_stats(const Matrix& z, const std::vector<bool>& correct_mask);

struct FeatureBlock {
  Vector z;
  double r = 0.0;       // ||z_t||
  double r_norm = 0.0;  // (r_t - median) / (MAD + eps)
  double v = 0.0;       // ||dz_t||
  double a = 0.0;       // ||d2z_t||
  double e = 0.0;       // trailing-window mean of v^2 + a^2
  double d = 0.0;       // cosine of consecutive increments

  static int width(int k) { return k + 6; }
};

/// Per-step geometric features of a projected trajectory. The energy window is
/// clipped at the trace start and averages only the in-range terms.
std::vector<FeatureBlock> feature_block(const Matrix& z, const RadiusStats& stats, int window, double epsilon);

/// Rows laid out as [z (k), r, r_norm, v, a, e, d].
Matrix feature_matrix(std::span<const FeatureBlock> blocks);

std::vector<std::string> feature_names(int k);

struct FeatureDumpRow {
  std::string trace_id;
  int step = 0;  // 1-based
  Eigen::RowVectorXd features;
  int label = -1;  // -1 when unlabeled
};

void write_feature_dump(const std::filesystem::path& path, int k, std::span<const FeatureDumpRow> rows);
std::vector<FeatureDumpRow> read_feature_dump(const std::filesystem::path& path, int* k = nullptr);

}  // namespace trajgeo
