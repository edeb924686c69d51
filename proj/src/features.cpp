#include "trajgeo/features.hpp"

#include "trajgeo/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace trajgeo {

double median_of(std::vector<double> values) {
  require(!values.empty(), ErrorCode::InsufficientSamples, "median of an empty set");
  const std::size_t n = values.size();
  std::sort(values.begin(), values.end());
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

RadiusStats radius_stats_of(std::span<const double> radii) {
  require(!radii.empty(), ErrorCode::NoCorrectPrefix, "empty correct set");
  RadiusStats s;
  s.median = median_of({radii.begin(), radii.end()});
  std::vector<double> dev;
  dev.reserve(radii.size());
  for (double r : radii) dev.push_back(std::abs(r - s.median));
  s.mad = median_of(std::move(dev));
  return s;
}

RadiusStats radius_stats(const Matrix& z, const std::vector<bool>& correct_mask) {
  require(static_cast<Eigen::Index>(correct_mask.size()) == z.rows(), ErrorCode::LengthMismatch,
          "mask length does not match step count");
  std::vector<double> radii;
  for (Eigen::Index t = 0; t < z.rows(); ++t)
    if (correct_mask[static_cast<std::size_t>(t)]) radii.push_back(z.row(t).norm());
  return radius_stats_of(radii);
}

std::vector<FeatureBlock> feature_block(const Matrix& z, const RadiusStats& stats, int window, double epsilon) {
  require(window >= 1, ErrorCode::InvalidArgument, "window must be at least 1");
  require(epsilon > 0, ErrorCode::InvalidArgument, "epsilon must be positive");
  const auto m = z.rows();
  const auto k = z.cols();
  std::vector<FeatureBlock> out(static_cast<std::size_t>(m));
  Vector prev = Vector::Zero(k), prev2 = Vector::Zero(k), prev_delta = Vector::Zero(k);
  std::vector<double> energy(static_cast<std::size_t>(m));
  for (Eigen::Index t = 0; t < m; ++t) {
    const Vector cur = z.row(t).transpose();
    const Vector delta = cur - prev;
    const Vector accel = cur - 2.0 * prev + prev2;
    FeatureBlock& f = out[static_cast<std::size_t>(t)];
    f.z = cur;
    f.r = cur.norm();
    f.r_norm = (f.r - stats.median) / (stats.mad + epsilon);
    f.v = delta.norm();
    f.a = accel.norm();
    f.d = delta.dot(prev_delta) / ((f.v + epsilon) * (prev_delta.norm() + epsilon));
    energy[static_cast<std::size_t>(t)] = f.v * f.v + f.a * f.a;
    const Eigen::Index lo = std::max<Eigen::Index>(0, t - window + 1);
    double sum = 0.0;
    for (Eigen::Index j = lo; j <= t; ++j) sum += energy[static_cast<std::size_t>(j)];
    f.e = sum / static_cast<double>(t - lo + 1);
    prev2 = prev;
    prev = cur;
    prev_delta = delta;
  }
  return out;
}

Matrix feature_matrix(std::span<const FeatureBlock> blocks) {
  if (blocks.empty()) return Matrix(0, 0);
  const auto k = blocks.front().z.size();
  Matrix out(static_cast<Eigen::Index>(blocks.size()), k + 6);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const auto row = static_cast<Eigen::Index>(i);
    out.row(row).head(k) = b.z.transpose();
    out(row, k) = b.r;
    out(row, k + 1) = b.r_norm;
    out(row, k + 2) = b.v;
    out(row, k + 3) = b.a;
    out(row, k + 4) = b.e;
    out(row, k + 5) = b.d;
  }
  return out;
}

std::vector<std::string> feature_names(int k) {
  std::vector<std::string> names;
  for (int i = 1; i <= k; ++i) names.push_back("z" + std::to_string(i));
  for (const char* n : {"r", "r_norm", "v", "a", "e", "d"}) names.emplace_back(n);
  return names;
}

void write_feature_dump(const std::filesystem::path& path, int k, std::span<const FeatureDumpRow> rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << "trace_id,step";
  for (const auto& n : feature_names(k)) out << ',' << n;
  out << ",label\n";
  out << std::setprecision(17);
  for (const auto& r : rows) {
    require(r.features.size() == k + 6, ErrorCode::DimensionMismatch, "feature row has wrong width");
    out << r.trace_id << ',' << r.step;
    for (Eigen::Index j = 0; j < r.features.size(); ++j) out << ',' << r.features(j);
    out << ',';
    if (r.label >= 0) out << r.label;
    out << '\n';
  }
}

std::vector<FeatureDumpRow> read_feature_dump(const std::filesystem::path& path, int* k_out) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::MalformedRecord, "empty feature dump");
  const auto columns = static_cast<int>(std::count(line.begin(), line.end(), ',')) + 1;
  const int width = columns - 3;
  require(width >= 7, ErrorCode::MalformedRecord, "feature dump header too short");
  if (k_out) *k_out = width - 6;
  std::vector<FeatureDumpRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    FeatureDumpRow r;
    std::getline(ss, r.trace_id, ',');
    std::getline(ss, cell, ',');
    r.step = std::stoi(cell);
    r.features.resize(width);
    for (int j = 0; j < width; ++j) {
      require(static_cast<bool>(std::getline(ss, cell, ',')), ErrorCode::MalformedRecord, "short feature row");
      r.features(j) = std::stod(cell);
    }
    if (std::getline(ss, cell, ',') && !cell.empty()) r.label = std::stoi(cell);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace trajgeo
