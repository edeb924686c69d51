#pragma once

#include "trajgeo/error.hpp"
#include "trajgeo/nets.hpp"

#include <json.hpp>

#include <fstream>

namespace trajgeo::detail {

using nlohmann::json;

inline json matrix_json(const Matrix& m) {
  json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  j["data"] = std::move(data);
  return j;
}

inline Matrix matrix_from_json(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  require(data.is_array() && static_cast<Eigen::Index>(data.size()) == rows * cols, ErrorCode::MalformedRecord,
          "tensor data length does not match its shape");
  Matrix m(rows, cols);
  std::size_t i = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[i++].get<double>();
  return m;
}

inline json standardizer_json(const Standardizer& s) {
  return json{{"mean", matrix_json(s.mean)}, {"scale", matrix_json(s.scale)}};
}

inline Standardizer standardizer_from_json(const json& j) {
  Standardizer s;
  s.mean = matrix_from_json(j.at("mean"));
  s.scale = matrix_from_json(j.at("scale"));
  return s;
}

inline json params_json(const ParamSet& params, bool (*keep)(const std::string&)) {
  json arr = json::array();
  for (const auto& p : params) {
    if (keep && !keep(p.name)) continue;
    json t = matrix_json(p.value);
    t["name"] = p.name;
    arr.push_back(std::move(t));
  }
  return arr;
}

/// Copies stored tensors into an already shaped parameter set.
inline void load_params(ParamSet& params, const json& arr) {
  std::size_t seen = 0;
  for (const auto& t : arr) {
    Param& p = params.get(t.at("name").get<std::string>());
    Matrix v = matrix_from_json(t);
    require(v.rows() == p.value.rows() && v.cols() == p.value.cols(), ErrorCode::MalformedRecord,
            "tensor '" + p.name + "' has the wrong shape");
    p.value = std::move(v);
    ++seen;
  }
  require(seen == params.size(), ErrorCode::MalformedRecord, "model file is missing tensors");
}

inline void write_json(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << j.dump() << '\n';
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::MalformedRecord, path.string() + ": " + e.what());
  }
}

}  // namespace trajgeo::detail
