#include "trajgeo/trace.hpp"

#include "trajgeo/error.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace trajgeo {

using nlohmann::json;

FirstError Trace::first_error() const {
  if (!labels) return FirstError::none();
  return first_error_index(*labels);
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "test";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  fail(ErrorCode::MalformedRecord, "unknown split tag '" + s + "'");
}

void TraceSet::add(Trace trace, Split split) {
  require(trace.steps() >= 1, ErrorCode::MissingStates, "trace '" + trace.id + "' has no steps");
  require(trace.dim() >= 1, ErrorCode::MissingStates, "trace '" + trace.id + "' has zero-width states");
  if (traces_.empty()) {
    dim_ = trace.dim();
  } else {
    require(trace.dim() == dim_, ErrorCode::DimensionMismatch,
            "trace '" + trace.id + "' has d=" + std::to_string(trace.dim()) + ", set has d=" +
                std::to_string(dim_));
  }
  require(!index_.contains(trace.id), ErrorCode::DuplicateId, "duplicate trace id '" + trace.id + "'");
  index_.emplace(trace.id, traces_.size());
  traces_.push_back(std::move(trace));
  splits_.push_back(split);
}

std::vector<Trace> TraceSet::select(Split split) const {
  std::vector<Trace> out;
  for (std::size_t i = 0; i < traces_.size(); ++i)
    if (splits_[i] == split) out.push_back(traces_[i]);
  return out;
}

FirstError first_error_index(std::span<const int> labels) {
  require(!labels.empty(), ErrorCode::InvalidLabel, "empty label sequence");
  std::optional<int> first;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] == 0 || labels[i] == 1, ErrorCode::InvalidLabel,
            "label " + std::to_string(labels[i]) + " at step " + std::to_string(i + 1));
    if (labels[i] == 1 && !first) first = static_cast<int>(i) + 1;
  }
  return first ? FirstError::at(*first) : FirstError::none();
}

std::vector<int> propagate_labels(std::span<const int> labels) {
  const FirstError fe = first_error_index(labels);
  std::vector<int> out(labels.size(), 0);
  if (!fe.is_none())
    for (std::size_t i = static_cast<std::size_t>(fe.index() - 1); i < out.size(); ++i) out[i] = 1;
  return out;
}

Matrix pool_steps(const Matrix& token_states, const std::vector<std::vector<int>>& step_index_sets) {
  const auto n_tokens = token_states.rows();
  Matrix out(static_cast<Eigen::Index>(step_index_sets.size()), token_states.cols());
  std::set<int> seen;
  int prev_max = -1;
  for (std::size_t t = 0; t < step_index_sets.size(); ++t) {
    const auto& idx = step_index_sets[t];
    require(!idx.empty(), ErrorCode::DegenerateStep, "step " + std::to_string(t + 1) + " has no tokens");
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(token_states.cols());
    int lo = idx.front();
    for (int j : idx) {
      require(j >= 0 && j < n_tokens, ErrorCode::OutOfRange,
              "token index " + std::to_string(j) + " outside [0," + std::to_string(n_tokens) + ")");
      require(seen.insert(j).second, ErrorCode::DegenerateStep,
              "token " + std::to_string(j) + " assigned to more than one step");
      lo = std::min(lo, j);
      acc += token_states.row(j);
    }
    require(lo > prev_max, ErrorCode::DegenerateStep, "step index sets are not ordered");
    for (int j : idx) prev_max = std::max(prev_max, j);
    out.row(static_cast<Eigen::Index>(t)) = acc / static_cast<double>(idx.size());
  }
  return out;
}

namespace {

Trace parse_record(const json& rec, const std::string& where, LoadReport* report, bool ignore_labels) {
  if (!rec.is_object()) fail(ErrorCode::MalformedRecord, where + ": record is not an object");
  Trace t;
  if (!rec.contains("id") || !rec["id"].is_string())
    fail(ErrorCode::MalformedRecord, where + ": missing string field 'id'");
  t.id = rec["id"].get<std::string>();
  if (!rec.contains("states") || !rec["states"].is_array() || rec["states"].empty())
    fail(ErrorCode::MissingStates, where + ": trace '" + t.id + "' has no states");

  const auto& rows = rec["states"];
  const std::size_t m = rows.size();
  std::size_t d = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!rows[i].is_array() || rows[i].empty())
      fail(ErrorCode::MalformedRecord, where + ": state row " + std::to_string(i + 1) + " is not a nonempty array");
    if (i == 0) {
      d = rows[i].size();
      t.states.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));
    } else if (rows[i].size() != d) {
      fail(ErrorCode::DimensionMismatch, where + ": ragged state rows in trace '" + t.id + "'");
    }
    for (std::size_t j = 0; j < d; ++j) {
      const auto& v = rows[i][j];
      if (!v.is_number()) fail(ErrorCode::MalformedRecord, where + ": non-numeric state entry");
      t.states(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v.get<double>();
    }
  }

  if (!ignore_labels && rec.contains("labels") && !rec["labels"].is_null()) {
    const auto& lab = rec["labels"];
    if (!lab.is_array() || lab.size() != m)
      fail(ErrorCode::MalformedRecord, where + ": labels must be an array of length " + std::to_string(m));
    std::vector<int> raw;
    raw.reserve(m);
    for (const auto& v : lab) {
      if (!v.is_number_integer()) fail(ErrorCode::InvalidLabel, where + ": non-integer label");
      raw.push_back(v.get<int>());
    }
    auto mono = propagate_labels(raw);
    if (mono != raw && report) {
      ++report->propagated;
      report->warnings.push_back(where + ": labels of '" + t.id + "' rewritten into monotone form");
    }
    t.labels = std::move(mono);
  }

  if (rec.contains("meta") && !rec["meta"].is_null()) {
    if (!rec["meta"].is_object()) fail(ErrorCode::MalformedRecord, where + ": meta must be an object");
    for (const auto& [k, v] : rec["meta"].items()) {
      if (!v.is_string()) fail(ErrorCode::MalformedRecord, where + ": meta value for '" + k + "' is not a string");
      t.meta[k] = v.get<std::string>();
    }
  }
  return t;
}

json to_record(const Trace& t) {
  json rec;
  rec["id"] = t.id;
  json rows = json::array();
  for (Eigen::Index i = 0; i < t.states.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < t.states.cols(); ++j) row.push_back(t.states(i, j));
    rows.push_back(std::move(row));
  }
  rec["states"] = std::move(rows);
  if (t.labels) rec["labels"] = *t.labels;
  rec["meta"] = json::object();
  for (const auto& [k, v] : t.meta) rec["meta"][k] = v;
  return rec;
}

}  // namespace

std::vector<Trace> read_trace_file(const std::filesystem::path& path, LoadReport* report, bool ignore_labels) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  std::vector<Trace> out;
  std::string line;
  int lineno = 0;
  int d = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(lineno);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(ErrorCode::MalformedRecord, where + ": " + e.what());
    }
    Trace t = parse_record(rec, where, report, ignore_labels);
    if (d < 0) d = t.dim();
    require(t.dim() == d, ErrorCode::DimensionMismatch,
            where + ": trace '" + t.id + "' has d=" + std::to_string(t.dim()) + ", expected " + std::to_string(d));
    out.push_back(std::move(t));
  }
  return out;
}

void write_trace_file(const std::filesystem::path& path, std::span<const Trace> traces) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  for (const auto& t : traces) out << to_record(t).dump() << '\n';
}

TraceSet load_traces(const std::filesystem::path& path, LoadReport* report, Split default_split,
                     bool ignore_labels) {
  TraceSet set;
  if (path.extension() == ".jsonl") {
    for (auto& t : read_trace_file(path, report, ignore_labels)) set.add(std::move(t), default_split);
    return set;
  }
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::parse_error& e) {
    fail(ErrorCode::MalformedRecord, path.string() + ": " + e.what());
  }
  if (!manifest.contains("files") || !manifest["files"].is_array())
    fail(ErrorCode::MalformedRecord, path.string() + ": manifest lacks 'files'");
  const json splits = manifest.value("splits", json::object());
  std::set<std::string> used;
  for (const auto& f : manifest["files"]) {
    std::filesystem::path p = f.get<std::string>();
    if (p.is_relative()) p = path.parent_path() / p;
    for (auto& t : read_trace_file(p, report, ignore_labels)) {
      if (!splits.contains(t.id))
        fail(ErrorCode::MalformedRecord, path.string() + ": no split tag for trace '" + t.id + "'");
      used.insert(t.id);
      Split s = split_from_string(splits[t.id].get<std::string>());
      set.add(std::move(t), s);
    }
  }
  for (const auto& [id, _] : splits.items())
    if (!used.contains(id) && report) report->warnings.push_back("manifest tags unknown trace '" + id + "'");
  return set;
}

void save_traces(const TraceSet& set, const std::filesystem::path& manifest_path) {
  std::filesystem::path data = manifest_path;
  data.replace_extension(".jsonl");
  write_trace_file(data, set.traces());
  json manifest;
  manifest["format"] = "trajgeo-manifest";
  manifest["version"] = 1;
  manifest["files"] = json::array({data.filename().string()});
  json splits = json::object();
  for (std::size_t i = 0; i < set.size(); ++i) splits[set.traces()[i].id] = to_string(set.splits()[i]);
  manifest["splits"] = std::move(splits);
  std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + manifest_path.string());
  out << manifest.dump(1) << '\n';
}

}  // namespace trajgeo
