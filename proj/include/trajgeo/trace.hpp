#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace trajgeo {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// First incorrect step of a trace. Indices are 1-based; an empty value is
/// the "no labeled error" case.
class FirstError {
 public:
  FirstError() = default;
  static FirstError none() { return FirstError(); }
  static FirstError at(int one_based) { return FirstError(one_based); }

  bool is_none() const { return !index_.has_value(); }
  int index() const { return index_.value(); }
  /// NONE compares as +infinity.
  long long rank() const { return index_ ? *index_ : (1LL << 40); }
  std::string str() const { return index_ ? std::to_string(*index_) : "NONE"; }

  friend bool operator==(const FirstError&, const FirstError&) = default;

 private:
  explicit FirstError(int i) : index_(i) {}
  std::optional<int> index_;
};

/// One reasoning trace: a row of pooled hidden state per step.
struct Trace {
  std::string id;
  Matrix states;                          // m x d
  std::optional<std::vector<int>> labels;  // monotone (0...0 1...1) once loaded
  std::map<std::string, std::string> meta;

  int steps() const { return static_cast<int>(states.rows()); }
  int dim() const { return static_cast<int>(states.cols()); }
  bool labeled() const { return labels.has_value(); }
  FirstError first_error() const;
};

enum class Split { Train, Val, Test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

/// Traces plus prompt-level split tags. All traces share the state width.
class TraceSet {
 public:
  void add(Trace trace, Split split);

  const std::vector<Trace>& traces() const { return traces_; }
  const std::vector<Split>& splits() const { return splits_; }
  std::size_t size() const { return traces_.size(); }
  bool empty() const { return traces_.empty(); }
  int dim() const { return dim_; }

  /// Traces tagged with `split`, in insertion order.
  std::vector<Trace> select(Split split) const;

 private:
  std::vector<Trace> traces_;
  std::vector<Split> splits_;
  std::map<std::string, std::size_t> index_;
  int dim_ = 0;
};

FirstError first_error_index(std::span<const int> labels);

/// Rewrites labels into monotone form: every step at or after the first 1 becomes 1.
std::vector<int> propagate_labels(std::span<const int> labels);

/// Mean-pools token hidden states into one row per step.
Matrix pool_steps(const Matrix& token_states, const std::vector<std::vector<int>>& step_index_sets);

struct LoadReport {
  std::vector<std::string> warnings;
  int propagated = 0;  // records whose labels were rewritten into monotone form
};

/// JSON Lines trace file: one record per line. With `ignore_labels` the label
/// field is skipped without validation and every trace comes back unlabeled.
std::vector<Trace> read_trace_file(const std::filesystem::path& path, LoadReport* report = nullptr,
                                   bool ignore_labels = false);
void write_trace_file(const std::filesystem::path& path, std::span<const Trace> traces);

/// Accepts either a manifest (.json) or a bare trace file (.jsonl, every trace
/// tagged `default_split`).
TraceSet load_traces(const std::filesystem::path& path, LoadReport* report = nullptr,
                     Split default_split = Split::Test, bool ignore_labels = false);

/// Writes `<manifest stem>.jsonl` next to the manifest and the manifest itself.
void save_traces(const TraceSet& set, const std::filesystem::path& manifest_path);

}  // namespace trajgeo
