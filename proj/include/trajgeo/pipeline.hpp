#pragma once

#include "trajgeo/detect.hpp"
#include "trajgeo/features.hpp"
#include "trajgeo/lens.hpp"
#include "trajgeo/nets.hpp"
#include "trajgeo/synthetic.hpp"
#include "trajgeo/training.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace trajgeo {

struct GeneratorSection {
  SyntheticConfig config;
  int n = 600;
  std::optional<double> gamma_nu;  // overrides config.gamma when set
};

struct FeatureOptions {
  int window = 3;
  double epsilon = kDefaultEpsilon;
  bool corpus_radius = false;  // median/MAD over all training correct steps instead of per trace
};

struct EvalOptions {
  double theta = kDefaultTheta;
  bool tune_threshold = true;  // select theta on the validation split when one exists
  int tolerance = 0;           // analysis-only window for first-error accuracy
};

struct VerifySection {
  std::vector<double> gamma_over_nu = {0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0};
  int n_mc = 2000;
  SyntheticConfig bound;  // generator used by the localization bound sweep
};

struct RunConfig {
  std::string name = "default";
  std::uint64_t seed = 0;
  int jobs = 1;
  GeneratorSection generator;
  LensOptions lens;
  FeatureOptions features;
  TeacherShape teacher_shape;
  TrainConfig teacher_train;
  StudentTopology student_topology;
  TrainConfig student_train;
  EvalOptions eval;
  ShiftSpec shift;
  VerifySection verify;

  /// Pushes the root seed into every component seed.
  void apply_seed(std::uint64_t root);
  void validate() const;
};

RunConfig default_run_config();
/// Directory holding the shipped presets (overridable with TRAJGEO_PRESETS).
std::filesystem::path preset_dir();
RunConfig load_preset(const std::string& name);
/// A JSON file with the same sections as the presets; a "preset" key names a
/// base preset that the file then overrides.
RunConfig load_run_config(const std::filesystem::path& path);
void merge_config_json(RunConfig& config, const std::string& json_text);
std::string run_config_json(const RunConfig& config);

/// Settings needed to turn a trace into teacher features.
struct Featurizer {
  FeatureOptions options;
  std::optional<RadiusStats> corpus;
};

Featurizer fit_featurizer(const ContrastiveLens& lens, const FeatureOptions& options,
                          std::span<const Trace> train);
void save_featurizer(const Featurizer& f, const std::filesystem::path& path);
Featurizer load_featurizer(const std::filesystem::path& path);

/// m x (k+6) features. Normalization and radius statistics anchor on the
/// correct steps when labels exist, on every step otherwise.
Matrix teacher_features(const ContrastiveLens& lens, const Featurizer& f, const Trace& trace);

std::vector<double> teacher_scores(const ContrastiveLens& lens, const Featurizer& f, const TeacherModel& teacher,
                                   const Trace& trace);
std::vector<double> student_scores(const StudentModel& student, const Trace& trace);

using ProbTable = std::map<std::string, std::vector<double>>;

/// CSV keyed by (trace_id, step).
void write_prob_table(const ProbTable& probs, const std::filesystem::path& path);
ProbTable read_prob_table(const std::filesystem::path& path);
/// Throws Misalignment when a trace is missing or its step count differs.
const std::vector<double>& aligned_probs(const ProbTable& probs, const Trace& trace);

struct TeacherStage {
  ContrastiveLens lens;
  Featurizer featurizer;
  TeacherModel teacher;
  TrainLog log;
  ProbTable probs;
  std::map<std::string, Matrix> features;
};

/// Lens on the train split, features for every trace, teacher trained on
/// train with early stopping on val.
TeacherStage fit_teacher_stage(const TraceSet& traces, const RunConfig& config);

struct StudentStage {
  StudentModel student;  // still carries the aux head when it was trained with one
  TrainLog log;
  std::vector<std::string> warnings;
};

StudentStage distill_student_stage(const TraceSet& traces, const ProbTable& probs,
                                   const std::map<std::string, Matrix>* features, const RunConfig& config);

struct MetricRow {
  std::string model;
  std::string dataset;
  std::string split;
  std::optional<double> auroc;
  double first_error_accuracy = 0.0;
  double theta = kDefaultTheta;
  int n_traces = 0;
  long long n_steps = 0;
};

MetricRow evaluate_scores(const std::string& model, const std::string& dataset, const std::string& split,
                          std::span<const std::vector<double>> scores, std::span<const Trace> traces, double theta,
                          int tolerance = 0);
void write_metrics(std::span<const MetricRow> rows, const std::filesystem::path& path);

/// Theta for a model: tuned on the validation traces when requested and
/// available, else the configured value.
double choose_theta(const EvalOptions& eval, std::span<const std::vector<double>> val_scores,
                    std::span<const Trace> val_traces);

struct ShiftReport {
  MetricRow teacher_in, teacher_shift, student_in, student_shift;
  std::vector<double> margins_in, margins_shift;        // teacher margin per test trace
  std::vector<double> deviations_in, deviations_shift;  // max |s_S - s_T| per test trace
  double uncertified_in = 0.0;     // fraction with m_T <= deviation
  double uncertified_shift = 0.0;
  double teacher_drop() const;
  double student_drop() const;
};

/// Scores the test split before and after the configured shift with fixed
/// trained models.
ShiftReport shift_experiment(const TraceSet& traces, const TeacherStage& teacher, const StudentModel& student,
                             const RunConfig& config, double teacher_theta, double student_theta);
void write_shift_report(const ShiftReport& report, const std::filesystem::path& path);

/// Runs `fn(i)` for i in [0, n) on up to `jobs` threads; fn writes only to slot i.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn);

/// Subcommands. Each writes into `out` and returns the process exit status.
struct CommandContext {
  RunConfig config;
  std::filesystem::path out = ".";
  std::ostream* log = nullptr;
};

int cmd_gen(const CommandContext& ctx);
/// Writes lens, featurizer, teacher, teacher_probs.csv, teacher_features.csv, the train log and metrics.
int cmd_fit_teacher(const CommandContext& ctx, const std::filesystem::path& traces);
int cmd_distill_student(const CommandContext& ctx, const std::filesystem::path& traces,
                        const std::filesystem::path& teacher_probs,
                        const std::optional<std::filesystem::path>& features);
int cmd_infer(const CommandContext& ctx, const std::filesystem::path& student, const std::filesystem::path& traces,
              double theta);

struct EvalInputs {
  std::filesystem::path traces;
  std::optional<std::filesystem::path> lens, featurizer, teacher, student;
  std::optional<std::filesystem::path> feature_dump;
  std::string dataset = "synthetic";
};
int cmd_eval(const CommandContext& ctx, const EvalInputs& inputs);
int cmd_verify(const CommandContext& ctx, const std::string& suite, int n, bool inject_fault);
int cmd_shift_exp(const CommandContext& ctx);

/// gen, fit-teacher, distill-student and eval in one process, passing objects
/// in memory but writing the same artifacts as the separate commands.
int run_monolith(const CommandContext& ctx);

}  // namespace trajgeo
