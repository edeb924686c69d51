#include "trajgeo/pipeline.hpp"

#include "trajgeo/error.hpp"
#include "trajgeo/rng.hpp"
#include "trajgeo/verify.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

namespace trajgeo {

using nlohmann::json;

// ---------------------------------------------------------------- config

void RunConfig::apply_seed(std::uint64_t root) {
  seed = root;
  generator.config.seed = derive_seed(root, 10);
  lens.seed = derive_seed(root, 11);
  teacher_train.seed = derive_seed(root, 12);
  student_train.seed = derive_seed(root, 13);
}

void RunConfig::validate() const {
  require(jobs >= 1, ErrorCode::ConfigError, "jobs must be at least 1");
  require(generator.n >= 0, ErrorCode::ConfigError, "generator.n must be nonnegative");
  generator.config.validate();
  require(lens.k >= 1, ErrorCode::ConfigError, "lens.k must be positive");
  require(lens.rho >= 0 && lens.rho <= 1, ErrorCode::ConfigError, "lens.rho must lie in [0,1]");
  require(lens.epsilon > 0 && features.epsilon > 0, ErrorCode::ConfigError, "epsilon must be positive");
  require(features.window >= 1, ErrorCode::ConfigError, "features.window must be positive");
  teacher_train.validate();
  student_train.validate();
  require(eval.theta >= 0 && eval.theta <= 1, ErrorCode::ConfigError, "eval.theta must lie in [0,1]");
  require(eval.tolerance >= 0, ErrorCode::ConfigError, "eval.tolerance must be nonnegative");
}

RunConfig default_run_config() {
  RunConfig c;
  c.student_train.lambda = 0.5;
  c.apply_seed(0);
  return c;
}

std::filesystem::path preset_dir() {
  if (const char* env = std::getenv("TRAJGEO_PRESETS")) return env;
  return TRAJGEO_PRESET_DIR;
}

namespace {

template <class T>
void take(const json& j, const char* key, T& field) {
  if (j.contains(key) && !j[key].is_null()) field = j[key].get<T>();
}

void read_synthetic(const json& j, SyntheticConfig& c) {
  take(j, "d", c.d);
  take(j, "m_min", c.m_min);
  take(j, "m_max", c.m_max);
  take(j, "k_true", c.k_true);
  take(j, "score_rank", c.score_rank);
  take(j, "nuisance_rank", c.nuisance_rank);
  take(j, "gamma", c.gamma);
  take(j, "beta", c.beta);
  take(j, "noise_scale", c.noise_scale);
  take(j, "walk_step", c.walk_step);
  take(j, "walk_momentum", c.walk_momentum);
  take(j, "offset_scale", c.offset_scale);
  take(j, "nuisance_cue", c.nuisance_cue);
  take(j, "nuisance_noise", c.nuisance_noise);
  take(j, "background_noise", c.background_noise);
  take(j, "rho_recover", c.rho_recover);
  take(j, "p_error", c.p_error);
  take(j, "min_correct_prefix", c.min_correct_prefix);
  take(j, "train_fraction", c.train_fraction);
  take(j, "val_fraction", c.val_fraction);
  take(j, "error_direction_seed", c.error_direction_seed);
}

json synthetic_json(const SyntheticConfig& c) {
  return json{{"d", c.d},
              {"m_min", c.m_min},
              {"m_max", c.m_max},
              {"k_true", c.k_true},
              {"score_rank", c.score_rank},
              {"nuisance_rank", c.nuisance_rank},
              {"gamma", c.gamma},
              {"beta", c.beta},
              {"noise_scale", c.noise_scale},
              {"walk_step", c.walk_step},
              {"walk_momentum", c.walk_momentum},
              {"offset_scale", c.offset_scale},
              {"nuisance_cue", c.nuisance_cue},
              {"nuisance_noise", c.nuisance_noise},
              {"background_noise", c.background_noise},
              {"rho_recover", c.rho_recover},
              {"p_error", c.p_error},
              {"min_correct_prefix", c.min_correct_prefix},
              {"train_fraction", c.train_fraction},
              {"val_fraction", c.val_fraction},
              {"error_direction_seed", c.error_direction_seed}};
}

void read_train(const json& j, TrainConfig& t) {
  take(j, "learning_rate", t.learning_rate);
  take(j, "weight_decay", t.weight_decay);
  take(j, "batch_size", t.batch_size);
  take(j, "max_epochs", t.max_epochs);
  take(j, "patience", t.patience);
  take(j, "lambda", t.lambda);
  take(j, "tau_d", t.tau_d);
  take(j, "beta_aux", t.beta_aux);
  take(j, "theta", t.theta);
  take(j, "grad_clip", t.grad_clip);
}

json train_json(const TrainConfig& t) {
  return json{{"learning_rate", t.learning_rate}, {"weight_decay", t.weight_decay}, {"batch_size", t.batch_size},
              {"max_epochs", t.max_epochs},       {"patience", t.patience},         {"lambda", t.lambda},
              {"tau_d", t.tau_d},                 {"beta_aux", t.beta_aux},         {"theta", t.theta},
              {"grad_clip", t.grad_clip}};
}

/// Every key of `j` must exist in `schema`; nested objects are checked the same way.
void reject_unknown_keys(const json& j, const json& schema, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    require(schema.contains(key), ErrorCode::ConfigError, "unknown config key '" + path + "'");
    if (value.is_object() && schema[key].is_object()) reject_unknown_keys(value, schema[key], path);
  }
}

json config_schema() {
  static const json schema = [] {
    json s = json::parse(run_config_json(default_run_config()));
    s["preset"] = "";
    s["generator"]["gamma"] = 0.0;
    s["generator"]["gamma_nu"] = 0.0;
    s["verify"]["bound"]["gamma"] = 0.0;
    return s;
  }();
  return schema;
}

void merge(RunConfig& c, const json& j) {
  require(j.is_object(), ErrorCode::ConfigError, "config must be a JSON object");
  reject_unknown_keys(j, config_schema(), "");
  take(j, "name", c.name);
  take(j, "jobs", c.jobs);
  if (j.contains("generator")) {
    const auto& g = j["generator"];
    read_synthetic(g, c.generator.config);
    take(g, "n", c.generator.n);
    if (g.contains("gamma_nu")) c.generator.gamma_nu = g["gamma_nu"].get<double>();
    if (g.contains("gamma")) c.generator.gamma_nu.reset();
  }
  if (j.contains("lens")) {
    const auto& l = j["lens"];
    take(l, "k", c.lens.k);
    take(l, "alpha", c.lens.alpha);
    take(l, "rho", c.lens.rho);
    take(l, "epsilon", c.lens.epsilon);
    if (l.contains("method")) c.lens.method = eig_method_from_string(l["method"].get<std::string>());
  }
  if (j.contains("features")) {
    const auto& f = j["features"];
    take(f, "window", c.features.window);
    take(f, "epsilon", c.features.epsilon);
    if (f.contains("radius_stats")) {
      const auto mode = f["radius_stats"].get<std::string>();
      require(mode == "trace" || mode == "corpus", ErrorCode::ConfigError, "radius_stats must be trace or corpus");
      c.features.corpus_radius = mode == "corpus";
    }
  }
  if (j.contains("teacher")) {
    const auto& t = j["teacher"];
    take(t, "hidden1", c.teacher_shape.hidden1);
    take(t, "hidden2", c.teacher_shape.hidden2);
    read_train(t, c.teacher_train);
  }
  if (j.contains("student")) {
    const auto& s = j["student"];
    take(s, "hidden", c.student_topology.hidden);
    take(s, "layers", c.student_topology.layers);
    take(s, "head_hidden", c.student_topology.head_hidden);
    read_train(s, c.student_train);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    take(e, "theta", c.eval.theta);
    take(e, "tune_threshold", c.eval.tune_threshold);
    take(e, "tolerance", c.eval.tolerance);
  }
  if (j.contains("shift")) {
    take(j["shift"], "rotation_angle", c.shift.rotation_angle);
    take(j["shift"], "translation", c.shift.translation);
  }
  if (j.contains("verify")) {
    const auto& v = j["verify"];
    take(v, "gamma_nu", c.verify.gamma_over_nu);
    take(v, "n_mc", c.verify.n_mc);
    if (v.contains("bound")) read_synthetic(v["bound"], c.verify.bound);
  }
  if (j.contains("seed")) c.apply_seed(j["seed"].get<std::uint64_t>());
}

json parse_json_text(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::ConfigError, where + ": " + e.what());
  }
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

void merge_config_json(RunConfig& config, const std::string& json_text) {
  merge(config, parse_json_text(json_text, "config"));
}

RunConfig load_preset(const std::string& name) {
  const auto path = preset_dir() / (name + ".json");
  require(std::filesystem::exists(path), ErrorCode::ConfigError, "unknown preset '" + name + "'");
  return load_run_config(path);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  const json j = parse_json_text(slurp(path), path.string());
  RunConfig c = default_run_config();
  if (j.contains("preset")) c = load_preset(j["preset"].get<std::string>());
  merge(c, j);
  c.validate();
  return c;
}

std::string run_config_json(const RunConfig& c) {
  json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["jobs"] = c.jobs;
  j["generator"] = synthetic_json(c.generator.config);
  j["generator"]["n"] = c.generator.n;
  if (c.generator.gamma_nu) {
    j["generator"]["gamma_nu"] = *c.generator.gamma_nu;
    j["generator"].erase("gamma");
  }
  j["lens"] = {{"k", c.lens.k}, {"alpha", c.lens.alpha}, {"rho", c.lens.rho}, {"epsilon", c.lens.epsilon},
               {"method", to_string(c.lens.method)}};
  j["features"] = {{"window", c.features.window}, {"epsilon", c.features.epsilon},
                   {"radius_stats", c.features.corpus_radius ? "corpus" : "trace"}};
  j["teacher"] = train_json(c.teacher_train);
  j["teacher"]["hidden1"] = c.teacher_shape.hidden1;
  j["teacher"]["hidden2"] = c.teacher_shape.hidden2;
  j["student"] = train_json(c.student_train);
  j["student"]["hidden"] = c.student_topology.hidden;
  j["student"]["layers"] = c.student_topology.layers;
  j["student"]["head_hidden"] = c.student_topology.head_hidden;
  j["eval"] = {{"theta", c.eval.theta}, {"tune_threshold", c.eval.tune_threshold}, {"tolerance", c.eval.tolerance}};
  j["shift"] = {{"rotation_angle", c.shift.rotation_angle}, {"translation", c.shift.translation}};
  j["verify"] = {{"gamma_nu", c.verify.gamma_over_nu}, {"n_mc", c.verify.n_mc}, {"bound", synthetic_json(c.verify.bound)}};
  return j.dump(2);
}

// ---------------------------------------------------------------- scoring

void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int workers = std::min(jobs, n);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

std::vector<bool> correct_mask(const Trace& trace) {
  std::vector<bool> mask(static_cast<std::size_t>(trace.steps()), false);
  bool any = false;
  if (trace.labeled())
    for (int t = 0; t < trace.steps(); ++t)
      if ((*trace.labels)[static_cast<std::size_t>(t)] == 0) any = mask[static_cast<std::size_t>(t)] = true;
  if (!any) std::fill(mask.begin(), mask.end(), true);
  return mask;
}

Matrix projected(const ContrastiveLens& lens, const Trace& trace) {
  require(trace.dim() == lens.dim, ErrorCode::DimensionMismatch,
          "trace '" + trace.id + "' has d=" + std::to_string(trace.dim()) + ", lens expects " + std::to_string(lens.dim));
  return project(lens, normalize_with_fallback(trace, lens.epsilon).states);
}

}  // namespace

Featurizer fit_featurizer(const ContrastiveLens& lens, const FeatureOptions& options, std::span<const Trace> train) {
  Featurizer f;
  f.options = options;
  if (options.corpus_radius) {
    std::vector<double> radii;
    for (const auto& tr : train) {
      const Matrix z = projected(lens, tr);
      const auto mask = correct_mask(tr);
      for (int t = 0; t < tr.steps(); ++t)
        if (mask[static_cast<std::size_t>(t)]) radii.push_back(z.row(t).norm());
    }
    require(!radii.empty(), ErrorCode::InsufficientSamples, "no training steps for corpus radius statistics");
    f.corpus = radius_stats_of(radii);
  }
  return f;
}

void save_featurizer(const Featurizer& f, const std::filesystem::path& path) {
  json j;
  j["format"] = "trajgeo-featurizer";
  j["version"] = 1;
  j["window"] = f.options.window;
  j["epsilon"] = f.options.epsilon;
  j["radius_stats"] = f.corpus ? "corpus" : "trace";
  if (f.corpus) j["corpus"] = {{"median", f.corpus->median}, {"mad", f.corpus->mad}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Featurizer load_featurizer(const std::filesystem::path& path) {
  const json j = parse_json_text(slurp(path), path.string());
  require(j.value("format", "") == "trajgeo-featurizer", ErrorCode::MalformedRecord,
          path.string() + " is not a featurizer file");
  Featurizer f;
  f.options.window = j.at("window").get<int>();
  f.options.epsilon = j.at("epsilon").get<double>();
  f.options.corpus_radius = j.at("radius_stats").get<std::string>() == "corpus";
  if (f.options.corpus_radius)
    f.corpus = RadiusStats{j.at("corpus").at("median").get<double>(), j.at("corpus").at("mad").get<double>()};
  return f;
}

Matrix teacher_features(const ContrastiveLens& lens, const Featurizer& f, const Trace& trace) {
  const Matrix z = projected(lens, trace);
  const RadiusStats stats = f.corpus ? *f.corpus : radius_stats(z, correct_mask(trace));
  const auto blocks = feature_block(z, stats, f.options.window, f.options.epsilon);
  return feature_matrix(blocks);
}

namespace {
std::vector<double> to_std(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }
}  // namespace

std::vector<double> teacher_scores(const ContrastiveLens& lens, const Featurizer& f, const TeacherModel& teacher,
                                   const Trace& trace) {
  return to_std(teacher.forward(teacher_features(lens, f, trace)));
}

std::vector<double> student_scores(const StudentModel& student, const Trace& trace) {
  return to_std(student.forward(trace.states).probs);
}

void write_prob_table(const ProbTable& probs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << "trace_id,step,prob\n" << std::setprecision(17);
  for (const auto& [id, p] : probs)
    for (std::size_t t = 0; t < p.size(); ++t) out << id << ',' << t + 1 << ',' << p[t] << '\n';
}

ProbTable read_prob_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line.rfind("trace_id,step,prob", 0) == 0,
          ErrorCode::MalformedRecord, path.string() + ": missing probability header");
  ProbTable table;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto c1 = line.find(','), c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
    require(c1 != std::string::npos && c2 != std::string::npos, ErrorCode::MalformedRecord,
            path.filename().string() + ":" + std::to_string(lineno) + ": expected three columns");
    const std::string id = line.substr(0, c1);
    int step = 0;
    double p = 0.0;
    try {
      step = std::stoi(line.substr(c1 + 1, c2 - c1 - 1));
      p = std::stod(line.substr(c2 + 1));
    } catch (const std::exception&) {
      fail(ErrorCode::MalformedRecord, path.filename().string() + ":" + std::to_string(lineno) + ": bad number");
    }
    auto& seq = table[id];
    require(step == static_cast<int>(seq.size()) + 1, ErrorCode::Misalignment,
            "trace '" + id + "' step " + std::to_string(step) + " out of order");
    require(std::isfinite(p) && p >= 0 && p <= 1, ErrorCode::MalformedRecord, "probability outside [0,1]");
    seq.push_back(p);
  }
  return table;
}

const std::vector<double>& aligned_probs(const ProbTable& probs, const Trace& trace) {
  const auto it = probs.find(trace.id);
  require(it != probs.end(), ErrorCode::Misalignment, "no teacher probabilities for trace '" + trace.id + "'");
  require(static_cast<int>(it->second.size()) == trace.steps(), ErrorCode::Misalignment,
          "trace '" + trace.id + "' has " + std::to_string(trace.steps()) + " steps but " +
              std::to_string(it->second.size()) + " teacher probabilities");
  return it->second;
}

// ---------------------------------------------------------------- stages

namespace {

template <class F>
auto staged(const char* stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.code(), std::string("[") + stage + "] " + e.detail());
  }
}

std::vector<int> labels_or_fail(const Trace& tr) {
  require(tr.labeled(), ErrorCode::InvalidLabel, "trace '" + tr.id + "' is unlabeled");
  return *tr.labels;
}

}  // namespace

TeacherStage fit_teacher_stage(const TraceSet& traces, const RunConfig& config) {
  const auto train = traces.select(Split::Train);
  const auto val = traces.select(Split::Val);
  require(!train.empty(), ErrorCode::InsufficientSamples, "[lens] no training traces");
  require(!val.empty(), ErrorCode::InsufficientSamples, "[train] no validation traces");
  TeacherStage st;
  st.lens = staged("lens", [&] { return fit_lens(train, config.lens); });
  st.featurizer = staged("features", [&] { return fit_featurizer(st.lens, config.features, train); });

  const auto& all = traces.traces();
  std::vector<Matrix> feats(all.size());
  staged("features", [&] {
    parallel_for(static_cast<int>(all.size()), config.jobs, [&](int i) {
      feats[static_cast<std::size_t>(i)] = teacher_features(st.lens, st.featurizer, all[static_cast<std::size_t>(i)]);
    });
    return 0;
  });
  std::vector<TeacherExample> tr_ex, va_ex;
  for (std::size_t i = 0; i < all.size(); ++i) {
    st.features[all[i].id] = feats[i];
    if (traces.splits()[i] == Split::Train) tr_ex.push_back({feats[i], staged("train", [&] { return labels_or_fail(all[i]); })});
    if (traces.splits()[i] == Split::Val) va_ex.push_back({feats[i], staged("train", [&] { return labels_or_fail(all[i]); })});
  }
  st.teacher = staged("train", [&] {
    return train_teacher(tr_ex, va_ex, config.teacher_train, config.teacher_shape, &st.log);
  });
  for (std::size_t i = 0; i < all.size(); ++i) st.probs[all[i].id] = to_std(st.teacher.forward(feats[i]));
  return st;
}

StudentStage distill_student_stage(const TraceSet& traces, const ProbTable& probs,
                                   const std::map<std::string, Matrix>* features, const RunConfig& config) {
  StudentStage st;
  const TrainConfig& tc = config.student_train;
  const bool ignore_teacher = tc.lambda >= 1.0;
  if (ignore_teacher) st.warnings.push_back("lambda = 1: teacher probabilities are ignored");
  const bool want_aux = tc.beta_aux > 0 && features != nullptr;
  if (tc.beta_aux > 0 && !features) st.warnings.push_back("no feature targets supplied: auxiliary head disabled");

  std::vector<StudentExample> tr_ex, va_ex;
  const auto& all = traces.traces();
  for (std::size_t i = 0; i < all.size(); ++i) {
    const Split sp = traces.splits()[i];
    if (sp == Split::Test) continue;
    const Trace& t = all[i];
    StudentExample ex;
    ex.states = t.states;
    if (ignore_teacher) {
      ex.teacher_probs = Vector::Constant(t.steps(), 0.5);
    } else {
      const auto& p = staged("align", [&]() -> const std::vector<double>& { return aligned_probs(probs, t); });
      ex.teacher_probs = Eigen::Map<const Vector>(p.data(), static_cast<Eigen::Index>(p.size()));
    }
    ex.labels = t.labels;
    if (want_aux && sp == Split::Train) {
      const auto it = features->find(t.id);
      require(it != features->end(), ErrorCode::Misalignment, "[align] no feature targets for trace '" + t.id + "'");
      require(it->second.rows() == t.steps(), ErrorCode::Misalignment,
              "[align] feature targets of '" + t.id + "' do not match its steps");
      ex.aux_target = it->second;
    }
    (sp == Split::Train ? tr_ex : va_ex).push_back(std::move(ex));
  }
  require(!tr_ex.empty() && !va_ex.empty(), ErrorCode::InsufficientSamples, "[train] student needs train and val traces");
  st.student = staged("train", [&] { return train_student(tr_ex, va_ex, tc, config.student_topology, &st.log); });
  return st;
}

// ---------------------------------------------------------------- metrics

MetricRow evaluate_scores(const std::string& model, const std::string& dataset, const std::string& split,
                          std::span<const std::vector<double>> scores, std::span<const Trace> traces, double theta,
                          int tolerance) {
  require(scores.size() == traces.size(), ErrorCode::Misalignment, "scores and traces differ in count");
  require(!traces.empty(), ErrorCode::InsufficientSamples, "empty " + split + " split");
  MetricRow row{model, dataset, split, std::nullopt, 0.0, theta, static_cast<int>(traces.size()), 0};
  std::vector<double> flat;
  std::vector<int> labels;
  std::vector<FirstError> preds, truths;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto y = labels_or_fail(traces[i]);
    require(y.size() == scores[i].size(), ErrorCode::Misalignment, "score length differs for '" + traces[i].id + "'");
    flat.insert(flat.end(), scores[i].begin(), scores[i].end());
    labels.insert(labels.end(), y.begin(), y.end());
    preds.push_back(first_crossing(scores[i], theta));
    truths.push_back(traces[i].first_error());
  }
  row.n_steps = static_cast<long long>(flat.size());
  row.auroc = auroc(flat, labels);
  row.first_error_accuracy = first_error_accuracy(preds, truths, tolerance);
  return row;
}

void write_metrics(std::span<const MetricRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << "model,dataset,split,auroc,first_error_accuracy,theta,n_traces,n_steps\n" << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.model << ',' << r.dataset << ',' << r.split << ',';
    if (r.auroc)
      out << *r.auroc;
    else
      out << "NONE";
    out << ',' << r.first_error_accuracy << ',' << r.theta << ',' << r.n_traces << ',' << r.n_steps << '\n';
  }
}

double choose_theta(const EvalOptions& eval, std::span<const std::vector<double>> val_scores,
                    std::span<const Trace> val_traces) {
  if (!eval.tune_threshold || val_traces.empty()) return eval.theta;
  std::vector<ScoredTrace> scored;
  for (std::size_t i = 0; i < val_traces.size(); ++i) {
    if (!val_traces[i].labeled()) return eval.theta;
    scored.push_back({val_scores[i], val_traces[i].first_error()});
  }
  return select_threshold(scored);
}

double ShiftReport::teacher_drop() const {
  return teacher_in.auroc.value_or(0.5) - teacher_shift.auroc.value_or(0.5);
}
double ShiftReport::student_drop() const {
  return student_in.auroc.value_or(0.5) - student_shift.auroc.value_or(0.5);
}

ShiftReport shift_experiment(const TraceSet& traces, const TeacherStage& teacher, const StudentModel& student,
                             const RunConfig& config, double teacher_theta, double student_theta) {
  const TraceSet shifted = apply_shift(traces, config.generator.config, config.shift);
  ShiftReport r;
  auto run = [&](const TraceSet& set, MetricRow& t_row, MetricRow& s_row, std::vector<double>& margins,
                 std::vector<double>& devs, double& uncertified, const std::string& dataset) {
    const auto test = set.select(Split::Test);
    std::vector<std::vector<double>> ts(test.size()), ss(test.size());
    parallel_for(static_cast<int>(test.size()), config.jobs, [&](int i) {
      const auto u = static_cast<std::size_t>(i);
      ts[u] = teacher_scores(teacher.lens, teacher.featurizer, teacher.teacher, test[u]);
      ss[u] = student_scores(student, test[u]);
    });
    t_row = evaluate_scores("teacher", dataset, "test", ts, test, teacher_theta, config.eval.tolerance);
    s_row = evaluate_scores("student", dataset, "test", ss, test, student_theta, config.eval.tolerance);
    long long unc = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      double dev = 0.0;
      for (std::size_t t = 0; t < ts[i].size(); ++t) dev = std::max(dev, std::abs(ts[i][t] - ss[i][t]));
      const double m = teacher_margin(ts[i], teacher_theta);
      margins.push_back(m);
      devs.push_back(dev);
      unc += m <= dev;
    }
    uncertified = test.empty() ? 0.0 : static_cast<double>(unc) / static_cast<double>(test.size());
  };
  run(traces, r.teacher_in, r.student_in, r.margins_in, r.deviations_in, r.uncertified_in, "in-domain");
  run(shifted, r.teacher_shift, r.student_shift, r.margins_shift, r.deviations_shift, r.uncertified_shift, "shifted");
  return r;
}

namespace {

json metric_json(const MetricRow& r) {
  json j{{"model", r.model}, {"dataset", r.dataset}, {"split", r.split},
         {"first_error_accuracy", r.first_error_accuracy}, {"theta", r.theta},
         {"n_traces", r.n_traces}, {"n_steps", r.n_steps}};
  j["auroc"] = r.auroc ? json(*r.auroc) : json(nullptr);
  return j;
}

}  // namespace

void write_shift_report(const ShiftReport& r, const std::filesystem::path& path) {
  json j;
  j["teacher"] = {{"in_domain", metric_json(r.teacher_in)}, {"shifted", metric_json(r.teacher_shift)},
                  {"auroc_drop", r.teacher_drop()}};
  j["student"] = {{"in_domain", metric_json(r.student_in)}, {"shifted", metric_json(r.student_shift)},
                  {"auroc_drop", r.student_drop()}};
  j["agreement"] = {{"teacher_margin_in", r.margins_in},
                    {"teacher_margin_shifted", r.margins_shift},
                    {"max_deviation_in", r.deviations_in},
                    {"max_deviation_shifted", r.deviations_shift},
                    {"uncertified_fraction_in", r.uncertified_in},
                    {"uncertified_fraction_shifted", r.uncertified_shift}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------- commands

namespace {

/// Outputs are written into a staging directory and moved into place only
/// when the command succeeds, so a failure leaves no partial artifacts.
class Staging {
 public:
  Staging(const std::filesystem::path& out, const std::string& name) : out_(out), dir_(out / (".staging-" + name)) {
    std::filesystem::create_directories(out_);
    std::filesystem::remove_all(dir_);
    std::filesystem::create_directories(dir_);
  }
  ~Staging() {
    std::error_code ec;
    std::filesystem::remove_all(dir_, ec);
  }
  std::filesystem::path operator/(const std::string& file) const { return dir_ / file; }
  void commit() {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir_)) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) std::filesystem::rename(f, out_ / f.filename());
  }

 private:
  std::filesystem::path out_, dir_;
};

std::ostream& log_of(const CommandContext& ctx) { return ctx.log ? *ctx.log : std::cerr; }

void print_warnings(const CommandContext& ctx, const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) log_of(ctx) << "warning: " << w << '\n';
}

SyntheticConfig resolved_generator(const RunConfig& c) {
  SyntheticConfig g = c.generator.config;
  if (c.generator.gamma_nu) set_gamma_in_nu(g, *c.generator.gamma_nu);
  return g;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << text << '\n';
}

void write_gen_outputs(const TraceSet& set, const RunConfig& config, const Staging& st) {
  save_traces(set, st / "traces.json");
  const SyntheticConfig g = resolved_generator(config);
  const PopulationConstants pc = population_constants(g);
  json pop{{"mu_c", pc.mu_c}, {"nu", pc.nu}, {"b", pc.b}, {"c", pc.c}, {"gamma", g.gamma}, {"n", config.generator.n}};
  write_text(st / "population.json", pop.dump(2));
  write_text(st / "config.json", run_config_json(config));
}

std::vector<FeatureDumpRow> dump_rows(const TraceSet& set, const std::map<std::string, Matrix>& features) {
  std::vector<FeatureDumpRow> rows;
  for (const auto& t : set.traces()) {
    const Matrix& f = features.at(t.id);
    for (int s = 0; s < t.steps(); ++s)
      rows.push_back({t.id, s + 1, f.row(s), t.labeled() ? (*t.labels)[static_cast<std::size_t>(s)] : -1});
  }
  return rows;
}

std::map<std::string, Matrix> features_from_dump(const std::vector<FeatureDumpRow>& rows) {
  std::map<std::string, std::vector<Eigen::RowVectorXd>> grouped;
  for (const auto& r : rows) {
    auto& g = grouped[r.trace_id];
    require(r.step == static_cast<int>(g.size()) + 1, ErrorCode::Misalignment,
            "feature rows of '" + r.trace_id + "' out of order");
    g.push_back(r.features);
  }
  std::map<std::string, Matrix> out;
  for (auto& [id, g] : grouped) {
    Matrix m(static_cast<Eigen::Index>(g.size()), g.front().size());
    for (std::size_t i = 0; i < g.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = g[i];
    out.emplace(id, std::move(m));
  }
  return out;
}

struct SplitScores {
  std::vector<Trace> traces;
  std::vector<std::vector<double>> scores;
};

SplitScores score_split(const TraceSet& set, Split split, int jobs,
                        const std::function<std::vector<double>(const Trace&)>& scorer) {
  SplitScores s;
  s.traces = set.select(split);
  s.scores.resize(s.traces.size());
  parallel_for(static_cast<int>(s.traces.size()), jobs,
               [&](int i) { s.scores[static_cast<std::size_t>(i)] = scorer(s.traces[static_cast<std::size_t>(i)]); });
  return s;
}

/// Rows for every labeled, nonempty split, with theta chosen on val.
std::vector<MetricRow> metric_rows(const std::string& model, const std::string& dataset, const TraceSet& set,
                                   const RunConfig& config,
                                   const std::function<std::vector<double>(const Trace&)>& scorer,
                                   std::initializer_list<Split> splits) {
  const SplitScores val = score_split(set, Split::Val, config.jobs, scorer);
  const double theta = choose_theta(config.eval, val.scores, val.traces);
  std::vector<MetricRow> rows;
  for (Split sp : splits) {
    const SplitScores s = sp == Split::Val ? val : score_split(set, sp, config.jobs, scorer);
    if (s.traces.empty()) continue;
    rows.push_back(evaluate_scores(model, dataset, to_string(sp), s.scores, s.traces, theta, config.eval.tolerance));
  }
  return rows;
}

void write_teacher_outputs(const TeacherStage& ts, const TraceSet& set, const RunConfig& config, const Staging& st) {
  save_lens(ts.lens, st / "lens.json");
  save_featurizer(ts.featurizer, st / "featurizer.json");
  save_teacher(ts.teacher, st / "teacher.json");
  write_prob_table(ts.probs, st / "teacher_probs.csv");
  write_train_log(ts.log, st / "teacher_train_log.csv");
  write_feature_dump(st / "teacher_features.csv", ts.lens.k, dump_rows(set, ts.features));
  auto scorer = [&](const Trace& t) { return ts.probs.at(t.id); };
  write_metrics(metric_rows("teacher", "synthetic", set, config, scorer, {Split::Train, Split::Val}),
                st / "teacher_metrics.csv");
}

void write_student_outputs(const StudentStage& ss, const TraceSet& set, const RunConfig& config, const Staging& st) {
  const StudentModel inference = ss.student.without_aux();
  save_student(inference, st / "student.json");
  write_train_log(ss.log, st / "student_train_log.csv");
  auto scorer = [&](const Trace& t) { return student_scores(inference, t); };
  write_metrics(metric_rows("student", "synthetic", set, config, scorer, {Split::Train, Split::Val}),
                st / "student_metrics.csv");
}

std::vector<MetricRow> eval_rows(const TraceSet& set, const std::string& dataset, const RunConfig& config,
                                 const ContrastiveLens* lens, const Featurizer* featurizer,
                                 const TeacherModel* teacher, const StudentModel* student) {
  require(!set.select(Split::Test).empty(), ErrorCode::InsufficientSamples, "empty test split");
  std::vector<MetricRow> rows;
  if (lens && featurizer && teacher) {
    auto scorer = [&](const Trace& t) { return teacher_scores(*lens, *featurizer, *teacher, t); };
    for (auto& r : metric_rows("teacher", dataset, set, config, scorer, {Split::Test})) rows.push_back(r);
  }
  if (student) {
    auto scorer = [&](const Trace& t) { return student_scores(*student, t); };
    for (auto& r : metric_rows("student", dataset, set, config, scorer, {Split::Test})) rows.push_back(r);
  }
  return rows;
}

}  // namespace

int cmd_gen(const CommandContext& ctx) {
  ctx.config.validate();
  Staging st(ctx.out, "gen");
  const TraceSet set = staged("generate", [&] { return generate_traces(resolved_generator(ctx.config), ctx.config.generator.n); });
  write_gen_outputs(set, ctx.config, st);
  st.commit();
  log_of(ctx) << "generated " << set.size() << " traces\n";
  return 0;
}

int cmd_fit_teacher(const CommandContext& ctx, const std::filesystem::path& traces) {
  ctx.config.validate();
  Staging st(ctx.out, "fit-teacher");
  LoadReport report;
  const TraceSet set = staged("load", [&] { return load_traces(traces, &report); });
  print_warnings(ctx, report.warnings);
  const TeacherStage ts = fit_teacher_stage(set, ctx.config);
  write_teacher_outputs(ts, set, ctx.config, st);
  st.commit();
  log_of(ctx) << "teacher: best epoch " << ts.log.best_epoch << ", val AUROC "
              << (ts.log.best_val_auroc ? std::to_string(*ts.log.best_val_auroc) : "NONE") << '\n';
  return 0;
}

int cmd_distill_student(const CommandContext& ctx, const std::filesystem::path& traces,
                        const std::filesystem::path& teacher_probs,
                        const std::optional<std::filesystem::path>& features) {
  ctx.config.validate();
  Staging st(ctx.out, "distill-student");
  LoadReport report;
  const TraceSet set = staged("load", [&] { return load_traces(traces, &report); });
  print_warnings(ctx, report.warnings);
  const bool ignore_teacher = ctx.config.student_train.lambda >= 1.0;
  const ProbTable probs = ignore_teacher ? ProbTable{} : staged("load", [&] { return read_prob_table(teacher_probs); });
  std::optional<std::map<std::string, Matrix>> feats;
  if (features) feats = staged("load", [&] { return features_from_dump(read_feature_dump(*features)); });
  const StudentStage ss = distill_student_stage(set, probs, feats ? &*feats : nullptr, ctx.config);
  print_warnings(ctx, ss.warnings);
  write_student_outputs(ss, set, ctx.config, st);
  st.commit();
  log_of(ctx) << "student: best epoch " << ss.log.best_epoch << ", val AUROC "
              << (ss.log.best_val_auroc ? std::to_string(*ss.log.best_val_auroc) : "NONE") << '\n';
  return 0;
}

int cmd_infer(const CommandContext& ctx, const std::filesystem::path& student, const std::filesystem::path& traces,
              double theta) {
  require(theta >= 0 && theta <= 1, ErrorCode::ConfigError, "theta must lie in [0,1]");
  Staging st(ctx.out, "infer");
  const StudentModel model = staged("load", [&] { return load_student(student); });
  const TraceSet set = staged("load", [&] { return load_traces(traces, nullptr, Split::Test, true); });
  std::vector<std::vector<double>> scores(set.size());
  staged("infer", [&] {
    parallel_for(static_cast<int>(set.size()), ctx.config.jobs, [&](int i) {
      scores[static_cast<std::size_t>(i)] = student_scores(model, set.traces()[static_cast<std::size_t>(i)]);
    });
    return 0;
  });
  std::ofstream out(st / "decisions.jsonl", std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write decisions");
  for (std::size_t i = 0; i < set.size(); ++i) {
    const DecisionOutcome d = decide(scores[i], theta);
    json j{{"id", set.traces()[i].id}, {"hallucination", !d.predicted.is_none()}, {"theta", theta}};
    j["first_error"] = d.predicted.is_none() ? json(nullptr) : json(d.predicted.index());
    j["probs"] = scores[i];
    out << j.dump() << '\n';
  }
  out.close();
  st.commit();
  return 0;
}

int cmd_eval(const CommandContext& ctx, const EvalInputs& in) {
  ctx.config.validate();
  Staging st(ctx.out, "eval");
  LoadReport report;
  const TraceSet set = staged("load", [&] { return load_traces(in.traces, &report); });
  print_warnings(ctx, report.warnings);
  std::optional<ContrastiveLens> lens;
  std::optional<Featurizer> featurizer;
  std::optional<TeacherModel> teacher;
  std::optional<StudentModel> student;
  if (in.lens) lens = staged("load", [&] { return load_lens(*in.lens); });
  if (in.teacher) teacher = staged("load", [&] { return load_teacher(*in.teacher); });
  if (in.featurizer) {
    featurizer = staged("load", [&] { return load_featurizer(*in.featurizer); });
  } else if (lens) {
    featurizer = Featurizer{ctx.config.features, std::nullopt};
  }
  if (in.student) student = staged("load", [&] { return load_student(*in.student); });
  require((lens && teacher) || student, ErrorCode::ConfigError, "eval needs a teacher (with its lens) or a student");
  const auto rows = staged("eval", [&] {
    return eval_rows(set, in.dataset, ctx.config, lens ? &*lens : nullptr, featurizer ? &*featurizer : nullptr,
                     teacher ? &*teacher : nullptr, student ? &*student : nullptr);
  });
  write_metrics(rows, st / "metrics.csv");
  if (in.feature_dump) {
    require(lens.has_value(), ErrorCode::ConfigError, "feature dump needs a lens");
    std::map<std::string, Matrix> feats;
    for (const auto& t : set.traces()) feats[t.id] = teacher_features(*lens, *featurizer, t);
    write_feature_dump(st / in.feature_dump->filename().string(), lens->k, dump_rows(set, feats));
  }
  st.commit();
  for (const auto& r : rows)
    log_of(ctx) << r.model << ' ' << r.split << ": AUROC " << (r.auroc ? std::to_string(*r.auroc) : "NONE")
                << ", first-error accuracy " << r.first_error_accuracy << '\n';
  return 0;
}

int cmd_verify(const CommandContext& ctx, const std::string& suite, int n, bool inject_fault) {
  VerifyOptions o;
  o.suite = suite;
  o.seed = ctx.config.seed;
  o.n = n;
  o.inject_fault = inject_fault;
  o.bound_config = ctx.config.verify.bound;
  o.gamma_over_nu = ctx.config.verify.gamma_over_nu;
  o.bound_n_mc = ctx.config.verify.n_mc;
  const auto results = run_verify(o);
  bool ok = true;
  json report = json::array();
  for (const auto& r : results) {
    ok = ok && r.passed;
    log_of(ctx) << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
    for (const auto& f : r.failures) log_of(ctx) << "  " << f << '\n';
    report.push_back({{"suite", r.name}, {"passed", r.passed}, {"detail", r.detail}, {"failures", r.failures}});
  }
  Staging st(ctx.out, "verify");
  write_text(st / "verify_report.json", report.dump(2));
  st.commit();
  return ok ? 0 : 3;
}

int cmd_shift_exp(const CommandContext& ctx) {
  ctx.config.validate();
  Staging st(ctx.out, "shift-exp");
  const TraceSet set = staged("generate", [&] { return generate_traces(resolved_generator(ctx.config), ctx.config.generator.n); });
  const TeacherStage ts = fit_teacher_stage(set, ctx.config);
  const StudentStage ss = distill_student_stage(set, ts.probs, &ts.features, ctx.config);
  print_warnings(ctx, ss.warnings);
  const StudentModel inference = ss.student.without_aux();
  const SplitScores tv = score_split(set, Split::Val, ctx.config.jobs, [&](const Trace& t) { return ts.probs.at(t.id); });
  const SplitScores sv = score_split(set, Split::Val, ctx.config.jobs, [&](const Trace& t) { return student_scores(inference, t); });
  const double t_theta = choose_theta(ctx.config.eval, tv.scores, tv.traces);
  const double s_theta = choose_theta(ctx.config.eval, sv.scores, sv.traces);
  const ShiftReport r = shift_experiment(set, ts, inference, ctx.config, t_theta, s_theta);
  write_shift_report(r, st / "shift_report.json");
  const std::vector<MetricRow> rows = {r.teacher_in, r.student_in, r.teacher_shift, r.student_shift};
  write_metrics(rows, st / "shift_metrics.csv");
  st.commit();
  log_of(ctx) << "teacher AUROC drop " << r.teacher_drop() << ", student AUROC drop " << r.student_drop() << '\n';
  return 0;
}

int run_monolith(const CommandContext& ctx) {
  ctx.config.validate();
  Staging st(ctx.out, "monolith");
  const TraceSet set = generate_traces(resolved_generator(ctx.config), ctx.config.generator.n);
  write_gen_outputs(set, ctx.config, st);
  const TeacherStage ts = fit_teacher_stage(set, ctx.config);
  write_teacher_outputs(ts, set, ctx.config, st);
  const StudentStage ss = distill_student_stage(set, ts.probs, &ts.features, ctx.config);
  write_student_outputs(ss, set, ctx.config, st);
  const StudentModel inference = ss.student.without_aux();
  write_metrics(eval_rows(set, "synthetic", ctx.config, &ts.lens, &ts.featurizer, &ts.teacher, &inference),
                st / "metrics.csv");
  st.commit();
  return 0;
}

}  // namespace trajgeo
