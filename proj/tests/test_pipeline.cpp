#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "trajgeo/error.hpp"
#include "trajgeo/lens.hpp"
#include "trajgeo/nets.hpp"
#include "trajgeo/pipeline.hpp"

#include <json.hpp>

#include <sstream>

using namespace trajgeo;
using testutil::run_cli;
using testutil::slurp;
using testutil::spit;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

/// Tiny preset taken through gen, fit-teacher and distill-student once.
struct TinyRun {
  testutil::TempDir dir{"pipeline"};
  fs::path gen, fit, student;
  TinyRun() {
    gen = dir / "gen";
    fit = dir / "fit";
    student = dir / "student";
    REQUIRE(run_cli("--preset tiny --out " + q(gen) + " gen") == 0);
    REQUIRE(run_cli("--preset tiny --out " + q(fit) + " fit-teacher --traces " + q(gen / "traces.json")) == 0);
    REQUIRE(run_cli("--preset tiny --out " + q(student) + " distill-student --traces " + q(gen / "traces.json") +
                    " --teacher-probs " + q(fit / "teacher_probs.csv") + " --features " +
                    q(fit / "teacher_features.csv")) == 0);
  }
  std::string eval_args() const {
    return " eval --traces " + q(gen / "traces.json") + " --lens " + q(fit / "lens.json") + " --featurizer " +
           q(fit / "featurizer.json") + " --teacher " + q(fit / "teacher.json") + " --student " +
           q(student / "student.json");
  }
};

TinyRun& tiny() {
  static TinyRun run;
  return run;
}

std::vector<fs::path> files_in(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> out;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

}  // namespace

TEST_CASE("separate commands reproduce the in-process pipeline byte for byte") {
  TinyRun& t = tiny();
  const fs::path ev = t.dir / "eval", mono = t.dir / "mono";
  REQUIRE(run_cli("--preset tiny --out " + q(ev) + t.eval_args()) == 0);
  REQUIRE(run_cli("--preset tiny --out " + q(mono) + " run") == 0);
  int compared = 0;
  for (const auto& f : files_in(mono)) {
    const std::string name = f.filename().string();
    for (const fs::path& d : {t.gen, t.fit, t.student, ev})
      if (fs::exists(d / name)) {
        CHECK_MESSAGE(slurp(d / name) == slurp(f), name);
        ++compared;
      }
  }
  CHECK(compared == static_cast<int>(files_in(mono).size()));
}

TEST_CASE("reruns are identical, with any worker count") {
  TinyRun& t = tiny();
  const fs::path a = t.dir / "again", b = t.dir / "jobs";
  REQUIRE(run_cli("--preset tiny --out " + q(a) + " run") == 0);
  REQUIRE(run_cli("--preset tiny --jobs 3 --out " + q(b) + " run") == 0);
  for (const auto& f : files_in(a)) {
    const std::string name = f.filename().string();
    const fs::path ref = fs::exists(t.gen / name) ? t.gen / name : fs::exists(t.fit / name) ? t.fit / name : t.student / name;
    if (fs::exists(ref)) CHECK_MESSAGE(slurp(ref) == slurp(f), name);
    if (name != "config.json") CHECK_MESSAGE(slurp(b / name) == slurp(f), name);  // it records the job count
  }
  for (const auto& d : {a, b})
    for (const auto& f : files_in(d)) CHECK(f.filename().string().rfind(".staging", 0) != 0);
}

TEST_CASE("teacher outputs") {
  TinyRun& t = tiny();
  const ProbTable probs = read_prob_table(t.fit / "teacher_probs.csv");
  const TraceSet set = load_traces(t.gen / "traces.json");
  CHECK(probs.size() == set.size());
  for (const auto& tr : set.traces()) CHECK(aligned_probs(probs, tr).size() == static_cast<std::size_t>(tr.steps()));
  const std::string metrics = slurp(t.fit / "teacher_metrics.csv");
  CHECK(metrics.rfind("model,dataset,split,auroc,first_error_accuracy,theta,n_traces,n_steps\n", 0) == 0);
  CHECK(metrics.find("teacher,synthetic,train,") != std::string::npos);
  CHECK(metrics.find("teacher,synthetic,val,") != std::string::npos);
  CHECK(slurp(t.student / "student.json").find("aux.") == std::string::npos);
  const json cfg = json::parse(slurp(t.gen / "config.json"));
  CHECK(cfg["name"] == "tiny");
}

TEST_CASE("lambda = 1 ignores the teacher file") {
  TinyRun& t = tiny();
  spit(t.dir / "sup.json", R"({"preset": "tiny", "student": {"lambda": 1.0, "beta_aux": 0.0}})");
  const std::string base = "--config " + q(t.dir / "sup.json") + " --out ";
  const std::string traces = " distill-student --traces " + q(t.gen / "traces.json");
  REQUIRE(run_cli(base + q(t.dir / "sup_a") + traces, t.dir / "sup_a.log") == 0);
  REQUIRE(run_cli(base + q(t.dir / "sup_b") + traces + " --teacher-probs " + q(t.fit / "teacher_probs.csv"),
                  t.dir / "sup_b.log") == 0);
  CHECK(slurp(t.dir / "sup_b.log").find("warning: lambda = 1") != std::string::npos);
  CHECK(slurp(t.dir / "sup_a" / "student.json") == slurp(t.dir / "sup_b" / "student.json"));
  CHECK(run_cli("--preset tiny --out " + q(t.dir / "sup_c") + traces) == 2);
}

TEST_CASE("stage failures are tagged and leave no outputs") {
  TinyRun& t = tiny();
  const fs::path out = t.dir / "bad_k";
  CHECK(run_cli("--preset tiny --out " + q(out) + " fit-teacher --k 50 --traces " + q(t.gen / "traces.json"),
                t.dir / "bad_k.log") == 2);
  CHECK(slurp(t.dir / "bad_k.log").find("[lens]") != std::string::npos);
  CHECK((!fs::exists(out) || fs::is_empty(out)));

  // rows of the first trace removed entirely: the table parses, the lookup fails
  std::istringstream rows(slurp(t.fit / "teacher_probs.csv"));
  std::string line, kept;
  while (std::getline(rows, line))
    if (line.rfind("syn-000000,", 0) != 0) kept += line + "\n";
  spit(t.dir / "short_probs.csv", kept);
  const fs::path out2 = t.dir / "misaligned";
  CHECK(run_cli("--preset tiny --out " + q(out2) + " distill-student --traces " + q(t.gen / "traces.json") +
                    " --teacher-probs " + q(t.dir / "short_probs.csv"),
                t.dir / "misaligned.log") == 2);
  CHECK(slurp(t.dir / "misaligned.log").find("[align]") != std::string::npos);
  CHECK((!fs::exists(out2) || fs::is_empty(out2)));

  CHECK(run_cli("--preset no-such-preset --out " + q(t.dir / "np") + " gen") == 2);
  CHECK(run_cli("--preset tiny --out " + q(t.dir / "nf") + " fit-teacher --traces " + q(t.dir / "missing.json")) == 2);
  CHECK(run_cli("--preset tiny frobnicate") == 2);
}

TEST_CASE("full-rank lens on tiny data") {
  TinyRun& t = tiny();
  const fs::path out = t.dir / "full";
  REQUIRE(run_cli("--preset tiny --out " + q(out) + " fit-teacher --k 12 --eig-method dense --traces " +
                  q(t.gen / "traces.json")) == 0);
  const ContrastiveLens lens = load_lens(out / "lens.json");
  CHECK(lens.k == 12);
  CHECK((lens.u * lens.u.transpose() - Matrix::Identity(12, 12)).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("infer") {
  TinyRun& t = tiny();
  const fs::path model = t.student / "student.json";

  SUBCASE("labels in the input are never read") {
    std::istringstream in(slurp(t.gen / "traces.jsonl"));
    std::string line, corrupted;
    int i = 0;
    while (std::getline(in, line)) {
      json j = json::parse(line);
      if (i % 3 == 0) j["labels"] = "not labels";
      else if (i % 3 == 1) j["labels"] = std::vector<int>{7, 7};
      else j.erase("labels");
      corrupted += j.dump() + "\n";
      ++i;
    }
    spit(t.dir / "corrupt.jsonl", corrupted);
    REQUIRE(run_cli("--preset tiny --out " + q(t.dir / "inf_a") + " infer --student " + q(model) + " --traces " +
                    q(t.gen / "traces.jsonl")) == 0);
    REQUIRE(run_cli("--preset tiny --out " + q(t.dir / "inf_b") + " infer --student " + q(model) + " --traces " +
                    q(t.dir / "corrupt.jsonl")) == 0);
    CHECK(slurp(t.dir / "inf_a" / "decisions.jsonl") == slurp(t.dir / "inf_b" / "decisions.jsonl"));
    const auto rows = read_jsonl(t.dir / "inf_a" / "decisions.jsonl");
    CHECK(rows.size() == static_cast<std::size_t>(i));
    for (const auto& r : rows) CHECK(r["hallucination"].get<bool>() == !r["first_error"].is_null());
  }
  SUBCASE("empty trace file") {
    spit(t.dir / "empty.jsonl", "");
    REQUIRE(run_cli("--out " + q(t.dir / "inf_empty") + " infer --student " + q(model) + " --traces " +
                    q(t.dir / "empty.jsonl")) == 0);
    CHECK(slurp(t.dir / "inf_empty" / "decisions.jsonl").empty());
  }
  SUBCASE("width mismatch") {
    std::vector<Trace> wrong(1);
    wrong[0].id = "w";
    wrong[0].states = Matrix::Ones(3, 5);
    write_trace_file(t.dir / "wrong.jsonl", wrong);
    CHECK(run_cli("--out " + q(t.dir / "inf_wrong") + " infer --student " + q(model) + " --traces " +
                  q(t.dir / "wrong.jsonl")) == 2);
  }
  SUBCASE("crafted crossing at step 4") {
    // One forward unit whose cell follows tanh(3 x_1); the head fires only when x_1 is large.
    StudentTopology topo;
    topo.input_dim = 3;
    topo.hidden = 1;
    topo.layers = 1;
    topo.head_hidden = 1;
    StudentModel m(topo, 0);
    for (auto& p : m.params()) p.value.setZero();
    Matrix& b = m.params().get("l0.fwd.b").value;
    b(0, 0) = 10;   // input gate open
    b(1, 0) = -10;  // forget gate shut
    b(3, 0) = 10;   // output gate open
    m.params().get("l0.fwd.wx").value(2, 0) = 3.0;
    m.params().get("head.w1").value(0, 0) = 1.0;
    m.params().get("head.w2").value(0, 0) = 20.0;
    m.params().get("head.b2").value(0, 0) = -5.0;
    save_student(m, t.dir / "crafted.json");

    std::vector<Trace> traces(2);
    traces[0].id = "spike";
    traces[0].states = Matrix::Zero(6, 3);
    traces[0].states(3, 0) = 2.0;
    traces[1].id = "flat";
    traces[1].states = Matrix::Zero(6, 3);
    write_trace_file(t.dir / "crafted.jsonl", traces);
    REQUIRE(run_cli("--out " + q(t.dir / "inf_crafted") + " infer --student " + q(t.dir / "crafted.json") +
                    " --traces " + q(t.dir / "crafted.jsonl")) == 0);
    const auto rows = read_jsonl(t.dir / "inf_crafted" / "decisions.jsonl");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0]["id"] == "spike");
    CHECK(rows[0]["first_error"] == 4);
    CHECK(rows[0]["hallucination"] == true);
    CHECK(rows[1]["first_error"].is_null());
    CHECK(rows[1]["hallucination"] == false);
    for (double p : rows[1]["probs"].get<std::vector<double>>()) CHECK(p < 0.5);
  }
}

TEST_CASE("eval on a single labeled trace") {
  TinyRun& t = tiny();
  const TraceSet set = load_traces(t.gen / "traces.json");
  std::vector<Trace> one;
  for (const auto& tr : set.traces())
    if (!tr.first_error().is_none()) {
      one.push_back(tr);
      break;
    }
  write_trace_file(t.dir / "one.jsonl", one);
  const fs::path out = t.dir / "eval_one";
  REQUIRE(run_cli("--preset tiny --out " + q(out) + " eval --traces " + q(t.dir / "one.jsonl") + " --lens " +
                  q(t.fit / "lens.json") + " --featurizer " + q(t.fit / "featurizer.json") + " --teacher " +
                  q(t.fit / "teacher.json") + " --student " + q(t.student / "student.json") +
                  " --feature-dump features.csv") == 0);
  std::istringstream in(slurp(out / "metrics.csv"));
  std::string line;
  std::getline(in, line);
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    REQUIRE(cells.size() == 8);
    CHECK((cells[4] == "0" || cells[4] == "1"));
    CHECK(cells[6] == "1");
  }
  CHECK(rows == 2);
  int k = 0;
  const auto dump = read_feature_dump(out / "features.csv", &k);
  CHECK(k == 4);
  CHECK(dump.size() == static_cast<std::size_t>(one[0].steps()));
}

TEST_CASE("config files") {
  testutil::TempDir dir("config");
  spit(dir / "c.json", R"({"preset": "tiny", "lens": {"k": 3}, "student": {"tau_d": 1.5}})");
  const RunConfig c = load_run_config(dir / "c.json");
  const RunConfig tiny_cfg = load_preset("tiny");
  CHECK(c.lens.k == 3);
  CHECK(c.student_train.tau_d == 1.5);
  CHECK(c.student_topology.hidden == tiny_cfg.student_topology.hidden);
  CHECK(c.generator.n == tiny_cfg.generator.n);
  CHECK(c.seed == tiny_cfg.seed);
  CHECK(c.teacher_train.seed == tiny_cfg.teacher_train.seed);

  spit(dir / "s.json", R"({"preset": "tiny", "seed": 99})");
  const RunConfig s = load_run_config(dir / "s.json");
  CHECK(s.seed == 99);
  CHECK(s.teacher_train.seed != tiny_cfg.teacher_train.seed);
  CHECK(s.generator.config.seed != tiny_cfg.generator.config.seed);

  // a run config round-trips through its own serialization
  spit(dir / "round.json", run_config_json(c));
  CHECK(run_config_json(load_run_config(dir / "round.json")) == run_config_json(c));

  spit(dir / "typo.json", R"({"student": {"lamda": 0.3}})");
  CHECK_THROWS_AS(load_run_config(dir / "typo.json"), Error);
  spit(dir / "range.json", R"({"lens": {"rho": 2.0}})");
  CHECK_THROWS_AS(load_run_config(dir / "range.json"), Error);
  spit(dir / "broken.json", R"({"lens": )");
  CHECK_THROWS_AS(load_run_config(dir / "broken.json"), Error);
  CHECK(run_cli("--config " + q(dir / "typo.json") + " --out " + q(dir / "o") + " gen") == 2);
}

TEST_CASE("verify from the command line") {
  testutil::TempDir dir("verify");
  CHECK(run_cli("--out " + q(dir.path()) + " verify --suite cpca --n 2000") == 0);
  const json report = json::parse(slurp(dir / "verify_report.json"));
  REQUIRE(report.size() == 1);
  CHECK(report[0]["passed"] == true);
  CHECK(run_cli("--out " + q(dir / "fault") + " verify --suite cpca --inject-fault", dir / "fault.log") == 3);
  CHECK(slurp(dir / "fault.log").find("FAIL") != std::string::npos);
}

TEST_CASE("identity shift changes nothing") {
  testutil::TempDir dir("shift");
  REQUIRE(run_cli("--preset tiny --out " + q(dir.path()) + " shift-exp") == 0);
  const json r = json::parse(slurp(dir / "shift_report.json"));
  CHECK(std::abs(r["teacher"]["auroc_drop"].get<double>()) <= 0.02);
  CHECK(std::abs(r["student"]["auroc_drop"].get<double>()) <= 0.02);
  CHECK(r["agreement"]["uncertified_fraction_in"] == r["agreement"]["uncertified_fraction_shifted"]);
}
