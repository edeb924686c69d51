#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "trajgeo/detect.hpp"
#include "trajgeo/error.hpp"
#include "trajgeo/gradient_check.hpp"
#include "trajgeo/nets.hpp"
#include "trajgeo/rng.hpp"
#include "trajgeo/training.hpp"

#include <cmath>

using namespace trajgeo;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::Io;
}

StudentTopology tiny_topology(int d, int aux = 0) {
  StudentTopology t;
  t.input_dim = d;
  t.hidden = 4;
  t.layers = 2;
  t.head_hidden = 3;
  t.aux_dim = aux;
  return t;
}

std::vector<int> prefix_labels(int m, int tau) {
  std::vector<int> y(static_cast<std::size_t>(m), 0);
  if (tau > 0)
    for (int t = tau; t <= m; ++t) y[static_cast<std::size_t>(t - 1)] = 1;
  return y;
}

/// Pooled step-level AUROC of `scores` against per-trace labels.
template <class Ex, class F>
double pooled_auroc(std::span<const Ex> set, F score) {
  std::vector<double> s;
  std::vector<int> y;
  for (const auto& ex : set) {
    const Vector p = score(ex);
    const auto& labels = [&]() -> const std::vector<int>& {
      if constexpr (requires { ex.labels.value(); }) return *ex.labels;
      else return ex.labels;
    }();
    for (Eigen::Index t = 0; t < p.size(); ++t) {
      s.push_back(p(t));
      y.push_back(labels[static_cast<std::size_t>(t)]);
    }
  }
  return auroc(s, y).value();
}

std::vector<TeacherExample> separable_features(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TeacherExample> out;
  for (int i = 0; i < n; ++i) {
    const int m = rng.uniform_int(4, 9);
    const int tau = rng.bernoulli(0.5) ? rng.uniform_int(2, m) : 0;
    TeacherExample ex{rng.gaussian(m, 5), prefix_labels(m, tau)};
    for (int t = 0; t < m; ++t) ex.features(t, 2) = ex.labels[static_cast<std::size_t>(t)] ? 1.0 + rng.uniform() : -1.0 - rng.uniform();
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<StudentExample> separable_states(int n, std::uint64_t seed, double teacher_const = -1.0) {
  Rng rng(seed);
  std::vector<StudentExample> out;
  for (int i = 0; i < n; ++i) {
    const int m = rng.uniform_int(4, 8);
    const int tau = rng.bernoulli(0.5) ? rng.uniform_int(2, m) : 0;
    StudentExample ex;
    ex.labels = prefix_labels(m, tau);
    ex.states = rng.gaussian(m, 4) * 0.5;
    ex.teacher_probs.resize(m);
    for (int t = 0; t < m; ++t) {
      const int y = (*ex.labels)[static_cast<std::size_t>(t)];
      ex.states(t, 1) += y ? 2.0 : -2.0;
      ex.teacher_probs(t) = teacher_const >= 0 ? teacher_const : (y ? 0.9 : 0.1);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

bool same_params(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].name != b[i].name || a[i].value != b[i].value) return false;
  return true;
}

}  // namespace

TEST_CASE("teacher forward") {
  TeacherModel t(9, 6, 5, 42);
  Rng rng(7);
  const Matrix x = rng.gaussian(4, 9);

  SUBCASE("golden replay") {
    const double golden[] = {0x1.1aab0ecc7a411p-2, 0x1.b5be0332a8b1ep-4, 0x1.e0f4fbf9d34eep-3, 0x1.887740c3ede1dp-2};
    const Vector p = t.forward(x);
    for (int i = 0; i < 4; ++i) CHECK(p(i) == golden[i]);
  }
  SUBCASE("zero weights give one half") {
    for (auto& p : t.params()) p.value.setZero();
    CHECK((t.forward(x).array() == 0.5).all());
  }
  SUBCASE("saturating bias") {
    t.params().get("b3").value(0, 0) = 60.0;
    const Vector p = t.forward(x);
    CHECK((p.array() >= 1.0 - 1e-6).all());
    CHECK((p.array() <= 1.0).all());
  }
  SUBCASE("outputs in the open unit interval") {
    const Vector p = t.forward(rng.gaussian(50, 9));
    CHECK((p.array() > 0.0).all());
    CHECK((p.array() < 1.0).all());
  }
  SUBCASE("width mismatch") { CHECK(code_of([&] { t.forward(Matrix::Zero(2, 8)); }) == ErrorCode::DimensionMismatch); }
}

TEST_CASE("student forward") {
  StudentModel s(tiny_topology(5), 43);
  Rng rng(8);
  const Matrix h = rng.gaussian(6, 5);

  SUBCASE("golden replay") {
    const double golden[] = {0x1.04268c8be9cacp-1, 0x1.0a8c4f424ee82p-1, 0x1.0a56da86327e1p-1,
                             0x1.08c77a567f812p-1, 0x1.08cf40984eb61p-1, 0x1.066a4cf96bd0cp-1};
    const auto out = s.forward(h);
    for (int i = 0; i < 6; ++i) CHECK(out.probs(i) == golden[i]);
  }
  SUBCASE("single step") {
    const auto out = s.forward(h.topRows(1));
    REQUIRE(out.probs.size() == 1);
    CHECK(std::isfinite(out.probs(0)));
    CHECK(out.probs(0) > 0.0);
    CHECK(out.probs(0) < 1.0);
  }
  SUBCASE("the last step reaches the first output") {
    Matrix h2 = h;
    h2.row(5) += Eigen::RowVectorXd::Constant(5, 1.0);
    CHECK(s.forward(h2).probs(0) != s.forward(h).probs(0));
  }
  SUBCASE("mirrored model on the reversed trace") {
    const StudentModel mirror = s.mirrored();
    const Vector fwd = s.forward(h).probs;
    const Vector rev = mirror.forward(h.colwise().reverse()).probs;
    CHECK((fwd - rev.reverse()).cwiseAbs().maxCoeff() <= 1e-10);
  }
  SUBCASE("errors") {
    CHECK(code_of([&] { s.forward(Matrix::Zero(3, 4)); }) == ErrorCode::DimensionMismatch);
    CHECK(code_of([&] { s.forward(Matrix::Zero(0, 5)); }) == ErrorCode::MissingStates);
  }
  SUBCASE("aux head only in training form") {
    StudentModel a(tiny_topology(5, 7), 1);
    CHECK(a.forward(h).aux.cols() == 7);
    CHECK_FALSE(a.without_aux().has_aux());
    CHECK(a.without_aux().forward(h).probs == a.forward(h).probs);
  }
}

TEST_CASE("finite-difference gradient checks") {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto t = gradient_check(ModelKind::Teacher, 1e-4, seed);
    CHECK_MESSAGE(t.passed, format_report(t));
    const auto s = gradient_check(ModelKind::Student, 1e-4, seed);
    CHECK_MESSAGE(s.passed, format_report(s));
    bool saw_backward = false, saw_aux = false;
    for (const auto& b : s.blocks) {
      saw_backward |= b.name.find("bwd") != std::string::npos;
      saw_aux |= b.name.rfind("aux.", 0) == 0;
    }
    CHECK(saw_backward);
    CHECK(saw_aux);
  }
  const auto z = gradient_check(ModelKind::Student, 1e-4, 0, /*zero_input=*/true);
  CHECK(z.finite);
  const auto zt = gradient_check(ModelKind::Teacher, 1e-4, 0, /*zero_input=*/true);
  CHECK(zt.finite);
}

TEST_CASE("model files round trip") {
  testutil::TempDir dir("nets");
  Rng rng(9);
  TeacherModel t(7, 5, 4, 3);
  t.input_norm() = Standardizer::fit(rng.gaussian(30, 7) * 2.0);
  save_teacher(t, dir / "t.json");
  const TeacherModel tb = load_teacher(dir / "t.json");
  const Matrix x = rng.gaussian(5, 7);
  CHECK(tb.forward(x) == t.forward(x));
  save_teacher(tb, dir / "t2.json");
  CHECK(testutil::slurp(dir / "t.json") == testutil::slurp(dir / "t2.json"));

  StudentModel s(tiny_topology(4, 6), 5);
  save_student(s, dir / "s.json");
  const StudentModel sb = load_student(dir / "s.json");
  CHECK_FALSE(sb.has_aux());
  CHECK(testutil::slurp(dir / "s.json").find("aux.w") == std::string::npos);
  const Matrix h = rng.gaussian(5, 4);
  CHECK(sb.forward(h).probs == s.forward(h).probs);

  testutil::spit(dir / "bad.json", R"({"format":"trajgeo-model","kind":"student","version":1})");
  CHECK_THROWS_AS(load_teacher(dir / "bad.json"), Error);
}

TEST_CASE("teacher training") {
  const auto train = separable_features(60, 1), val = separable_features(20, 2);
  TrainConfig c;
  c.max_epochs = 200;
  c.seed = 4;
  TrainLog log;
  const TeacherModel t = train_teacher(train, val, c, {16, 16}, &log);
  const double a = pooled_auroc<TeacherExample>(train, [&](const TeacherExample& ex) { return t.forward(ex.features); });
  CHECK(a >= 0.99);
  CHECK(log.epochs.size() <= 200);
  REQUIRE(log.best_val_auroc.has_value());
  REQUIRE(log.epochs.back().val_auroc.has_value());
  CHECK(*log.best_val_auroc >= *log.epochs.back().val_auroc);

  SUBCASE("same seed, same parameters") {
    const TeacherModel again = train_teacher(train, val, c, {16, 16});
    CHECK(same_params(again.params(), t.params()));
  }
  SUBCASE("single-class labels") {
    auto zero_train = train, zero_val = val;
    for (auto* set : {&zero_train, &zero_val})
      for (auto& ex : *set) std::fill(ex.labels.begin(), ex.labels.end(), 0);
    c.max_epochs = 30;
    TrainLog zlog;
    const TeacherModel z = train_teacher(zero_train, zero_val, c, {16, 16}, &zlog);
    CHECK_FALSE(zlog.best_val_auroc.has_value());
    for (const auto& ex : zero_val) CHECK((z.forward(ex.features).array() <= 0.5).all());
  }
}

TEST_CASE("student training") {
  TrainConfig c;
  c.max_epochs = 40;
  c.patience = 40;
  c.learning_rate = 5e-3;
  c.seed = 6;
  c.beta_aux = 0.0;
  StudentTopology topo;
  topo.hidden = 8;
  topo.layers = 1;
  topo.head_hidden = 8;

  SUBCASE("pure supervision on separable states") {
    const auto train = separable_states(40, 1), val = separable_states(20, 2);
    c.lambda = 1.0;
    const StudentModel s = train_student(train, val, c, topo);
    const double a = pooled_auroc<StudentExample>(val, [&](const StudentExample& ex) { return s.forward(ex.states).probs; });
    CHECK(a >= 0.95);
  }
  SUBCASE("uninformative teacher") {
    // without labels the snapshot is picked on distillation loss rather than a noise AUROC
    auto train = separable_states(40, 3, 0.5), val = separable_states(20, 4, 0.5);
    for (auto* set : {&train, &val})
      for (auto& ex : *set) ex.labels.reset();
    c.lambda = 0.0;
    const StudentModel s = train_student(train, val, c, topo);
    double worst = 0;
    for (const auto& ex : val) worst = std::max(worst, (s.forward(ex.states).probs.array() - 0.5).abs().maxCoeff());
    MESSAGE("max |p - 0.5| = " << worst);
    CHECK(worst <= 0.05);
  }
  SUBCASE("seeded distillation is reproducible") {
    const auto train = separable_states(20, 5), val = separable_states(10, 6);
    c.lambda = 0.5;
    c.tau_d = 2.0;
    c.max_epochs = 5;
    const StudentModel a = train_student(train, val, c, topo), b = train_student(train, val, c, topo);
    CHECK(same_params(a.params(), b.params()));
  }
  SUBCASE("misaligned teacher probabilities") {
    auto train = separable_states(10, 7), val = separable_states(5, 8);
    train[3].teacher_probs.conservativeResize(train[3].teacher_probs.size() - 1);
    c.lambda = 0.5;
    CHECK_THROWS_AS(train_student(train, val, c, topo), Error);
  }
}
