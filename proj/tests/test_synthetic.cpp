#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "trajgeo/detect.hpp"
#include "trajgeo/eigensolver.hpp"
#include "trajgeo/error.hpp"
#include "trajgeo/rng.hpp"
#include "trajgeo/synthetic.hpp"
#include "trajgeo/transport.hpp"

#include <cmath>

using namespace trajgeo;

namespace {

SyntheticConfig small_config() {
  SyntheticConfig c;
  c.d = 16;
  c.k_true = 2;
  c.score_rank = 3;
  c.nuisance_rank = 4;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("generator is deterministic in its seed") {
  SyntheticConfig c = small_config();
  set_gamma_in_nu(c, 1.0);
  const TraceSet a = generate_traces(c, 30), b = generate_traces(c, 30);
  REQUIRE(a.size() == 30);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.traces()[i].id == b.traces()[i].id);
    CHECK(a.traces()[i].states == b.traces()[i].states);
    CHECK(a.traces()[i].labels == b.traces()[i].labels);
    CHECK(a.splits()[i] == b.splits()[i]);
  }
  c.seed = 6;
  CHECK(generate_traces(c, 30).traces()[0].states != a.traces()[0].states);

  int train = 0, val = 0;
  for (Split s : a.splits()) {
    train += s == Split::Train;
    val += s == Split::Val;
  }
  CHECK(train == 18);
  CHECK(val == 6);
  for (const auto& t : a.traces()) {
    CHECK(t.steps() >= c.m_min);
    CHECK(t.steps() <= c.m_max);
    CHECK(t.dim() == c.d);
    CHECK(*t.labels == propagate_labels(*t.labels));
    if (!t.first_error().is_none()) CHECK(t.first_error().index() > c.min_correct_prefix);
  }
}

TEST_CASE("invalid configs") {
  SyntheticConfig c = small_config();
  c.score_rank = 10;
  c.nuisance_rank = 10;
  CHECK_THROWS_AS(generate_traces(c, 5), Error);
  c = small_config();
  c.gamma = -1;
  CHECK_THROWS_AS(generate_traces(c, 5), Error);
  c = small_config();
  c.rho_recover = 1.5;
  CHECK_THROWS_AS(generate_traces(c, 5), Error);
}

TEST_CASE("no errors when p_error is zero") {
  SyntheticConfig c = small_config();
  c.p_error = 0.0;
  set_gamma_in_nu(c, 2.0);
  const TraceSet set = generate_traces(c, 50);
  for (const auto& t : set.traces()) {
    CHECK(std::all_of(t.labels->begin(), t.labels->end(), [](int y) { return y == 0; }));
    CHECK(t.first_error().is_none());
  }
}

TEST_CASE("zero margin leaves first errors indistinguishable on the ideal lens") {
  SyntheticConfig c = small_config();
  c.gamma = 0.0;
  const TraceSet set = generate_traces(c, 500);
  const Matrix e = synthetic_geometry(c).score_block();
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& t : set.traces()) {
    const FirstError tau = t.first_error();
    for (int s = 1; s <= t.steps(); ++s) {
      const bool first = !tau.is_none() && s == tau.index();
      const bool correct = tau.is_none() || s < tau.index();
      if (!first && !correct) continue;
      scores.push_back((t.states.row(s - 1) * e).norm());
      labels.push_back(first ? 1 : 0);
    }
  }
  const double a = auroc(scores, labels).value();
  MESSAGE("ideal-lens AUROC at zero margin " << a);
  CHECK(a >= 0.45);
  CHECK(a <= 0.55);
}

TEST_CASE("full recovery separates the first error from what follows") {
  SyntheticConfig c = small_config();
  c.rho_recover = 1.0;
  set_gamma_in_nu(c, 2.0);
  const OccupancyReport r = occupancy(c, 400);
  MESSAGE("outside one sigma: first error " << r.first_error_outside << ", post-error " << r.post_error_outside
                                            << ", correct " << r.correct_outside);
  CHECK(r.first_error_outside > 0.8);
  CHECK(r.post_error_outside <= r.correct_outside + 0.05);
  CHECK(r.first_error_outside > r.post_error_outside + 0.3);

  c.rho_recover = 0.1;
  const OccupancyReport slow = occupancy(c, 400);
  CHECK(slow.post_error_outside > r.post_error_outside);
}

TEST_CASE("score calibration against the population constants") {
  SyntheticConfig c = small_config();
  const CalibrationReport r = calibration_check(c, 2000);
  MESSAGE("mean " << r.mean_score << " vs mu_c " << r.mu_c << " (se " << r.se << ")");
  CHECK(r.passed);
  CHECK(std::abs(r.mean_score - r.mu_c) <= 2 * r.se);
  REQUIRE(r.u.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(r.empirical_tail[i] <= r.envelope[i]);
}

TEST_CASE("localization bound") {
  SyntheticConfig c;
  c.d = 16;
  c.m_min = 12;
  c.m_max = 12;
  c.k_true = 2;
  c.score_rank = 4;
  c.nuisance_rank = 4;
  c.p_error = 1.0;
  c.seed = 3;

  SUBCASE("large margin") {
    c.beta = 0.005;
    set_gamma_in_nu(c, 16.0);
    const BoundPoint p = localization_bound_check(c, 2000);
    MESSAGE("empirical " << p.empirical << ", bound " << p.rhs);
    CHECK(p.empirical >= 0.99);
    CHECK(p.passed);
  }
  SUBCASE("zero margin is vacuous") {
    c.gamma = 0.0;
    const BoundPoint p = localization_bound_check(c, 500);
    CHECK(p.rhs <= 0.0);
    CHECK(p.vacuous);
    CHECK(p.passed);
  }
  SUBCASE("grid sweep") {
    const BoundReport r = localization_bound_grid(c, {0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0}, 2000);
    CHECK(r.passed);
    CHECK(r.monotone);
    for (std::size_t i = 1; i < r.points.size(); ++i) {
      const double tol = 3 * std::hypot(r.points[i].se, r.points[i - 1].se);
      CHECK(r.points[i].empirical >= r.points[i - 1].empirical - tol);
    }
    for (const auto& p : r.points) CHECK(p.empirical >= p.rhs - 3 * p.se);
  }
}

TEST_CASE("eigenspace perturbation") {
  SUBCASE("no perturbation") {
    const PerturbationReport r = perturbation_check(8, 2, 1.0, {0.0}, 50, 1);
    CHECK(r.passed);
    CHECK(r.worst_dk_slack >= -1e-12);  // sin theta is roundoff-sized here
  }
  SUBCASE("diagonal instance by hand") {
    // M = diag(3, 2, 0.5, 0), E = diag(0.1, -0.1, 0.1, 0): the top two axes do not move.
    const Vector lam = (Vector(4) << 3, 2, 0.5, 0).finished();
    const Matrix m = lam.asDiagonal();
    const Matrix e = Vector((Vector(4) << 0.1, -0.1, 0.1, 0).finished()).asDiagonal();
    const Matrix u_star = top_k_eigenspace(m, 2, EigMethod::Dense).vectors;
    const Matrix u_hat = top_k_eigenspace(m + e, 2, EigMethod::Dense).vectors;
    CHECK(sin_theta(u_hat, u_star) <= 1e-12);
    const double g_hat = (u_hat.transpose() * m * u_hat).trace();
    CHECK(g_hat - (5.0 - 2 * 2 * 0.1) == doctest::Approx(0.4));

    // M = diag(2, 1.9, 0), E = diag(-0.1, 0.1, 0), k = 1: the top axis swaps.
    const Matrix m2 = Vector((Vector(3) << 2, 1.9, 0).finished()).asDiagonal();
    const Matrix e2 = Vector((Vector(3) << -0.1, 0.1, 0).finished()).asDiagonal();
    const Matrix u2 = top_k_eigenspace(m2 + e2, 1, EigMethod::Dense).vectors;
    CHECK(std::abs(u2(1, 0)) == doctest::Approx(1.0));
    const double g2 = (u2.transpose() * m2 * u2).trace();
    CHECK(g2 - (2.0 - 2 * 0.1) == doctest::Approx(0.1));  // gap 0.1 < 2 eps, so no angle claim
  }
  SUBCASE("1000 random instances") {
    const PerturbationReport r = perturbation_check(10, 3, 1.0, {0.01, 0.05, 0.1, 0.3, 0.6}, 1000, 7);
    CHECK(r.instances == 1000);
    CHECK(r.gap_violations == 0);
    CHECK(r.dk_violations == 0);
    CHECK(r.dk_checked > 0);
    CHECK(r.passed);
  }
}

TEST_CASE("shifts touch only the nuisance block") {
  SyntheticConfig c = small_config();
  c.nuisance_cue = 2.0;
  set_gamma_in_nu(c, 1.0);
  const TraceSet set = generate_traces(c, 20);
  const SyntheticGeometry g = synthetic_geometry(c);

  const TraceSet same = apply_shift(set, c, ShiftSpec{});
  for (std::size_t i = 0; i < set.size(); ++i) CHECK(same.traces()[i].states == set.traces()[i].states);

  const TraceSet moved = apply_shift(set, c, ShiftSpec{3.141592653589793, 0.5});
  const Matrix nb = g.nuisance_block(c);
  const Matrix rest = Matrix::Identity(c.d, c.d) - nb * nb.transpose();
  bool nuisance_changed = false;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Trace& a = set.traces()[i];
    const Trace& b = moved.traces()[i];
    CHECK(a.id == b.id);
    CHECK(a.labels == b.labels);
    CHECK(moved.splits()[i] == set.splits()[i]);
    CHECK(((b.states - a.states) * rest).cwiseAbs().maxCoeff() <= 1e-10);
    nuisance_changed |= ((b.states - a.states) * nb).cwiseAbs().maxCoeff() > 1e-3;
  }
  CHECK(nuisance_changed);
}
