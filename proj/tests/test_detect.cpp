#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "trajgeo/detect.hpp"
#include "trajgeo/error.hpp"
#include "trajgeo/rng.hpp"

#include <cmath>

using namespace trajgeo;

namespace {

std::optional<double> pair_count_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0;
  long long pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        ++pairs;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  if (pairs == 0) return std::nullopt;
  return wins / static_cast<double>(pairs);
}

FirstError naive_crossing(const std::vector<double>& s, double theta) {
  for (std::size_t t = 0; t < s.size(); ++t)
    if (s[t] >= theta) return FirstError::at(static_cast<int>(t) + 1);
  return FirstError::none();
}

}  // namespace

TEST_CASE("first crossing") {
  const std::vector<double> s = {0.1, 0.6, 0.4};
  CHECK(first_crossing(s, 0.5) == FirstError::at(2));
  CHECK(first_crossing(s, 0.7).is_none());
  const std::vector<double> edge = {0.5, 0.2};
  CHECK(first_crossing(edge, 0.5) == FirstError::at(1));
  CHECK(first_crossing(std::vector<double>{}, 0.5).is_none());

  const auto out = decide(s, 0.5);
  CHECK(out.decisions == std::vector<int>{0, 1, 0});
  CHECK(out.predicted == FirstError::at(2));
  CHECK(out.theta == 0.5);

  Rng rng(1);
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<double> r;
    for (int t = 0; t < 1 + rep % 12; ++t) r.push_back(std::round(rng.uniform() * 20) / 20);
    const double a = std::round(rng.uniform() * 20) / 20, b = std::round(rng.uniform() * 20) / 20;
    CHECK(first_crossing(r, a) == naive_crossing(r, a));
    CHECK(first_crossing(r, std::min(a, b)).rank() <= first_crossing(r, std::max(a, b)).rank());
  }
}

TEST_CASE("teacher margin") {
  CHECK(teacher_margin(std::vector<double>{0.2, 0.9}, 0.5) == doctest::Approx(0.3));
  CHECK(teacher_margin(std::vector<double>{0.2, 0.5, 0.9}, 0.5) == 0.0);
  Rng rng(2);
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<double> s;
    for (int t = 0; t < 1 + rep % 9; ++t) s.push_back(std::round(rng.uniform() * 10) / 10);
    const double theta = std::round(rng.uniform() * 10) / 10;
    double naive = std::abs(s[0] - theta);
    bool hit = false;
    for (double v : s) {
      naive = std::min(naive, std::abs(v - theta));
      hit |= v == theta;
    }
    CHECK(teacher_margin(s, theta) == naive);
    CHECK((teacher_margin(s, theta) == 0.0) == hit);
  }
  CHECK_THROWS_AS(teacher_margin(std::vector<double>{}, 0.5), Error);
}

TEST_CASE("agreement certificate examples") {
  const std::vector<double> t = {0.2, 0.8, 0.9};  // margin 0.3
  auto c = agreement_certificate(t, t, 0.5);
  CHECK(c.certified);
  CHECK(c.deviation == 0.0);
  CHECK(c.margin == doctest::Approx(0.3));

  const std::vector<double> close = {0.3, 0.7, 0.8};
  c = agreement_certificate(t, close, 0.5);
  CHECK(c.certified);
  CHECK(first_crossing(t, 0.5) == first_crossing(close, 0.5));

  const std::vector<double> far = {0.6, 0.8, 0.9};
  c = agreement_certificate(t, far, 0.5);
  CHECK_FALSE(c.certified);
  CHECK(c.deviation == doctest::Approx(0.4));

  const std::vector<double> exact = {0.5, 0.8, 0.9};  // deviation equal to the margin is not strict
  CHECK_FALSE(agreement_certificate(t, exact, 0.5).certified);

  bool threw = false;
  try {
    agreement_certificate(t, std::vector<double>{0.1}, 0.5);
  } catch (const Error& e) {
    threw = e.code() == ErrorCode::LengthMismatch;
  }
  CHECK(threw);
}

TEST_CASE("agreement certificate soundness on random certified pairs") {
  Rng rng(3);
  int certified = 0, mismatches = 0;
  for (int i = 0; i < 10000; ++i) {
    const int m = 1 + i % 10;
    const double theta = rng.uniform(0.2, 0.8);
    std::vector<double> t, s;
    for (int k = 0; k < m; ++k) t.push_back(rng.uniform());
    const double margin = teacher_margin(t, theta);
    for (int k = 0; k < m; ++k) s.push_back(t[static_cast<std::size_t>(k)] + rng.uniform(-1, 1) * margin * 0.999);
    const auto c = agreement_certificate(t, s, theta);
    if (!c.certified) continue;
    ++certified;
    const auto dt = decide(t, theta), ds = decide(s, theta);
    mismatches += dt.decisions != ds.decisions || dt.predicted != ds.predicted;
  }
  CHECK(certified == 10000);
  CHECK(mismatches == 0);
}

TEST_CASE("auroc") {
  CHECK(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0);
  CHECK(auroc(std::vector<double>(6, 0.3), std::vector<int>{0, 1, 0, 1, 1, 0}) == 0.5);
  CHECK_FALSE(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}).has_value());
  CHECK_FALSE(auroc(std::vector<double>{}, std::vector<int>{}).has_value());

  Rng rng(4);
  for (int rep = 0; rep < 100; ++rep) {
    const int n = 2 + rep % 40;
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < n; ++i) {
      s.push_back(std::round(rng.uniform() * 8) / 8);  // plenty of ties
      y.push_back(rng.bernoulli(0.4) ? 1 : 0);
    }
    const auto expect = pair_count_auroc(s, y);
    const auto got = auroc(s, y);
    REQUIRE(got.has_value() == expect.has_value());
    if (expect) {
      CHECK(*got == doctest::Approx(*expect).epsilon(1e-14));
      std::vector<double> warped;
      for (double v : s) warped.push_back(std::exp(3 * v) - 7);
      CHECK(*auroc(warped, y) == doctest::Approx(*got).epsilon(1e-14));
    }
  }
}

TEST_CASE("first-error accuracy") {
  const std::vector<FirstError> truth = {FirstError::at(2), FirstError::none(), FirstError::at(5), FirstError::at(1)};
  CHECK(first_error_accuracy(truth, truth) == 1.0);
  const std::vector<FirstError> off = {FirstError::at(3), FirstError::at(1), FirstError::at(4), FirstError::at(2)};
  CHECK(first_error_accuracy(off, truth) == 0.0);
  const std::vector<FirstError> mixed = {FirstError::at(2), FirstError::none(), FirstError::none(), FirstError::at(2)};
  CHECK(first_error_accuracy(mixed, truth) == 0.5);
  CHECK(first_error_accuracy(off, truth, 1) == 0.75);  // NONE vs 1 never matches
  CHECK_THROWS_AS(first_error_accuracy(mixed, std::span<const FirstError>(truth).first(3)), Error);
}

TEST_CASE("threshold selection") {
  SUBCASE("exhaustive oracle on single traces") {
    Rng rng(5);
    for (int rep = 0; rep < 200; ++rep) {
      ScoredTrace tr;
      const int m = 1 + rep % 7;
      for (int t = 0; t < m; ++t) tr.scores.push_back(rng.uniform());
      tr.truth = rng.bernoulli(0.3) ? FirstError::none() : FirstError::at(rng.uniform_int(1, m));
      double best_acc = -1, best = 0;
      for (int i = 0; i <= 100; ++i) {
        const double th = i / 100.0;
        const double acc = first_crossing(tr.scores, th) == tr.truth ? 1.0 : 0.0;
        const bool better = acc > best_acc ||
                            (acc == best_acc && (std::abs(th - 0.5) < std::abs(best - 0.5) - 1e-12));
        if (better) {
          best_acc = acc;
          best = th;
        }
      }
      const std::vector<ScoredTrace> val = {tr};
      CHECK(select_threshold(val) == doctest::Approx(best).epsilon(1e-12));
    }
  }
  SUBCASE("all-correct traces") {
    std::vector<ScoredTrace> low = {{{0.1, 0.3}, FirstError::none()}, {{0.2}, FirstError::none()}};
    CHECK(select_threshold(low) == doctest::Approx(0.5));
    std::vector<ScoredTrace> high = {{{0.1, 0.7}, FirstError::none()}, {{0.65}, FirstError::none()}};
    CHECK(select_threshold(high) == doctest::Approx(0.71));
  }
  SUBCASE("ties prefer the smaller threshold at equal distance") {
    // correct for theta in (0.3, 0.4] and for theta in (0.6, 0.7]
    std::vector<ScoredTrace> val = {{{0.3, 0.4, 0.7}, FirstError::at(2)}, {{0.6, 0.7}, FirstError::at(2)}};
    CHECK(select_threshold(val) == doctest::Approx(0.4));
  }
  SUBCASE("no validation traces") { CHECK(select_threshold(std::vector<ScoredTrace>{}) == 0.5); }
}
