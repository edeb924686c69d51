#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "trajgeo/error.hpp"
#include "trajgeo/losses.hpp"
#include "trajgeo/rng.hpp"

#include <cmath>

using namespace trajgeo;

namespace {

/// Five-point central difference of f at x along coordinate i.
template <class F>
double numeric_partial(F f, Vector x, Eigen::Index i, double h = 1e-4) {
  auto at = [&](double s) {
    Vector y = x;
    y(i) += s;
    return f(y);
  };
  return (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
}

double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); }

}  // namespace

TEST_CASE("binary cross-entropy by hand") {
  const std::vector<int> y = {0, 1, 1, 0, 1};
  Vector p(5);
  for (int t = 0; t < 5; ++t) p(t) = y[static_cast<std::size_t>(t)];
  const auto perfect = bce_loss(p, y);
  CHECK(perfect.loss >= 0.0);
  CHECK(perfect.loss <= 5 * 1e-6);

  const auto half = bce_loss(Vector::Constant(5, 0.5), y);
  CHECK(half.loss == doctest::Approx(5 * std::log(2.0)).epsilon(1e-14));
  for (int t = 0; t < 5; ++t) CHECK(half.grad_logits(t) == doctest::Approx(0.5 - y[static_cast<std::size_t>(t)]));

  const std::vector<int> bad = {0, 2};
  bool threw = false;
  try {
    bce_loss(Vector::Constant(2, 0.5), bad);
  } catch (const Error& e) {
    threw = e.code() == ErrorCode::InvalidLabel;
  }
  CHECK(threw);
}

TEST_CASE("binary cross-entropy gradient against finite differences") {
  Rng rng(1);
  double worst = 0;
  for (int rep = 0; rep < 20; ++rep) {
    const int m = 1 + rep % 7;
    const Vector logits = rng.gaussian(m) * 3.0;
    std::vector<int> y;
    for (int t = 0; t < m; ++t) y.push_back(rng.bernoulli(0.5) ? 1 : 0);
    const auto r = bce_loss_from_logits(logits, y);
    CHECK(r.loss >= 0.0);
    for (int i = 0; i < m; ++i) {
      const double num = numeric_partial([&](const Vector& v) { return bce_loss_from_logits(v, y).loss; }, logits, i);
      worst = std::max(worst, rel_err(r.grad_logits(i), num));
    }
  }
  MESSAGE("worst relative gradient error " << worst);
  CHECK(worst <= 1e-6);
}

TEST_CASE("distillation loss endpoints") {
  Rng rng(2);
  const int m = 6;
  Vector ps(m), pt(m);
  for (int t = 0; t < m; ++t) {
    ps(t) = rng.uniform(0.05, 0.95);
    pt(t) = rng.uniform(0.05, 0.95);
  }
  const std::vector<int> y = {0, 0, 1, 1, 0, 1};

  DistillWeights w{0.0, 2.0, 0.0};
  CHECK(distill_loss(ps, ps, std::nullopt, w).loss <= 1e-14);

  w = {1.0, 2.0, 0.0};
  const auto d = distill_loss(ps, pt, std::span<const int>(y), w);
  const auto b = bce_loss(ps, y);
  CHECK(d.loss == b.loss);
  CHECK(d.grad_logits == b.grad_logits);

  w = {0.5, 2.0, 0.0};
  bool threw = false;
  try {
    distill_loss(ps, pt, std::nullopt, w);
  } catch (const Error&) {
    threw = true;
  }
  CHECK(threw);

  for (double tau : {0.0, -1.0}) {
    w = {0.0, tau, 0.0};
    threw = false;
    try {
      distill_loss(ps, pt, std::nullopt, w);
    } catch (const Error& e) {
      threw = e.code() == ErrorCode::InvalidArgument;
    }
    CHECK(threw);
  }
}

TEST_CASE("distillation loss scalar oracle") {
  // sigmoid(logit(p) / 2) = sqrt(p) / (sqrt(p) + sqrt(1 - p))
  auto soften = [](double p) { return std::sqrt(p) / (std::sqrt(p) + std::sqrt(1 - p)); };
  const double qt = soften(0.9), qs = soften(0.6);
  const double expect = 4.0 * (qt * std::log(qt / qs) + (1 - qt) * std::log((1 - qt) / (1 - qs)));
  const DistillWeights w{0.0, 2.0, 0.0};
  const auto r = distill_loss(Vector::Constant(1, 0.6), Vector::Constant(1, 0.9), std::nullopt, w);
  CHECK(r.loss == doctest::Approx(expect).epsilon(1e-12));

  SUBCASE("unit temperature is plain Bernoulli divergence") {
    const DistillWeights w1{0.0, 1.0, 0.0};
    const double plain = 0.9 * std::log(0.9 / 0.6) + 0.1 * std::log(0.1 / 0.4);
    CHECK(distill_loss(Vector::Constant(1, 0.6), Vector::Constant(1, 0.9), std::nullopt, w1).loss ==
          doctest::Approx(plain).epsilon(1e-12));
  }
}

TEST_CASE("divergence term is nonnegative and vanishes only on agreement") {
  Rng rng(3);
  const DistillWeights w{0.0, 2.0, 0.0};
  for (int i = 0; i < 500; ++i) {
    const double a = rng.uniform(0.001, 0.999), b = rng.uniform(0.001, 0.999);
    const double l = distill_loss(Vector::Constant(1, a), Vector::Constant(1, b), std::nullopt, w).loss;
    CHECK(l >= 0.0);
    if (std::abs(a - b) > 1e-3) CHECK(l > 0.0);
  }
}

TEST_CASE("full distillation gradient against finite differences") {
  Rng rng(4);
  double worst = 0;
  for (int rep = 0; rep < 20; ++rep) {
    const int m = 2 + rep % 5, width = 3;
    const Vector logits = rng.gaussian(m) * 2.0;
    Vector pt(m);
    for (int t = 0; t < m; ++t) pt(t) = rng.uniform(0.02, 0.98);
    std::vector<int> y;
    for (int t = 0; t < m; ++t) y.push_back(t >= m / 2 ? 1 : 0);
    const Matrix aux = rng.gaussian(m, width), target = rng.gaussian(m, width);
    const DistillWeights w{rng.uniform(0.0, 1.0), rng.uniform(0.5, 3.0), 0.3};
    const auto r = distill_loss_from_logits(logits, pt, std::span<const int>(y), w, &aux, &target);
    CHECK(r.loss >= 0.0);
    for (int i = 0; i < m; ++i) {
      const double num = numeric_partial(
          [&](const Vector& v) { return distill_loss_from_logits(v, pt, std::span<const int>(y), w, &aux, &target).loss; },
          logits, i);
      worst = std::max(worst, rel_err(r.grad_logits(i), num));
    }
    // aux gradient, flattened column-major
    const Vector flat = Eigen::Map<const Vector>(aux.data(), aux.size());
    for (Eigen::Index i = 0; i < flat.size(); ++i) {
      const double num = numeric_partial(
          [&](const Vector& v) {
            const Matrix a = Eigen::Map<const Matrix>(v.data(), m, width);
            return distill_loss_from_logits(logits, pt, std::span<const int>(y), w, &a, &target).loss;
          },
          flat, i);
      worst = std::max(worst, rel_err(r.grad_aux.data()[i], num));
    }
  }
  MESSAGE("worst relative gradient error " << worst);
  CHECK(worst <= 1e-6);
}

TEST_CASE("aux term is mean squared error per step") {
  Matrix pred(2, 2), target(2, 2);
  pred << 1, 2, 3, 4;
  target << 0, 0, 3, 1;
  const DistillWeights w{0.0, 1.0, 0.5};
  const auto r = distill_loss_from_logits(Vector::Zero(2), Vector::Constant(2, 0.5), std::nullopt, w, &pred, &target);
  CHECK(r.loss == doctest::Approx(0.5 * ((1 + 4) / 2.0 + 9 / 2.0)));
  const DistillWeights off{0.0, 1.0, 0.0};
  CHECK(distill_loss_from_logits(Vector::Zero(2), Vector::Constant(2, 0.5), std::nullopt, off, &pred, &target).grad_aux.size() == 0);
}
