#include "trajgeo/gradient_check.hpp"

#include "trajgeo/losses.hpp"
#include "trajgeo/nets.hpp"
#include "trajgeo/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

namespace trajgeo {

namespace {

// Five-point central stencil. At h = 1e-6 the plain two-point difference has
// roundoff near 1e-10 on an O(1) loss, which swamps entries of size 1e-6.
constexpr double kStep = 1e-4;

GradientCheckReport compare(ParamSet& params, const std::function<double()>& loss, double tolerance) {
  GradientCheckReport r;
  r.tolerance = tolerance;
  for (auto& p : params) {
    BlockError be{p.name, 0.0};
    if (!p.grad.allFinite()) r.finite = false;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& x = p.value.data()[i];
      const double saved = x;
      auto at = [&](double offset) {
        x = saved + offset;
        return loss();
      };
      const double f2 = at(2 * kStep), f1 = at(kStep), b1 = at(-kStep), b2 = at(-2 * kStep);
      x = saved;
      const double numeric = (-f2 + 8.0 * f1 - 8.0 * b1 + b2) / (12.0 * kStep);
      const double analytic = p.grad.data()[i];
      if (!std::isfinite(numeric)) r.finite = false;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      be.worst = std::max(be.worst, std::abs(analytic - numeric) / denom);
    }
    r.worst = std::max(r.worst, be.worst);
    r.blocks.push_back(be);
  }
  r.passed = r.finite && r.worst <= tolerance;
  return r;
}

}  // namespace

GradientCheckReport gradient_check(ModelKind kind, double tolerance, std::uint64_t seed, bool zero_input) {
  Rng rng(derive_seed(seed, 77));
  GradientCheckReport report;
  if (kind == ModelKind::Teacher) {
    TeacherModel model(8, 6, 5, derive_seed(seed, 1));
    Matrix x = zero_input ? Matrix::Zero(12, 8) : rng.gaussian(12, 8);
    std::vector<int> y(12);
    for (auto& v : y) v = rng.bernoulli(0.5) ? 1 : 0;
    model.input_norm() = Standardizer::fit(x);
    model.params().zero_grad();
    model.backward(x, bce_loss_from_logits(model.logits(x), y).grad_logits);
    report = compare(model.params(), [&] { return bce_loss_from_logits(model.logits(x), y).loss; }, tolerance);
  } else {
    StudentTopology topo{4, 3, 2, 4, 3};
    StudentModel model(topo, derive_seed(seed, 2));
    const int m = 5;
    Matrix h = zero_input ? Matrix::Zero(m, 4) : rng.gaussian(m, 4);
    Vector pt(m);
    for (int t = 0; t < m; ++t) pt(t) = 0.05 + 0.9 * rng.uniform();
    std::vector<int> y = {0, 0, 1, 1, 1};
    Matrix aux_target = rng.gaussian(m, 3);
    const DistillWeights w{0.5, 2.0, 0.1};
    auto eval = [&]() {
      const StudentOutput out = model.forward(h);
      return distill_loss_from_logits(out.logits, pt, std::span<const int>(y), w, &out.aux, &aux_target);
    };
    model.params().zero_grad();
    const LossResult lr = eval();
    model.backward(h, lr.grad_logits, lr.grad_aux);
    report = compare(model.params(), [&] { return eval().loss; }, tolerance);
  }
  report.kind = kind;
  return report;
}

std::string format_report(const GradientCheckReport& report) {
  std::ostringstream os;
  os << (report.kind == ModelKind::Teacher ? "teacher" : "student") << " gradient check "
     << (report.passed ? "passed" : "FAILED") << ": worst relative error " << report.worst << " (tolerance "
     << report.tolerance << (report.finite ? "" : ", non-finite values") << ")\n";
  for (const auto& b : report.blocks) os << "  " << b.name << ": " << b.worst << '\n';
  return os.str();
}

}  // namespace trajgeo
