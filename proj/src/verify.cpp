#include "trajgeo/verify.hpp"

#include "trajgeo/detect.hpp"
#include "trajgeo/error.hpp"
#include "trajgeo/gradient_check.hpp"
#include "trajgeo/rng.hpp"
#include "trajgeo/transport.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

namespace trajgeo {

CloudCheck point_to_cloud_check(int dim, int samples, std::uint64_t seed) {
  require(dim >= 1 && samples >= 2, ErrorCode::InvalidArgument, "need dim >= 1 and at least two samples");
  Rng rng(seed);
  const Matrix ba = rng.gaussian(dim, dim);
  const Matrix a = ba * ba.transpose() / dim;
  const Matrix l = rng.gaussian(dim, dim) / std::sqrt(static_cast<double>(dim));
  TransitionCloud cloud;
  cloud.mean = rng.gaussian(dim);
  cloud.cov = l * l.transpose();
  const Vector x = cloud.mean + 2.0 * rng.gaussian(dim);

  CloudCheck c;
  c.closed_form = transport_score(x, cloud, GroundCost(a));
  double sum = 0.0;
  const int pairs = samples / 2;
  for (int i = 0; i < pairs; ++i) {
    const Vector z = l * rng.gaussian(dim);
    for (double sgn : {1.0, -1.0}) {
      const Vector diff = x - (cloud.mean + sgn * z);
      sum += diff.dot(a * diff);
    }
  }
  c.monte_carlo = sum / (2.0 * pairs);
  c.relative_error = std::abs(c.monte_carlo - c.closed_form) / std::abs(c.closed_form);
  const Matrix as = a * cloud.cov;
  c.standard_error = std::sqrt(2.0 * (as * as).trace() / pairs);
  c.z = c.standard_error > 0 ? (c.monte_carlo - c.closed_form) / c.standard_error : 0.0;
  return c;
}

namespace {

using Clock = std::chrono::steady_clock;

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

SuiteResult suite_cpca(const VerifyOptions& o) {
  SuiteResult r{"cpca", true, "", {}, 0.0};
  const int n = o.n > 0 ? o.n : 500;
  const int d = 8;
  int violations = 0;
  double worst_slack = std::numeric_limits<double>::infinity(), worst_kf = 0.0;
  for (int i = 0; i < n; ++i) {
    const std::uint64_t inst = derive_seed(o.seed, 100000 + static_cast<std::uint64_t>(i));
    Rng rng(inst);
    const Vector mu0 = rng.gaussian(d), mu1 = rng.gaussian(d);
    const Matrix b0 = rng.gaussian(d, d), b1 = rng.gaussian(d, d);
    const Matrix c0 = b0 * b0.transpose() / d, c1 = b1 * b1.transpose() / d;
    const int k = 1 + i % 3;
    const auto rep = verify_cpca_optimality(mu0, c0, mu1, c1, k, 100, derive_seed(inst, 1), o.inject_fault);
    violations += rep.violations;
    worst_slack = std::min(worst_slack, rep.worst_slack);
    worst_kf = std::max(worst_kf, rep.ky_fan_error);
    if (!rep.passed) {
      r.passed = false;
      if (r.failures.size() < 10) r.failures.push_back("instance " + std::to_string(i) + " seed " + std::to_string(inst));
    }
  }
  r.detail = std::to_string(n) + " instances, " + std::to_string(violations) + " violations, worst slack " +
             fmt(worst_slack) + ", Ky Fan error " + fmt(worst_kf);
  return r;
}

SuiteResult suite_cloud(const VerifyOptions& o) {
  SuiteResult r{"cloud", true, "", {}, 0.0};
  const int n = o.n > 0 ? o.n : 20;
  double worst = 0.0, worst_z = 0.0;
  for (int i = 0; i < n; ++i) {
    const std::uint64_t inst = derive_seed(o.seed, 200000 + static_cast<std::uint64_t>(i));
    const CloudCheck c = point_to_cloud_check(2 + i % 7, 100000, inst);
    worst = std::max(worst, c.relative_error);
    worst_z = std::max(worst_z, std::abs(c.z));
    if (c.relative_error > 0.01) {
      r.passed = false;
      r.failures.push_back("instance " + std::to_string(i) + " seed " + std::to_string(inst) + " relative error " +
                           fmt(c.relative_error));
    }
  }
  r.detail = std::to_string(n) + " instances at 1e5 samples, worst relative error " + fmt(worst) +
             ", worst |error| / standard error " + fmt(worst_z);
  return r;
}

SuiteResult suite_bound(const VerifyOptions& o) {
  SuiteResult r{"bound", true, "", {}, 0.0};
  SyntheticConfig cfg = o.bound_config;
  cfg.seed = derive_seed(o.seed, 300000);
  const BoundReport rep = localization_bound_grid(cfg, o.gamma_over_nu, o.n > 0 ? o.n : o.bound_n_mc);
  std::ostringstream os;
  os << "mu_c " << fmt(rep.constants.mu_c) << ", nu " << fmt(rep.constants.nu) << ", b " << fmt(rep.constants.b)
     << ";";
  for (const auto& p : rep.points) {
    os << " g/nu=" << p.gamma_over_nu << ": " << fmt(p.empirical) << " vs " << fmt(p.rhs) << (p.vacuous ? " (vacuous)" : "");
    if (!p.passed)
      r.failures.push_back("gamma/nu " + fmt(p.gamma_over_nu) + ": empirical " + fmt(p.empirical) + " < bound " +
                           fmt(p.rhs) + " - 3se, seed " + std::to_string(cfg.seed));
  }
  if (!rep.monotone) r.failures.push_back("success not monotone in gamma, seed " + std::to_string(cfg.seed));
  r.passed = rep.passed;
  r.detail = os.str();
  return r;
}

SuiteResult suite_perturbation(const VerifyOptions& o) {
  SuiteResult r{"perturbation", true, "", {}, 0.0};
  const PerturbationReport rep =
      perturbation_check(10, 3, 1.0, {0.0, 0.01, 0.05, 0.1, 0.2, 0.4, 0.8, 1.5}, o.n > 0 ? o.n : 1000,
                         derive_seed(o.seed, 400000));
  r.passed = rep.passed;
  r.failures = rep.failures;
  r.detail = std::to_string(rep.instances) + " instances, gap violations " + std::to_string(rep.gap_violations) +
             ", Davis-Kahan checked " + std::to_string(rep.dk_checked) + " violations " +
             std::to_string(rep.dk_violations) + ", worst slacks " + fmt(rep.worst_gap_slack) + " / " +
             fmt(rep.worst_dk_slack);
  return r;
}

SuiteResult suite_agreement(const VerifyOptions& o) {
  SuiteResult r{"agreement", true, "", {}, 0.0};
  const int n = o.n > 0 ? o.n : 10000;
  const double theta = 0.5;
  int mismatches = 0, certified = 0;
  for (int i = 0; i < n; ++i) {
    const std::uint64_t inst = derive_seed(o.seed, 500000 + static_cast<std::uint64_t>(i));
    Rng rng(inst);
    const int m = rng.uniform_int(1, 20);
    std::vector<double> teacher(static_cast<std::size_t>(m)), student(static_cast<std::size_t>(m));
    for (auto& s : teacher) s = rng.uniform();
    const double margin = teacher_margin(teacher, theta);
    if (margin <= 0) continue;
    // Half the pairs push every step toward the threshold by almost the full margin.
    const bool adversarial = i % 2 == 0;
    const double dev = margin * (adversarial ? 1.0 - 1e-9 : rng.uniform());
    for (int t = 0; t < m; ++t) {
      const double s = teacher[static_cast<std::size_t>(t)];
      const double toward = s >= theta ? -1.0 : 1.0;
      const double step = adversarial ? dev : dev * (2.0 * rng.uniform() - 1.0);
      student[static_cast<std::size_t>(t)] = s + (adversarial ? toward * step : step);
    }
    try {
      const AgreementCertificate c = agreement_certificate(teacher, student, theta);
      if (c.certified) ++certified;
    } catch (const Error&) {
      ++mismatches;
      if (r.failures.size() < 10) r.failures.push_back("pair " + std::to_string(i) + " seed " + std::to_string(inst));
    }
  }
  r.passed = mismatches == 0;
  r.detail = std::to_string(certified) + " certified pairs, " + std::to_string(mismatches) + " disagreements";
  return r;
}

SuiteResult suite_gradient(const VerifyOptions& o) {
  SuiteResult r{"gradient", true, "", {}, 0.0};
  std::ostringstream os;
  for (ModelKind kind : {ModelKind::Teacher, ModelKind::Student}) {
    const GradientCheckReport rep = gradient_check(kind, 1e-4, o.seed);
    os << (kind == ModelKind::Teacher ? "teacher " : "student ") << fmt(rep.worst) << "; ";
    if (!rep.passed) {
      r.passed = false;
      r.failures.push_back(format_report(rep) + "seed " + std::to_string(o.seed));
    }
  }
  r.detail = "worst relative errors: " + os.str();
  return r;
}

}  // namespace

std::vector<SuiteResult> run_verify(const VerifyOptions& options) {
  using Suite = SuiteResult (*)(const VerifyOptions&);
  const std::vector<std::pair<std::string, Suite>> suites = {
      {"cpca", suite_cpca},           {"cloud", suite_cloud},         {"bound", suite_bound},
      {"perturbation", suite_perturbation}, {"agreement", suite_agreement}, {"gradient", suite_gradient}};
  std::vector<SuiteResult> out;
  for (const auto& [name, fn] : suites) {
    if (options.suite != "all" && options.suite != name) continue;
    const auto start = Clock::now();
    SuiteResult r = fn(options);
    r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    out.push_back(std::move(r));
  }
  require(!out.empty(), ErrorCode::InvalidArgument, "unknown verification suite '" + options.suite + "'");
  return out;
}

}  // namespace trajgeo
