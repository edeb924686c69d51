#include "trajgeo/synthetic.hpp"

#include "trajgeo/detect.hpp"
#include "trajgeo/eigensolver.hpp"
#include "trajgeo/error.hpp"
#include "trajgeo/lens.hpp"
#include "trajgeo/rng.hpp"
#include "trajgeo/transport.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace trajgeo {

void SyntheticConfig::validate() const {
  require(d >= 1 && score_rank >= 1 && k_true >= 0 && nuisance_rank >= 0, ErrorCode::ConfigError,
          "synthetic ranks must be positive");
  require(score_rank + k_true + nuisance_rank <= d, ErrorCode::ConfigError,
          "score, walk and nuisance ranks exceed d=" + std::to_string(d));
  require(min_correct_prefix >= 0, ErrorCode::ConfigError, "min_correct_prefix must be nonnegative");
  require(m_min >= 1 && m_max >= m_min, ErrorCode::ConfigError, "need 1 <= m_min <= m_max");
  require(m_min > min_correct_prefix, ErrorCode::ConfigError, "m_min must exceed min_correct_prefix");
  require(std::isfinite(gamma) && gamma >= 0, ErrorCode::ConfigError, "gamma must be finite and nonnegative");
  require(beta >= 0 && beta <= 1, ErrorCode::ConfigError, "beta must lie in [0,1]");
  require(p_error >= 0 && p_error <= 1, ErrorCode::ConfigError, "p_error must lie in [0,1]");
  require(rho_recover >= 0 && rho_recover <= 1, ErrorCode::ConfigError, "rho_recover must lie in [0,1]");
  require(noise_scale > 0, ErrorCode::ConfigError, "noise_scale must be positive");
  require(walk_step >= 0 && offset_scale >= 0 && nuisance_noise >= 0 && background_noise >= 0,
          ErrorCode::ConfigError, "noise scales must be nonnegative");
  require(walk_momentum >= 0 && walk_momentum < 1, ErrorCode::ConfigError, "walk_momentum must lie in [0,1)");
  require(std::isfinite(nuisance_cue), ErrorCode::ConfigError, "nuisance_cue must be finite");
  require(train_fraction >= 0 && val_fraction >= 0 && train_fraction + val_fraction <= 1, ErrorCode::ConfigError,
          "split fractions must be nonnegative and sum to at most 1");
}

double PopulationConstants::envelope(double u) const {
  return std::exp(-c * std::min(u * u / (nu * nu), u / b));
}

namespace {

// Coefficients of e_t, e_{t-1}, e_{t-2} in (position, velocity, acceleration).
Matrix step_gram(int t) {
  const double c[3][3] = {{1, 1, 1}, {0, -1, -2}, {0, 0, 1}};
  Matrix g = Matrix::Zero(3, 3);
  for (int j = 0; j < std::min(t, 3); ++j) {
    Eigen::Vector3d v(c[j][0], c[j][1], c[j][2]);
    g += v * v.transpose();
  }
  return g;
}

Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

double op_norm_sym(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace

PopulationConstants population_constants(const SyntheticConfig& config) {
  config.validate();
  const int s = config.score_rank;
  PopulationConstants pc;
  pc.sigma.resize(s);
  for (int i = 0; i < s; ++i) pc.sigma(i) = config.noise_scale * (s == 1 ? 1.0 : 1.0 - 0.5 * i / (s - 1));
  const Matrix cov = pc.sigma.array().square().matrix().asDiagonal();
  pc.k_stationary = kron(step_gram(3), cov);
  pc.mu_c = 2.0 * pc.k_stationary.trace();
  double fro = 0.0, op = 0.0;
  for (int t = 1; t <= 3; ++t) {
    const Matrix k = kron(step_gram(t), cov);
    fro = std::max(fro, k.norm());
    op = std::max(op, op_norm_sym(k));
  }
  pc.nu = 4.0 * fro;
  pc.b = 4.0 * op;
  pc.c = 1.0;
  return pc;
}

void set_gamma_in_nu(SyntheticConfig& config, double multiple) {
  require(multiple >= 0, ErrorCode::ConfigError, "gamma multiple must be nonnegative");
  config.gamma = multiple * population_constants(config).nu;
}

Matrix SyntheticGeometry::score_block() const { return basis.leftCols(error_direction.size()); }

Matrix SyntheticGeometry::nuisance_block(const SyntheticConfig& config) const {
  return basis.middleCols(config.score_rank + config.k_true, config.nuisance_rank);
}

SyntheticGeometry synthetic_geometry(const SyntheticConfig& config) {
  config.validate();
  Rng rng(config.error_direction_seed);
  SyntheticGeometry g;
  g.basis = random_orthonormal(rng, config.d, config.d);
  g.error_direction = rng.gaussian(config.score_rank);
  g.error_direction /= g.error_direction.norm();
  return g;
}

namespace {

Vector phi_at(const Matrix& e, int t) { return augmented_transition(e, t); }

/// Smallest s >= 0 with ||phi0 + s a||^2 >= target, where a stacks the
/// direction three times (e_t enters every block with coefficient 1).
double margin_displacement(const Vector& phi0, const Vector& dir, double target) {
  const Eigen::Index s = dir.size();
  Vector a(3 * s);
  a << dir, dir, dir;
  const double c0 = phi0.squaredNorm() - target;
  if (c0 >= 0) return 0.0;
  const double p = phi0.dot(a);
  double root = (-p + std::sqrt(p * p - 3.0 * c0)) / 3.0;
  // Nudge past rounding so the margin holds exactly in floating point.
  for (int i = 0; i < 64 && (phi0 + root * a).squaredNorm() < target; ++i)
    root = root * (1.0 + 1e-12) + 1e-12;
  return root;
}

}  // namespace

LatentTrace draw_latent(const SyntheticConfig& config, const PopulationConstants& pc, const SyntheticGeometry& g,
                        std::uint64_t trace_seed) {
  Rng rng(trace_seed);
  const int s = config.score_rank;
  const int m = rng.uniform_int(config.m_min, config.m_max);
  const bool has_error = rng.bernoulli(config.p_error);
  const int tau = rng.uniform_int(config.min_correct_prefix + 1, m);
  const bool sub_margin = rng.bernoulli(config.beta);

  LatentTrace lt;
  lt.e.resize(m, s);
  for (int t = 0; t < m; ++t)
    for (int j = 0; j < s; ++j) lt.e(t, j) = pc.sigma(j) * rng.normal();
  if (!has_error) {
    lt.tau = FirstError::none();
    return lt;
  }
  lt.tau = FirstError::at(tau);
  lt.margin_error = !sub_margin && config.gamma > 0;
  if (lt.margin_error) {
    const double target = pc.k_stationary.trace() + config.gamma;
    lt.displacement = margin_displacement(phi_at(lt.e, tau), g.error_direction, target);
    const double keep = 1.0 - config.rho_recover;
    double w = 1.0;
    for (int t = tau; t <= m; ++t, w *= keep) lt.e.row(t - 1) += (w * lt.displacement) * g.error_direction.transpose();
  }
  return lt;
}

std::vector<double> ideal_scores(const LatentTrace& latent, const PopulationConstants& pc) {
  const double tr = pc.k_stationary.trace();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(latent.e.rows()));
  for (int t = 1; t <= latent.e.rows(); ++t) out.push_back(phi_at(latent.e, t).squaredNorm() + tr);
  return out;
}

TraceSet generate_traces(const SyntheticConfig& config, int n) {
  config.validate();
  require(n >= 0, ErrorCode::ConfigError, "trace count must be nonnegative");
  const PopulationConstants pc = population_constants(config);
  const SyntheticGeometry g = synthetic_geometry(config);
  const int s = config.score_rank, kw = config.k_true, kn = config.nuisance_rank;
  const int kr = config.d - s - kw - kn;
  const int n_train = static_cast<int>(std::floor(config.train_fraction * n));
  const int n_val = static_cast<int>(std::floor(config.val_fraction * n));

  TraceSet set;
  for (int i = 0; i < n; ++i) {
    const std::uint64_t ts = derive_seed(config.seed, static_cast<std::uint64_t>(i));
    const LatentTrace lt = draw_latent(config, pc, g, ts);
    const int m = static_cast<int>(lt.e.rows());
    Rng rng(derive_seed(ts, 1));

    Matrix coords(m, config.d);
    coords.leftCols(s) = lt.e;
    // Smooth walk: the velocity is an AR(1) process with stationary sd walk_step.
    Vector w = rng.gaussian(kw);
    Vector v = rng.gaussian(kw) * config.walk_step;
    const double innov = std::sqrt(1.0 - config.walk_momentum * config.walk_momentum) * config.walk_step;
    Vector offset = rng.gaussian(kn) * config.offset_scale;
    if (config.nuisance_cue != 0.0 && kn > 0) {
      const double sign = lt.tau.is_none() ? -1.0 : 1.0;
      offset += Vector::Constant(kn, sign * config.nuisance_cue * config.offset_scale / std::sqrt(static_cast<double>(kn)));
    }
    for (int t = 0; t < m; ++t) {
      v = config.walk_momentum * v + innov * rng.gaussian(kw);
      w += v;
      coords.row(t).segment(s, kw) = w.transpose();
      coords.row(t).segment(s + kw, kn) = (offset + config.nuisance_noise * rng.gaussian(kn)).transpose();
      coords.row(t).segment(s + kw + kn, kr) = (config.background_noise * rng.gaussian(kr)).transpose();
    }

    Trace tr;
    char id[32];
    std::snprintf(id, sizeof id, "syn-%06d", i);
    tr.id = id;
    tr.states = coords * g.basis.transpose();
    std::vector<int> labels(static_cast<std::size_t>(m), 0);
    if (!lt.tau.is_none())
      for (int t = lt.tau.index(); t <= m; ++t) labels[static_cast<std::size_t>(t - 1)] = 1;
    tr.labels = std::move(labels);
    tr.meta["tau"] = lt.tau.str();
    tr.meta["margin_error"] = lt.margin_error ? "1" : "0";
    const Split split = i < n_train ? Split::Train : i < n_train + n_val ? Split::Val : Split::Test;
    set.add(std::move(tr), split);
  }
  return set;
}

TraceSet apply_shift(const TraceSet& set, const SyntheticConfig& config, const ShiftSpec& shift) {
  const SyntheticGeometry g = synthetic_geometry(config);
  const int kn = config.nuisance_rank;
  require(set.empty() || set.dim() == config.d, ErrorCode::DimensionMismatch, "trace width does not match the config");
  Matrix rot = Matrix::Identity(kn, kn);
  const double c = std::cos(shift.rotation_angle), sn = std::sin(shift.rotation_angle);
  for (int j = 0; j + 1 < kn; j += 2) {
    rot(j, j) = c;
    rot(j, j + 1) = -sn;
    rot(j + 1, j) = sn;
    rot(j + 1, j + 1) = c;
  }
  Vector dir = Vector::Ones(kn);
  if (kn > 0) dir /= std::sqrt(static_cast<double>(kn));
  const Matrix nb = g.nuisance_block(config);
  const Vector t_ambient = nb * (shift.translation * config.offset_scale * dir);
  const Matrix mix = nb * (rot - Matrix::Identity(kn, kn)) * nb.transpose();

  TraceSet out;
  for (std::size_t i = 0; i < set.size(); ++i) {
    Trace tr = set.traces()[i];
    if (!shift.identity() && kn > 0) {
      tr.states = tr.states + tr.states * mix.transpose();
      tr.states.rowwise() += t_ambient.transpose();
    }
    out.add(std::move(tr), set.splits()[i]);
  }
  return out;
}

BoundPoint localization_bound_check(const SyntheticConfig& config_in, int n_mc) {
  require(n_mc >= 1, ErrorCode::ConfigError, "n_mc must be positive");
  SyntheticConfig config = config_in;
  config.p_error = 1.0;
  const PopulationConstants pc = population_constants(config);
  const SyntheticGeometry g = synthetic_geometry(config);
  BoundPoint bp;
  bp.gamma = config.gamma;
  bp.gamma_over_nu = config.gamma / pc.nu;
  bp.theta = pc.mu_c + config.gamma / 2.0;
  bp.n = n_mc;
  const double tail =
      std::exp(-pc.c * std::min(config.gamma * config.gamma / (16.0 * pc.nu * pc.nu), config.gamma / (4.0 * pc.b)));
  long long hits = 0;
  double rhs_sum = 0.0;
  for (int i = 0; i < n_mc; ++i) {
    const LatentTrace lt = draw_latent(config, pc, g, derive_seed(config.seed, static_cast<std::uint64_t>(i)));
    const auto scores = ideal_scores(lt, pc);
    if (first_crossing(scores, bp.theta) == lt.tau) ++hits;
    rhs_sum += 1.0 - config.beta - (lt.tau.index() - 1) * tail;
  }
  bp.empirical = static_cast<double>(hits) / n_mc;
  bp.rhs = rhs_sum / n_mc;
  bp.se = std::sqrt(std::max(bp.empirical * (1.0 - bp.empirical), 0.25 / n_mc) / n_mc);
  bp.vacuous = bp.rhs <= 0.0;
  bp.passed = bp.empirical >= bp.rhs - 3.0 * bp.se;
  return bp;
}

BoundReport localization_bound_grid(const SyntheticConfig& config, const std::vector<double>& gamma_over_nu,
                                    int n_mc) {
  BoundReport r;
  r.constants = population_constants(config);
  r.passed = true;
  for (double g : gamma_over_nu) {
    SyntheticConfig c = config;
    c.gamma = g * r.constants.nu;
    r.points.push_back(localization_bound_check(c, n_mc));
    r.passed = r.passed && r.points.back().passed;
  }
  for (std::size_t i = 1; i < r.points.size(); ++i) {
    const auto& a = r.points[i - 1];
    const auto& b = r.points[i];
    if (b.gamma >= a.gamma && b.empirical < a.empirical - 3.0 * std::hypot(a.se, b.se)) r.monotone = false;
  }
  r.passed = r.passed && r.monotone;
  return r;
}

CalibrationReport calibration_check(const SyntheticConfig& config_in, int n_traces) {
  SyntheticConfig config = config_in;
  config.p_error = 0.0;
  const PopulationConstants pc = population_constants(config);
  const SyntheticGeometry g = synthetic_geometry(config);
  std::vector<double> scores;
  for (int i = 0; i < n_traces; ++i) {
    const LatentTrace lt = draw_latent(config, pc, g, derive_seed(config.seed, static_cast<std::uint64_t>(i)));
    const auto s = ideal_scores(lt, pc);
    // Stationary transitions only; the first two steps have smaller means.
    for (std::size_t t = 2; t < s.size(); ++t) scores.push_back(s[t]);
  }
  CalibrationReport r;
  r.samples = static_cast<int>(scores.size());
  require(r.samples >= 2, ErrorCode::InsufficientSamples, "calibration needs at least two stationary steps");
  double sum = 0.0, sq = 0.0;
  for (double s : scores) sum += s;
  r.mean_score = sum / r.samples;
  for (double s : scores) sq += (s - r.mean_score) * (s - r.mean_score);
  r.se = std::sqrt(sq / (r.samples - 1) / r.samples);
  r.mu_c = pc.mu_c;
  r.passed = std::abs(r.mean_score - pc.mu_c) <= 2.0 * r.se;
  for (double mult : {1.0, 2.0, 4.0}) {
    const double u = mult * pc.nu;
    long long above = 0;
    for (double s : scores) above += (s - pc.mu_c >= u);
    r.u.push_back(u);
    r.empirical_tail.push_back(static_cast<double>(above) / r.samples);
    r.envelope.push_back(pc.envelope(u));
    r.passed = r.passed && r.empirical_tail.back() <= r.envelope.back();
  }
  return r;
}

OccupancyReport occupancy(const SyntheticConfig& config_in, int n_traces) {
  SyntheticConfig config = config_in;
  config.p_error = 1.0;
  const PopulationConstants pc = population_constants(config);
  const SyntheticGeometry g = synthetic_geometry(config);
  const double s = config.score_rank;
  const double band = s + std::sqrt(2.0 * s);  // mean + 1 sd of a chi-square with s dof
  long long fe = 0, fe_out = 0, post = 0, post_out = 0, corr = 0, corr_out = 0;
  for (int i = 0; i < n_traces; ++i) {
    const LatentTrace lt = draw_latent(config, pc, g, derive_seed(config.seed, static_cast<std::uint64_t>(i)));
    for (int t = 1; t <= lt.e.rows(); ++t) {
      const double r2 = (lt.e.row(t - 1).transpose().array() / pc.sigma.array()).square().sum();
      const bool out = r2 > band;
      if (t < lt.tau.index()) {
        ++corr;
        corr_out += out;
      } else if (t == lt.tau.index()) {
        ++fe;
        fe_out += out;
      } else {
        ++post;
        post_out += out;
      }
    }
  }
  OccupancyReport r;
  r.first_error_outside = fe ? static_cast<double>(fe_out) / fe : 0.0;
  r.post_error_outside = post ? static_cast<double>(post_out) / post : 0.0;
  r.correct_outside = corr ? static_cast<double>(corr_out) / corr : 0.0;
  return r;
}

Matrix latent_contrast(const SyntheticConfig& config_in, int n_traces, std::uint64_t seed, double rho) {
  SyntheticConfig config = config_in;
  config.p_error = 1.0;
  const PopulationConstants pc = population_constants(config);
  const SyntheticGeometry g = synthetic_geometry(config);
  std::vector<Matrix> states;
  std::vector<std::vector<int>> labels;
  states.reserve(static_cast<std::size_t>(n_traces));
  for (int i = 0; i < n_traces; ++i) {
    LatentTrace lt = draw_latent(config, pc, g, derive_seed(seed, static_cast<std::uint64_t>(i)));
    std::vector<int> y(static_cast<std::size_t>(lt.e.rows()), 0);
    for (int t = lt.tau.index(); t <= lt.e.rows(); ++t) y[static_cast<std::size_t>(t - 1)] = 1;
    states.push_back(std::move(lt.e));
    labels.push_back(std::move(y));
  }
  std::vector<LabeledStates> views;
  for (std::size_t i = 0; i < states.size(); ++i) views.push_back({&states[i], labels[i]});
  return contrastive_matrix(estimate_moments(views, rho), 1.0);
}

PerturbationReport perturbation_check(int d, int k, double gap, const std::vector<double>& eps_levels, int n_mc,
                                      std::uint64_t seed) {
  require(k >= 1 && k < d, ErrorCode::InvalidRank, "perturbation check needs 1 <= k < d");
  require(gap > 0, ErrorCode::InvalidArgument, "eigengap must be positive");
  require(!eps_levels.empty(), ErrorCode::InvalidArgument, "no perturbation levels");
  PerturbationReport r;
  r.worst_gap_slack = std::numeric_limits<double>::infinity();
  r.worst_dk_slack = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n_mc; ++i) {
    const std::uint64_t inst = derive_seed(seed, static_cast<std::uint64_t>(i));
    Rng rng(inst);
    // Top k eigenvalues in [gap, gap + 2], the rest in [-2, 0]: lambda_k - lambda_{k+1} >= gap.
    Vector lam(d);
    for (int j = 0; j < k; ++j) lam(j) = gap + 2.0 * rng.uniform();
    for (int j = k; j < d; ++j) lam(j) = -2.0 * rng.uniform();
    std::sort(lam.data(), lam.data() + d, std::greater<double>());
    const double delta = lam(k - 1) - lam(k);
    const Matrix q = random_orthonormal(rng, d, d);
    Matrix m = q * lam.asDiagonal() * q.transpose();
    m = 0.5 * (m + m.transpose()).eval();

    const double eps = eps_levels[static_cast<std::size_t>(i) % eps_levels.size()];
    Matrix e = rng.gaussian(d, d);
    e = 0.5 * (e + e.transpose()).eval();
    const double en = op_norm_sym(e);
    if (en > 0) e *= eps / en;
    const double eps_m = op_norm_sym(e);

    const Matrix u_star = dense_top_k(m, k).vectors;
    const Matrix u_hat = dense_top_k(m + e, k).vectors;
    const double g_star = (u_star.transpose() * m * u_star).trace();
    const double g_hat = (u_hat.transpose() * m * u_hat).trace();
    const double gap_slack = g_hat - (g_star - 2.0 * k * eps_m);
    const double tol = 1e-10 * std::max(1.0, std::abs(g_star));
    r.worst_gap_slack = std::min(r.worst_gap_slack, gap_slack);
    bool bad = false;
    if (gap_slack < -tol) {
      ++r.gap_violations;
      bad = true;
    }
    if (delta > 2.0 * eps_m) {
      ++r.dk_checked;
      const double bound = eps_m > 0 ? 2.0 * eps_m / delta : 0.0;
      const double st = sin_theta(u_star, u_hat);
      const double slack = bound - st;
      r.worst_dk_slack = std::min(r.worst_dk_slack, slack);
      if (slack < -1e-10) {
        ++r.dk_violations;
        bad = true;
      }
    }
    if (bad) r.failures.push_back("instance " + std::to_string(i) + " seed " + std::to_string(inst));
    ++r.instances;
  }
  r.passed = r.gap_violations == 0 && r.dk_violations == 0;
  return r;
}

}  // namespace trajgeo
