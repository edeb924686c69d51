#pragma once

#include "trajgeo/trace.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace trajgeo {

/// Generator for traces with a known transport-margin structure.
///
/// States live in d dims split by a fixed random rotation into four orthogonal
/// blocks: a score block of rank `score_rank` carrying i.i.d. Gaussian step
/// noise and the first-error displacement, a smooth random walk of rank
/// `k_true`, a nuisance block holding a per-trace offset plus small noise, and
/// low-level background noise in the remaining dims.
struct SyntheticConfig {
  int d = 32;
  int m_min = 8;
  int m_max = 16;
  int k_true = 4;
  int score_rank = 4;
  int nuisance_rank = 8;
  double gamma = 0.0;  // margin of the first error on the ideal score; 0 adds no displacement
  double beta = 0.0;   // fraction of first errors drawn without a margin
  double noise_scale = 1.0;
  double walk_step = 0.5;
  double walk_momentum = 0.8;
  double offset_scale = 3.0;
  /// Error-correlated part of the per-trace nuisance offset, in units of
  /// offset_scale along the same fixed direction the shift translates:
  /// +cue for traces that contain an error, -cue otherwise. Constant within a
  /// trace, so per-trace centering removes it; raw-state models can use it.
  double nuisance_cue = 0.0;
  double nuisance_noise = 0.3;
  double background_noise = 0.1;
  double rho_recover = 0.1;
  double p_error = 0.7;
  int min_correct_prefix = 2;
  double train_fraction = 0.6;
  double val_fraction = 0.2;
  std::uint64_t error_direction_seed = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Population quantities of the ideal score S(t) = ||phi_t||^2 + Tr K, where
/// phi_t is the augmented transition of the score-block coordinates and K the
/// stationary covariance of correct transitions. The tail envelope
/// exp(-c min(u^2/nu^2, u/b)) holds with c = 1, nu = 4 max ||K_t||_F and
/// b = 4 max ||K_t||_op over the three step types (t = 1, t = 2, t >= 3).
struct PopulationConstants {
  Vector sigma;  // per-axis standard deviation in the score block
  Matrix k_stationary;
  double mu_c = 0.0;
  double nu = 0.0;
  double b = 0.0;
  double c = 1.0;

  double envelope(double u) const;
};

PopulationConstants population_constants(const SyntheticConfig& config);

/// Sets config.gamma = multiple * nu.
void set_gamma_in_nu(SyntheticConfig& config, double multiple);

struct SyntheticGeometry {
  Matrix basis;  // d x d orthogonal
  Vector error_direction;  // unit vector in score-block coordinates
  Matrix score_block() const;
  Matrix nuisance_block(const SyntheticConfig& config) const;
};

SyntheticGeometry synthetic_geometry(const SyntheticConfig& config);

/// Score-block coordinates of one trace with its first error.
struct LatentTrace {
  Matrix e;  // m x score_rank
  FirstError tau;
  bool margin_error = false;
  double displacement = 0.0;
};

LatentTrace draw_latent(const SyntheticConfig& config, const PopulationConstants& pc, const SyntheticGeometry& g,
                        std::uint64_t trace_seed);

/// Ideal score of every step (population lens, identity cost, stationary cloud).
std::vector<double> ideal_scores(const LatentTrace& latent, const PopulationConstants& pc);

/// Deterministic in config.seed. Trace i uses derive_seed(seed, i); the first
/// train_fraction of indices go to train, the next val_fraction to val.
TraceSet generate_traces(const SyntheticConfig& config, int n);

struct ShiftSpec {
  double rotation_angle = 0.0;  // radians, applied in consecutive coordinate pairs of the nuisance block
  double translation = 0.0;     // in units of offset_scale, along a fixed nuisance direction
  bool identity() const { return rotation_angle == 0.0 && translation == 0.0; }
};

TraceSet apply_shift(const TraceSet& set, const SyntheticConfig& config, const ShiftSpec& shift);

struct BoundPoint {
  double gamma = 0.0;
  double gamma_over_nu = 0.0;
  double theta = 0.0;
  double empirical = 0.0;  // P{tau_hat = tau}
  double rhs = 0.0;        // bound averaged over the drawn tau
  double se = 0.0;
  int n = 0;
  bool vacuous = false;
  bool passed = false;
};

/// Ideal-score first-crossing success against the localization bound at
/// theta = mu_c + gamma / 2. Every trace carries an error (p_error = 1).
BoundPoint localization_bound_check(const SyntheticConfig& config, int n_mc);

struct BoundReport {
  PopulationConstants constants;
  std::vector<BoundPoint> points;
  bool monotone = true;
  bool passed = false;
};

/// Sweep over gamma = g * nu. Success must be nondecreasing in gamma up to
/// three combined standard errors.
BoundReport localization_bound_grid(const SyntheticConfig& config, const std::vector<double>& gamma_over_nu,
                                    int n_mc);

struct CalibrationReport {
  double mean_score = 0.0;
  double se = 0.0;
  double mu_c = 0.0;
  std::vector<double> u;
  std::vector<double> empirical_tail;
  std::vector<double> envelope;
  int samples = 0;
  bool passed = false;
};

/// Stationary correct-transition scores against mu_c and the tail envelope at
/// u in {nu, 2 nu, 4 nu}.
CalibrationReport calibration_check(const SyntheticConfig& config, int n_traces);

struct OccupancyReport {
  double first_error_outside = 0.0;
  double post_error_outside = 0.0;
  double correct_outside = 0.0;
};

/// Fraction of states whose score-block Mahalanobis radius exceeds the
/// one-sigma band of the correct cloud.
OccupancyReport occupancy(const SyntheticConfig& config, int n_traces);

/// Contrastive matrix (alpha = 1) of score-block coordinates from n traces.
Matrix latent_contrast(const SyntheticConfig& config, int n_traces, std::uint64_t seed, double rho = 0.25);

struct PerturbationReport {
  int instances = 0;
  int gap_violations = 0;
  int dk_checked = 0;
  int dk_violations = 0;
  double worst_gap_slack = 0.0;
  double worst_dk_slack = 0.0;
  std::vector<std::string> failures;  // reproduction seeds of violating instances
  bool passed = false;
};

/// Random symmetric M with eigengap `gap` after the k-th eigenvalue and
/// perturbations of operator norm drawn from eps_levels.
PerturbationReport perturbation_check(int d, int k, double gap, const std::vector<double>& eps_levels, int n_mc,
                                      std::uint64_t seed);

}  // namespace trajgeo
