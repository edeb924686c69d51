#pragma once

#include "trajgeo/trace.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace trajgeo {

inline constexpr double kDefaultTheta = 0.5;

struct DecisionOutcome {
  FirstError predicted;
  double theta = kDefaultTheta;
  std::vector<int> decisions;  // 1 where score >= theta
};

/// Smallest 1-based t with scores[t] >= theta, else NONE.
FirstError first_crossing(std::span<const double> scores, double theta);
DecisionOutcome decide(std::span<const double> scores, double theta);

/// min_t |s_t - theta|. Requires a nonempty sequence.
double teacher_margin(std::span<const double> scores, double theta);

struct AgreementCertificate {
  bool certified = false;
  double deviation = 0.0;  // max_t |s_S - s_T|
  double margin = 0.0;     // teacher margin m_T
};

/// Certified iff deviation < margin strictly. When certified the stepwise
/// decisions and first crossings are checked to coincide; a mismatch throws
/// TheoremCheck because it can only come from a bug.
AgreementCertificate agreement_certificate(std::span<const double> teacher, std::span<const double> student,
                                           double theta);

/// Mann-Whitney AUROC with ties counted 1/2; empty when a class is missing.
std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels);

/// Fraction of traces whose prediction equals the truth exactly (NONE matches
/// NONE). `tolerance` > 0 also accepts predictions within that many steps of a
/// true error; it exists for analysis only.
double first_error_accuracy(std::span<const FirstError> predictions, std::span<const FirstError> truths,
                            int tolerance = 0);

struct ScoredTrace {
  std::vector<double> scores;
  FirstError truth;
};

/// Grid search over {0, 1/n, ..., 1} with n = round(1 / grid_step). Ties go to the threshold closest to 0.5,
/// then to the smaller one. An empty validation set yields 0.5.
double select_threshold(std::span<const ScoredTrace> val, double grid_step = 0.01);

}  // namespace trajgeo
