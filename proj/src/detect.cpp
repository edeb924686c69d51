#include "trajgeo/detect.hpp"

#include "trajgeo/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace trajgeo {

FirstError first_crossing(std::span<const double> scores, double theta) {
  for (std::size_t t = 0; t < scores.size(); ++t)
    if (scores[t] >= theta) return FirstError::at(static_cast<int>(t) + 1);
  return FirstError::none();
}

DecisionOutcome decide(std::span<const double> scores, double theta) {
  DecisionOutcome out;
  out.theta = theta;
  out.decisions.reserve(scores.size());
  for (double s : scores) out.decisions.push_back(s >= theta ? 1 : 0);
  out.predicted = first_crossing(scores, theta);
  return out;
}

double teacher_margin(std::span<const double> scores, double theta) {
  require(!scores.empty(), ErrorCode::InvalidArgument, "margin of an empty sequence");
  double m = std::abs(scores[0] - theta);
  for (double s : scores) m = std::min(m, std::abs(s - theta));
  return m;
}

AgreementCertificate agreement_certificate(std::span<const double> teacher, std::span<const double> student,
                                           double theta) {
  require(teacher.size() == student.size(), ErrorCode::LengthMismatch,
          "teacher has " + std::to_string(teacher.size()) + " steps, student " + std::to_string(student.size()));
  AgreementCertificate c;
  c.margin = teacher_margin(teacher, theta);
  for (std::size_t t = 0; t < teacher.size(); ++t) c.deviation = std::max(c.deviation, std::abs(student[t] - teacher[t]));
  c.certified = c.deviation < c.margin;
  if (c.certified) {
    for (std::size_t t = 0; t < teacher.size(); ++t)
      if ((teacher[t] >= theta) != (student[t] >= theta))
        fail(ErrorCode::TheoremCheck, "certified pair disagrees at step " + std::to_string(t + 1));
    if (!(first_crossing(teacher, theta) == first_crossing(student, theta)))
      fail(ErrorCode::TheoremCheck, "certified pair has different first crossings");
  }
  return c;
}

std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), ErrorCode::LengthMismatch, "scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks over tied groups; the positive rank sum gives the U statistic.
  double rank_sum = 0.0;
  long long n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t q = i; q < j; ++q) {
      const int y = labels[order[q]];
      require(y == 0 || y == 1, ErrorCode::InvalidLabel, "label must be 0 or 1");
      if (y == 1) {
        rank_sum += midrank;
        ++n_pos;
      } else {
        ++n_neg;
      }
    }
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double u = rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double first_error_accuracy(std::span<const FirstError> predictions, std::span<const FirstError> truths,
                            int tolerance) {
  require(predictions.size() == truths.size(), ErrorCode::Misalignment,
          std::to_string(predictions.size()) + " predictions for " + std::to_string(truths.size()) + " traces");
  require(!truths.empty(), ErrorCode::InsufficientSamples, "no traces to score");
  require(tolerance >= 0, ErrorCode::InvalidArgument, "tolerance must be nonnegative");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const FirstError& p = predictions[i];
    const FirstError& t = truths[i];
    if (p == t)
      ++hits;
    else if (tolerance > 0 && !p.is_none() && !t.is_none() && std::abs(p.index() - t.index()) <= tolerance)
      ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(truths.size());
}

double select_threshold(std::span<const ScoredTrace> val, double grid_step) {
  require(grid_step > 0 && grid_step <= 1, ErrorCode::InvalidArgument, "grid step must lie in (0,1]");
  if (val.empty()) return kDefaultTheta;
  const int n = static_cast<int>(std::llround(1.0 / grid_step));
  std::vector<FirstError> truths;
  for (const auto& v : val) truths.push_back(v.truth);
  double best_theta = kDefaultTheta;
  double best_acc = -1.0;
  std::vector<FirstError> preds(val.size());
  for (int g = 0; g <= n; ++g) {
    // g / n rather than g * step keeps grid points on the decimal values (70 * 0.01 > 0.7)
    const double theta = static_cast<double>(g) / n;
    for (std::size_t i = 0; i < val.size(); ++i) preds[i] = first_crossing(val[i].scores, theta);
    const double acc = first_error_accuracy(preds, truths);
    const double dist = std::abs(theta - 0.5), best_dist = std::abs(best_theta - 0.5);
    // Grid values are visited in increasing order, so equal distance keeps the smaller one.
    if (acc > best_acc || (acc == best_acc && dist < best_dist - 1e-12)) {
      best_acc = acc;
      best_theta = theta;
    }
  }
  return best_theta;
}

}  // namespace trajgeo
