#include "trajgeo/losses.hpp"

#include "trajgeo/error.hpp"

#include <algorithm>
#include <cmath>

namespace trajgeo {

namespace {
const double kLogitBound = std::log((1.0 - kProbClamp) / kProbClamp);
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

double clamped_logit(double p) {
  const double c = clamp_prob(p);
  return std::log(c / (1.0 - c));
}

double bernoulli_kl(double p, double q) {
  double kl = 0.0;
  if (p > 0) kl += p * std::log(p / q);
  if (p < 1) kl += (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
  return std::max(0.0, kl);
}

LossResult bce_loss_from_logits(const Vector& logits, std::span<const int> labels) {
  require(static_cast<Eigen::Index>(labels.size()) == logits.size(), ErrorCode::LengthMismatch,
          "labels and logits differ in length");
  LossResult r;
  r.grad_logits.resize(logits.size());
  for (Eigen::Index t = 0; t < logits.size(); ++t) {
    const int y = labels[static_cast<std::size_t>(t)];
    require(y == 0 || y == 1, ErrorCode::InvalidLabel, "label must be 0 or 1");
    const double p = sigmoid(logits(t));
    const double pc = clamp_prob(p);
    r.loss -= y == 1 ? std::log(pc) : std::log(1.0 - pc);
    r.grad_logits(t) = p - y;
  }
  return r;
}

LossResult bce_loss(const Vector& probs, std::span<const int> labels) {
  Vector logits(probs.size());
  for (Eigen::Index t = 0; t < probs.size(); ++t) logits(t) = clamped_logit(probs(t));
  return bce_loss_from_logits(logits, labels);
}

LossResult distill_loss_from_logits(const Vector& student_logits, const Vector& teacher_probs,
                                    std::optional<std::span<const int>> labels, const DistillWeights& w,
                                    const Matrix* aux_pred, const Matrix* aux_target) {
  require(w.tau_d > 0, ErrorCode::InvalidArgument, "distillation temperature must be positive");
  require(w.lambda >= 0 && w.lambda <= 1, ErrorCode::InvalidArgument, "lambda must lie in [0,1]");
  require(w.beta_aux >= 0, ErrorCode::InvalidArgument, "beta_aux must be nonnegative");
  const Eigen::Index m = student_logits.size();
  require(teacher_probs.size() == m, ErrorCode::LengthMismatch, "teacher and student sequences differ in length");

  LossResult r;
  r.grad_logits = Vector::Zero(m);
  if (w.lambda > 0) {
    require(labels.has_value(), ErrorCode::InvalidArgument, "labels are required when lambda > 0");
    const LossResult bce = bce_loss_from_logits(student_logits, *labels);
    r.loss += w.lambda * bce.loss;
    r.grad_logits += w.lambda * bce.grad_logits;
  }
  if (w.lambda < 1) {
    const double tau = w.tau_d;
    const double mix = (1.0 - w.lambda) * tau * tau;
    for (Eigen::Index t = 0; t < m; ++t) {
      const double pt = teacher_probs(t);
      require(std::isfinite(pt) && pt >= 0 && pt <= 1, ErrorCode::InvalidArgument, "teacher probability outside [0,1]");
      const double qt = sigmoid(clamped_logit(pt) / tau);
      const double ls = student_logits(t);
      const bool clamped = ls > kLogitBound || ls < -kLogitBound;
      const double qs = sigmoid(std::clamp(ls, -kLogitBound, kLogitBound) / tau);
      r.loss += mix * bernoulli_kl(qt, qs);
      if (!clamped) r.grad_logits(t) += mix * (qs - qt) / tau;
    }
  }
  if (w.beta_aux > 0 && aux_pred && aux_target) {
    require(aux_pred->rows() == m && aux_target->rows() == m && aux_pred->cols() == aux_target->cols(),
            ErrorCode::LengthMismatch, "aux prediction and target shapes disagree");
    const Matrix diff = *aux_pred - *aux_target;
    const double width = static_cast<double>(diff.cols());
    r.loss += w.beta_aux * diff.squaredNorm() / width;
    r.grad_aux = (2.0 * w.beta_aux / width) * diff;
  }
  return r;
}

LossResult distill_loss(const Vector& student_probs, const Vector& teacher_probs,
                        std::optional<std::span<const int>> labels, const DistillWeights& w,
                        const Matrix* aux_pred, const Matrix* aux_target) {
  Vector logits(student_probs.size());
  for (Eigen::Index t = 0; t < student_probs.size(); ++t) logits(t) = clamped_logit(student_probs(t));
  return distill_loss_from_logits(logits, teacher_probs, labels, w, aux_pred, aux_target);
}

}  // namespace trajgeo
