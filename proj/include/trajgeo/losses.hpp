#pragma once

#include "trajgeo/trace.hpp"

#include <optional>
#include <span>

namespace trajgeo {

inline constexpr double kProbClamp = 1e-7;

double sigmoid(double x);
/// logit of p after clamping into [1e-7, 1 - 1e-7].
double clamped_logit(double p);
double clamp_prob(double p);

/// KL(Bern(p) || Bern(q)).
double bernoulli_kl(double p, double q);

struct LossResult {
  double loss = 0.0;
  Vector grad_logits;  // dL/d(student or teacher logit), one per step
  Matrix grad_aux;     // dL/d(aux prediction); empty when the aux term is off
};

/// Summed binary cross-entropy. The gradient with respect to each logit is p - y.
LossResult bce_loss(const Vector& probs, std::span<const int> labels);
LossResult bce_loss_from_logits(const Vector& logits, std::span<const int> labels);

struct DistillWeights {
  double lambda = 0.5;
  double tau_d = 2.0;
  double beta_aux = 0.1;
};

/// lambda * BCE(y, p_S) + (1 - lambda) * tau_d^2 * sum KL(Bern(q_T) || Bern(q_S))
///   + beta_aux * sum_t mean_j (aux_pred - aux_target)^2,
/// with q = sigmoid(logit(p) / tau_d). Labels may be omitted only when lambda = 0;
/// the aux term is skipped when either aux matrix is null or beta_aux = 0.
LossResult distill_loss_from_logits(const Vector& student_logits, const Vector& teacher_probs,
                                    std::optional<std::span<const int>> labels, const DistillWeights& w,
                                    const Matrix* aux_pred = nullptr, const Matrix* aux_target = nullptr);

LossResult distill_loss(const Vector& student_probs, const Vector& teacher_probs,
                        std::optional<std::span<const int>> labels, const DistillWeights& w,
                        const Matrix* aux_pred = nullptr, const Matrix* aux_target = nullptr);

}  // namespace trajgeo
