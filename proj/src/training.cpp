#include "trajgeo/training.hpp"

#include "trajgeo/detect.hpp"
#include "trajgeo/error.hpp"
#include "trajgeo/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace trajgeo {

void TrainConfig::validate() const {
  require(learning_rate > 0, ErrorCode::ConfigError, "learning rate must be positive");
  require(weight_decay >= 0, ErrorCode::ConfigError, "weight decay must be nonnegative");
  require(batch_size >= 1, ErrorCode::ConfigError, "batch size must be positive");
  require(max_epochs >= 1, ErrorCode::ConfigError, "max epochs must be positive");
  require(patience >= 1, ErrorCode::ConfigError, "patience must be positive");
  require(lambda >= 0 && lambda <= 1, ErrorCode::ConfigError, "lambda must lie in [0,1]");
  require(tau_d > 0, ErrorCode::ConfigError, "tau_d must be positive");
  require(beta_aux >= 0, ErrorCode::ConfigError, "beta_aux must be nonnegative");
  require(theta >= 0 && theta <= 1, ErrorCode::ConfigError, "theta must lie in [0,1]");
  require(grad_clip >= 0, ErrorCode::ConfigError, "gradient clip must be nonnegative");
}

AdamW::AdamW(const ParamSet& params, double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params) {
    m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

void AdamW::step(ParamSet& params) {
  require(params.size() == m_.size(), ErrorCode::InvalidArgument, "optimizer bound to a different parameter set");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = params[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
    if (p.decay && wd_ > 0) p.value *= 1.0 - lr_ * wd_;
    p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

void write_train_log(const TrainLog& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << std::setprecision(17);
  out << "epoch,train_loss,val_loss,val_auroc,learning_rate\n";
  for (const auto& e : log.epochs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',';
    if (e.val_auroc)
      out << *e.val_auroc;
    else
      out << "NONE";
    out << ',' << e.learning_rate << '\n';
  }
}

namespace {

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  // Fisher-Yates with our own draws so the order does not depend on the
  // standard library's shuffle.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.engine()() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

void clip(ParamSet& params, double max_norm) {
  if (max_norm <= 0) return;
  const double n = params.grad_norm();
  if (n > max_norm) params.scale_grad(max_norm / n);
}

/// Tracks the best snapshot under "higher AUROC, else lower loss".
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  /// Returns true when the epoch improved on the best so far.
  bool update(const EpochLog& e) {
    bool better;
    if (!seen_) {
      better = true;
    } else if (e.val_auroc && best_auroc_) {
      better = *e.val_auroc > *best_auroc_;
    } else if (!e.val_auroc && !best_auroc_) {
      better = e.val_loss < best_loss_;
    } else {
      better = e.val_auroc.has_value();
    }
    if (better) {
      seen_ = true;
      best_auroc_ = e.val_auroc;
      best_loss_ = e.val_loss;
      best_epoch_ = e.epoch;
      stale_ = 0;
    } else {
      ++stale_;
    }
    return better;
  }
  bool exhausted() const { return stale_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  std::optional<double> best_auroc() const { return best_auroc_; }

 private:
  int patience_;
  int stale_ = 0;
  bool seen_ = false;
  std::optional<double> best_auroc_;
  double best_loss_ = 0.0;
  int best_epoch_ = 0;
};

std::vector<Matrix> snapshot(const ParamSet& params) {
  std::vector<Matrix> out;
  for (const auto& p : params) out.push_back(p.value);
  return out;
}

void restore(ParamSet& params, const std::vector<Matrix>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = values[i];
}

void check_finite(double loss, int epoch, const ParamSet& params) {
  if (!std::isfinite(loss) || !params.all_finite())
    fail(ErrorCode::Divergence, "non-finite loss or parameters at epoch " + std::to_string(epoch) +
                                    " (loss=" + std::to_string(loss) + ")");
}

void finish_log(TrainLog* log, std::vector<EpochLog> epochs, const EarlyStopper& stopper, bool early) {
  if (!log) return;
  log->epochs = std::move(epochs);
  log->best_epoch = stopper.best_epoch();
  log->best_val_auroc = stopper.best_auroc();
  log->stopped_early = early;
}

}  // namespace

TeacherModel train_teacher(std::span<const TeacherExample> train, std::span<const TeacherExample> val,
                           const TrainConfig& config, const TeacherShape& shape, TrainLog* log) {
  config.validate();
  require(!train.empty(), ErrorCode::InsufficientSamples, "teacher needs a nonempty train split");
  require(!val.empty(), ErrorCode::InsufficientSamples, "teacher needs a nonempty validation split");
  const int width = static_cast<int>(train.front().features.cols());
  Eigen::Index rows = 0;
  for (const auto& ex : train) {
    require(ex.features.cols() == width, ErrorCode::DimensionMismatch, "inconsistent feature width");
    require(static_cast<Eigen::Index>(ex.labels.size()) == ex.features.rows(), ErrorCode::LengthMismatch,
            "labels do not match feature rows");
    rows += ex.features.rows();
  }
  for (const auto& ex : val) {
    require(ex.features.cols() == width, ErrorCode::DimensionMismatch, "inconsistent feature width");
    require(static_cast<Eigen::Index>(ex.labels.size()) == ex.features.rows(), ErrorCode::LengthMismatch,
            "labels do not match feature rows");
  }
  Matrix pooled(rows, width);
  Eigen::Index r = 0;
  for (const auto& ex : train) {
    pooled.middleRows(r, ex.features.rows()) = ex.features;
    r += ex.features.rows();
  }

  TeacherModel model(width, shape.hidden1, shape.hidden2, derive_seed(config.seed, 1));
  model.input_norm() = Standardizer::fit(pooled);
  AdamW opt(model.params(), config.learning_rate, config.weight_decay);

  std::vector<int> val_labels;
  for (const auto& ex : val) val_labels.insert(val_labels.end(), ex.labels.begin(), ex.labels.end());

  EarlyStopper stopper(config.patience);
  std::vector<EpochLog> epochs;
  std::vector<Matrix> best = snapshot(model.params());
  bool early = false;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto order = shuffled(train.size(), derive_seed(config.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0.0;
    long long steps_seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      long long n = 0;
      for (std::size_t i = start; i < stop; ++i) n += train[order[i]].features.rows();
      model.params().zero_grad();
      for (std::size_t i = start; i < stop; ++i) {
        const auto& ex = train[order[i]];
        const LossResult lr = bce_loss_from_logits(model.logits(ex.features), ex.labels);
        loss_sum += lr.loss;
        model.backward(ex.features, lr.grad_logits / static_cast<double>(n));
      }
      steps_seen += n;
      clip(model.params(), config.grad_clip);
      opt.step(model.params());
    }
    const double train_loss = loss_sum / static_cast<double>(steps_seen);
    check_finite(train_loss, epoch, model.params());

    std::vector<double> val_scores;
    double val_loss = 0.0;
    for (const auto& ex : val) {
      const Vector lg = model.logits(ex.features);
      val_loss += bce_loss_from_logits(lg, ex.labels).loss;
      for (Eigen::Index t = 0; t < lg.size(); ++t) val_scores.push_back(sigmoid(lg(t)));
    }
    EpochLog e{epoch, train_loss, val_loss / static_cast<double>(val_scores.size()), auroc(val_scores, val_labels),
               opt.learning_rate()};
    epochs.push_back(e);
    if (stopper.update(e)) best = snapshot(model.params());
    if (stopper.exhausted()) {
      early = true;
      break;
    }
  }
  restore(model.params(), best);
  finish_log(log, std::move(epochs), stopper, early);
  return model;
}

StudentModel train_student(std::span<const StudentExample> train, std::span<const StudentExample> val,
                           const TrainConfig& config, StudentTopology topology, TrainLog* log) {
  config.validate();
  require(!train.empty(), ErrorCode::InsufficientSamples, "student needs a nonempty train split");
  require(!val.empty(), ErrorCode::InsufficientSamples, "student needs a nonempty validation split");
  const int d = static_cast<int>(train.front().states.cols());
  bool all_aux = config.beta_aux > 0;
  Eigen::Index rows = 0;
  for (const auto* split : {&train, &val}) {
    for (const auto& ex : *split) {
      require(ex.states.cols() == d, ErrorCode::DimensionMismatch, "inconsistent state width");
      require(ex.states.rows() >= 1, ErrorCode::MissingStates, "empty trace in student data");
      require(ex.teacher_probs.size() == ex.states.rows(), ErrorCode::Misalignment,
              "teacher probabilities do not align with trace steps");
      if (ex.labels)
        require(static_cast<Eigen::Index>(ex.labels->size()) == ex.states.rows(), ErrorCode::Misalignment,
                "labels do not align with trace steps");
      if (config.lambda > 0 && split == &train)
        require(ex.labels.has_value(), ErrorCode::InvalidArgument, "lambda > 0 needs labels on every training trace");
    }
  }
  int aux_dim = 0;
  for (const auto& ex : train) {
    rows += ex.states.rows();
    if (!ex.aux_target) {
      all_aux = false;
    } else {
      require(ex.aux_target->rows() == ex.states.rows(), ErrorCode::Misalignment, "aux targets do not align");
      if (aux_dim == 0) aux_dim = static_cast<int>(ex.aux_target->cols());
      require(ex.aux_target->cols() == aux_dim, ErrorCode::DimensionMismatch, "inconsistent aux target width");
    }
  }
  topology.input_dim = d;
  topology.aux_dim = all_aux ? aux_dim : 0;

  Matrix pooled(rows, d);
  Matrix pooled_aux(all_aux ? rows : 0, aux_dim);
  Eigen::Index r = 0;
  for (const auto& ex : train) {
    pooled.middleRows(r, ex.states.rows()) = ex.states;
    if (all_aux) pooled_aux.middleRows(r, ex.states.rows()) = *ex.aux_target;
    r += ex.states.rows();
  }

  StudentModel model(topology, derive_seed(config.seed, 2));
  model.input_norm() = Standardizer::fit(pooled);
  if (all_aux) model.aux_norm() = Standardizer::fit(pooled_aux);
  std::vector<Matrix> aux_std;
  for (const auto& ex : train) aux_std.push_back(all_aux ? model.aux_norm().apply(*ex.aux_target) : Matrix());

  AdamW opt(model.params(), config.learning_rate, config.weight_decay);
  DistillWeights w{config.lambda, config.tau_d, all_aux ? config.beta_aux : 0.0};
  DistillWeights w_val{config.lambda, config.tau_d, 0.0};

  std::vector<int> val_labels;
  for (const auto& ex : val) {
    for (Eigen::Index t = 0; t < ex.states.rows(); ++t) {
      if (ex.labels)
        val_labels.push_back((*ex.labels)[static_cast<std::size_t>(t)]);
      else
        val_labels.push_back(ex.teacher_probs(t) >= config.theta ? 1 : 0);
    }
  }

  auto label_span = [](const StudentExample& ex) -> std::optional<std::span<const int>> {
    if (!ex.labels) return std::nullopt;
    return std::span<const int>(*ex.labels);
  };

  EarlyStopper stopper(config.patience);
  std::vector<EpochLog> epochs;
  std::vector<Matrix> best = snapshot(model.params());
  bool early = false;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto order = shuffled(train.size(), derive_seed(config.seed, 2000 + static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0.0;
    long long steps_seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      long long n = 0;
      for (std::size_t i = start; i < stop; ++i) n += train[order[i]].states.rows();
      model.params().zero_grad();
      for (std::size_t i = start; i < stop; ++i) {
        const auto& ex = train[order[i]];
        const Matrix* aux_t = all_aux ? &aux_std[order[i]] : nullptr;
        const double inv = 1.0 / static_cast<double>(n);
        model.forward_backward(ex.states, [&](const StudentOutput& out) {
          const LossResult lr = distill_loss_from_logits(out.logits, ex.teacher_probs, label_span(ex), w,
                                                         all_aux ? &out.aux : nullptr, aux_t);
          loss_sum += lr.loss;
          return std::make_pair(Vector(lr.grad_logits * inv), lr.grad_aux.size() ? Matrix(lr.grad_aux * inv) : Matrix());
        });
      }
      steps_seen += n;
      clip(model.params(), config.grad_clip);
      opt.step(model.params());
    }
    const double train_loss = loss_sum / static_cast<double>(steps_seen);
    check_finite(train_loss, epoch, model.params());

    std::vector<double> val_scores;
    double val_loss = 0.0;
    for (const auto& ex : val) {
      const StudentOutput out = model.forward(ex.states);
      DistillWeights wv = w_val;
      if (!ex.labels) wv.lambda = 0.0;
      val_loss += distill_loss_from_logits(out.logits, ex.teacher_probs, label_span(ex), wv).loss;
      val_scores.insert(val_scores.end(), out.probs.data(), out.probs.data() + out.probs.size());
    }
    EpochLog e{epoch, train_loss, val_loss / static_cast<double>(val_scores.size()), auroc(val_scores, val_labels),
               opt.learning_rate()};
    epochs.push_back(e);
    if (stopper.update(e)) best = snapshot(model.params());
    if (stopper.exhausted()) {
      early = true;
      break;
    }
  }
  restore(model.params(), best);
  finish_log(log, std::move(epochs), stopper, early);
  return model;
}

}  // namespace trajgeo
