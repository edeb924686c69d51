#pragma once

#include "trajgeo/losses.hpp"
#include "trajgeo/nets.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace trajgeo {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  int batch_size = 8;  // traces
  int max_epochs = 500;
  int patience = 10;
  double lambda = 0.5;
  double tau_d = 2.0;
  double beta_aux = 0.1;
  double theta = 0.5;
  double grad_clip = 5.0;  // global norm; 0 disables
  std::uint64_t seed = 0;

  void validate() const;
};

/// Adaptive moments with decoupled weight decay on parameters flagged `decay`.
class AdamW {
 public:
  AdamW(const ParamSet& params, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);
  void step(ParamSet& params);
  double learning_rate() const { return lr_; }

 private:
  double lr_, wd_, beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<Matrix> m_, v_;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;  // mean per step
  double val_loss = 0.0;
  std::optional<double> val_auroc;
  double learning_rate = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  int best_epoch = 0;
  std::optional<double> best_val_auroc;
  bool stopped_early = false;
};

void write_train_log(const TrainLog& log, const std::filesystem::path& path);

struct TeacherExample {
  Matrix features;  // m x (k+6)
  std::vector<int> labels;
};

struct TeacherShape {
  int hidden1 = 64;
  int hidden2 = 64;
};

/// Returns the snapshot with the best validation AUROC (validation loss when
/// AUROC is undefined).
TeacherModel train_teacher(std::span<const TeacherExample> train, std::span<const TeacherExample> val,
                           const TrainConfig& config, const TeacherShape& shape = {}, TrainLog* log = nullptr);

struct StudentExample {
  Matrix states;        // m x d
  Vector teacher_probs;  // m
  std::optional<std::vector<int>> labels;
  std::optional<Matrix> aux_target;  // m x (k+6)
};

/// `topology.input_dim` and `topology.aux_dim` are filled in from the data;
/// the aux head is built only when every training example carries a target and
/// beta_aux > 0. Validation AUROC uses labels when present, otherwise the
/// teacher's thresholded decisions.
StudentModel train_student(std::span<const StudentExample> train, std::span<const StudentExample> val,
                           const TrainConfig& config, StudentTopology topology = {}, TrainLog* log = nullptr);

}  // namespace trajgeo
