#pragma once

#include "trajgeo/trace.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <utility>
#include <string>
#include <vector>

namespace trajgeo {

/// A named tensor with its gradient buffer. `decay` marks weights that take
/// decoupled weight decay (biases do not).
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  bool decay = true;
};

class ParamSet {
 public:
  Param& add(std::string name, Matrix value, bool decay);
  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t size() const { return params_.size(); }
  std::vector<Param>::iterator begin() { return params_.begin(); }
  std::vector<Param>::iterator end() { return params_.end(); }
  std::vector<Param>::const_iterator begin() const { return params_.begin(); }
  std::vector<Param>::const_iterator end() const { return params_.end(); }

  void zero_grad();
  double grad_norm() const;
  void scale_grad(double s);
  bool all_finite() const;
  long long count() const;

 private:
  std::vector<Param> params_;
};

/// Columnwise affine standardization fitted on training rows.
struct Standardizer {
  Vector mean;
  Vector scale;  // columns with zero spread keep scale 1

  static Standardizer identity(int dim);
  static Standardizer fit(const Matrix& rows);
  Matrix apply(const Matrix& x) const;
  int dim() const { return static_cast<int>(mean.size()); }
};

/// input -> hidden1 -> hidden2 -> 1 logit, rectified-linear activations.
class TeacherModel {
 public:
  TeacherModel() = default;
  TeacherModel(int input_dim, int hidden1, int hidden2, std::uint64_t seed);

  int input_dim() const { return input_dim_; }
  int hidden1() const { return hidden1_; }
  int hidden2() const { return hidden2_; }

  Vector logits(const Matrix& features) const;
  Vector forward(const Matrix& features) const;

  /// Accumulates parameter gradients for dL/dlogits at the given inputs.
  void backward(const Matrix& features, const Vector& grad_logits);

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  Standardizer& input_norm() { return norm_; }
  const Standardizer& input_norm() const { return norm_; }

 private:
  int input_dim_ = 0, hidden1_ = 0, hidden2_ = 0;
  ParamSet params_;
  Standardizer norm_;
};

struct StudentTopology {
  int input_dim = 0;
  int hidden = 128;      // per direction
  int layers = 2;
  int head_hidden = 64;
  int aux_dim = 0;       // 0 disables the auxiliary head
};

struct StudentOutput {
  Vector logits;
  Vector probs;
  Matrix aux;  // m x aux_dim, empty without the auxiliary head
};

/// Stacked bidirectional LSTM (gate order i, f, g, o) with a step head and an
/// optional linear auxiliary head on the concatenated states.
class StudentModel {
 public:
  StudentModel() = default;
  StudentModel(const StudentTopology& topology, std::uint64_t seed);

  const StudentTopology& topology() const { return topo_; }
  bool has_aux() const { return topo_.aux_dim > 0; }

  StudentOutput forward(const Matrix& states) const;

  /// Runs forward, then accumulates gradients for the supplied output
  /// gradients. `grad_aux` may be empty.
  void backward(const Matrix& states, const Vector& grad_logits, const Matrix& grad_aux);

  /// One forward pass; `grads` maps the output to (dL/dlogits, dL/daux) and
  /// the parameter gradients are accumulated. Returns the forward output.
  using OutputGrad = std::function<std::pair<Vector, Matrix>(const StudentOutput&)>;
  StudentOutput forward_backward(const Matrix& states, const OutputGrad& grads);

  /// Copy without the auxiliary head, as shipped for inference.
  StudentModel without_aux() const;

  /// Swaps the two directions in every layer and permutes the consumers of
  /// the concatenated states, so running on a reversed trace reverses the output.
  StudentModel mirrored() const;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  Standardizer& input_norm() { return norm_; }
  const Standardizer& input_norm() const { return norm_; }
  Standardizer& aux_norm() { return aux_norm_; }
  const Standardizer& aux_norm() const { return aux_norm_; }

 private:
  StudentTopology topo_;
  ParamSet params_;
  Standardizer norm_;
  Standardizer aux_norm_;  // standardization of aux targets, training only
};

void save_teacher(const TeacherModel& model, const std::filesystem::path& path);
TeacherModel load_teacher(const std::filesystem::path& path);
/// Always writes the inference form (no auxiliary head).
void save_student(const StudentModel& model, const std::filesystem::path& path);
StudentModel load_student(const std::filesystem::path& path);

}  // namespace trajgeo
