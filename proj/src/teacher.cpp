#include "model_json.hpp"
#include "trajgeo/error.hpp"
#include "trajgeo/losses.hpp"
#include "trajgeo/nets.hpp"
#include "trajgeo/rng.hpp"

#include <cmath>

namespace trajgeo {

namespace {

Matrix he_normal(Rng& rng, int rows, int cols, double gain) {
  return rng.gaussian(rows, cols) * std::sqrt(gain / cols);
}

Matrix add_bias(Matrix z, const Matrix& b) {
  z.rowwise() += b.col(0).transpose();
  return z;
}

}  // namespace

TeacherModel::TeacherModel(int input_dim, int hidden1, int hidden2, std::uint64_t seed)
    : input_dim_(input_dim), hidden1_(hidden1), hidden2_(hidden2), norm_(Standardizer::identity(input_dim)) {
  require(input_dim >= 1 && hidden1 >= 1 && hidden2 >= 1, ErrorCode::InvalidArgument, "teacher widths must be positive");
  Rng rng(seed);
  params_.add("w1", he_normal(rng, hidden1, input_dim, 2.0), true);
  params_.add("b1", Matrix::Zero(hidden1, 1), false);
  params_.add("w2", he_normal(rng, hidden2, hidden1, 2.0), true);
  params_.add("b2", Matrix::Zero(hidden2, 1), false);
  params_.add("w3", he_normal(rng, 1, hidden2, 1.0), true);
  params_.add("b3", Matrix::Zero(1, 1), false);
}

Vector TeacherModel::logits(const Matrix& features) const {
  require(features.cols() == input_dim_, ErrorCode::DimensionMismatch,
          "teacher expects width " + std::to_string(input_dim_) + ", got " + std::to_string(features.cols()));
  const Matrix x = norm_.apply(features);
  const Matrix a1 = add_bias(x * params_[0].value.transpose(), params_[1].value).cwiseMax(0.0);
  const Matrix a2 = add_bias(a1 * params_[2].value.transpose(), params_[3].value).cwiseMax(0.0);
  return add_bias(a2 * params_[4].value.transpose(), params_[5].value).col(0);
}

Vector TeacherModel::forward(const Matrix& features) const {
  return logits(features).unaryExpr([](double l) { return sigmoid(l); });
}

void TeacherModel::backward(const Matrix& features, const Vector& grad_logits) {
  require(features.rows() == grad_logits.size(), ErrorCode::LengthMismatch, "gradient length mismatch");
  const Matrix x = norm_.apply(features);
  const Matrix z1 = add_bias(x * params_[0].value.transpose(), params_[1].value);
  const Matrix a1 = z1.cwiseMax(0.0);
  const Matrix z2 = add_bias(a1 * params_[2].value.transpose(), params_[3].value);
  const Matrix a2 = z2.cwiseMax(0.0);

  params_[4].grad += grad_logits.transpose() * a2;
  params_[5].grad(0, 0) += grad_logits.sum();
  Matrix dz2 = grad_logits * params_[4].value;
  dz2.array() *= (z2.array() > 0).cast<double>();
  params_[2].grad += dz2.transpose() * a1;
  params_[3].grad += dz2.colwise().sum().transpose();
  Matrix dz1 = dz2 * params_[2].value;
  dz1.array() *= (z1.array() > 0).cast<double>();
  params_[0].grad += dz1.transpose() * x;
  params_[1].grad += dz1.colwise().sum().transpose();
}

void save_teacher(const TeacherModel& model, const std::filesystem::path& path) {
  detail::json j;
  j["format"] = "trajgeo-model";
  j["version"] = 1;
  j["kind"] = "teacher";
  j["topology"] = {{"input_dim", model.input_dim()}, {"hidden1", model.hidden1()}, {"hidden2", model.hidden2()},
                   {"activation", "relu"}};
  j["input_norm"] = detail::standardizer_json(model.input_norm());
  j["tensors"] = detail::params_json(model.params(), nullptr);
  detail::write_json(j, path);
}

TeacherModel load_teacher(const std::filesystem::path& path) {
  const auto j = detail::read_json(path);
  require(j.value("format", "") == "trajgeo-model" && j.value("kind", "") == "teacher", ErrorCode::MalformedRecord,
          path.string() + " is not a teacher model file");
  require(j.value("version", 0) == 1, ErrorCode::MalformedRecord, "unsupported model version");
  const auto& t = j.at("topology");
  TeacherModel m(t.at("input_dim").get<int>(), t.at("hidden1").get<int>(), t.at("hidden2").get<int>(), 0);
  detail::load_params(m.params(), j.at("tensors"));
  m.input_norm() = detail::standardizer_from_json(j.at("input_norm"));
  return m;
}

}  // namespace trajgeo
