#include "trajgeo/error.hpp"
#include "trajgeo/nets.hpp"

#include <cmath>

namespace trajgeo {

Param& ParamSet::add(std::string name, Matrix value, bool decay) {
  require(!contains(name), ErrorCode::InvalidArgument, "duplicate parameter '" + name + "'");
  Param p;
  p.name = std::move(name);
  p.grad = Matrix::Zero(value.rows(), value.cols());
  p.value = std::move(value);
  p.decay = decay;
  params_.push_back(std::move(p));
  return params_.back();
}

Param& ParamSet::get(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  fail(ErrorCode::InvalidArgument, "no parameter named '" + name + "'");
}

const Param& ParamSet::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  fail(ErrorCode::InvalidArgument, "no parameter named '" + name + "'");
}

bool ParamSet::contains(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return true;
  return false;
}

void ParamSet::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

double ParamSet::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) s += p.grad.squaredNorm();
  return std::sqrt(s);
}

void ParamSet::scale_grad(double s) {
  for (auto& p : params_) p.grad *= s;
}

bool ParamSet::all_finite() const {
  for (const auto& p : params_)
    if (!p.value.allFinite()) return false;
  return true;
}

long long ParamSet::count() const {
  long long n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Standardizer Standardizer::identity(int dim) {
  return Standardizer{Vector::Zero(dim), Vector::Ones(dim)};
}

Standardizer Standardizer::fit(const Matrix& rows) {
  require(rows.rows() >= 1, ErrorCode::InsufficientSamples, "cannot standardize zero rows");
  Standardizer s;
  s.mean = rows.colwise().mean().transpose();
  s.scale.resize(rows.cols());
  for (Eigen::Index j = 0; j < rows.cols(); ++j) {
    const double var = (rows.col(j).array() - s.mean(j)).square().mean();
    const double sd = std::sqrt(var);
    s.scale(j) = sd > 1e-12 ? sd : 1.0;
  }
  return s;
}

Matrix Standardizer::apply(const Matrix& x) const {
  require(x.cols() == mean.size(), ErrorCode::DimensionMismatch,
          "input width " + std::to_string(x.cols()) + " != " + std::to_string(mean.size()));
  return ((x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).matrix();
}

}  // namespace trajgeo
