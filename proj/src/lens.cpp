#include "trajgeo/lens.hpp"

#include "trajgeo/error.hpp"

#include <json.hpp>

#include <fstream>

namespace trajgeo {

using nlohmann::json;

Matrix TraceNormalizer::apply(const Matrix& states) const {
  require(states.cols() == mean.size(), ErrorCode::DimensionMismatch, "normalizer width mismatch");
  return (states.rowwise() - mean.transpose()) / (scale + epsilon);
}

TraceNormalizer fit_normalizer(const Matrix& states, std::span<const int> rows, double epsilon) {
  require(!rows.empty(), ErrorCode::NoCorrectPrefix, "no rows to anchor the normalizer");
  require(epsilon > 0, ErrorCode::InvalidArgument, "epsilon must be positive");
  TraceNormalizer n;
  n.epsilon = epsilon;
  n.mean = Vector::Zero(states.cols());
  for (int r : rows) n.mean += states.row(r).transpose();
  n.mean /= static_cast<double>(rows.size());
  double ss = 0.0;
  for (int r : rows) ss += (states.row(r).transpose() - n.mean).squaredNorm();
  n.scale = std::sqrt(ss / (static_cast<double>(states.cols()) * static_cast<double>(rows.size())));
  return n;
}

NormalizedTrace normalize_trace(const Trace& trace, double epsilon) {
  require(trace.labeled(), ErrorCode::InvalidLabel, "trace '" + trace.id + "' has no labels");
  std::vector<int> correct;
  for (int t = 0; t < trace.steps(); ++t)
    if ((*trace.labels)[static_cast<std::size_t>(t)] == 0) correct.push_back(t);
  require(!correct.empty(), ErrorCode::NoCorrectPrefix, "trace '" + trace.id + "' has no correct step");
  NormalizedTrace out;
  out.normalizer = fit_normalizer(trace.states, correct, epsilon);
  out.states = out.normalizer.apply(trace.states);
  return out;
}

NormalizedTrace normalize_with_fallback(const Trace& trace, double epsilon, bool* fell_back) {
  std::vector<int> anchor;
  if (trace.labeled())
    for (int t = 0; t < trace.steps(); ++t)
      if ((*trace.labels)[static_cast<std::size_t>(t)] == 0) anchor.push_back(t);
  const bool fallback = anchor.empty();
  if (fallback)
    for (int t = 0; t < trace.steps(); ++t) anchor.push_back(t);
  if (fell_back) *fell_back = fallback;
  NormalizedTrace out;
  out.normalizer = fit_normalizer(trace.states, anchor, epsilon);
  out.states = out.normalizer.apply(trace.states);
  return out;
}

MomentAccumulator::MomentAccumulator(int dim) : mean_(Vector::Zero(dim)), scatter_(Matrix::Zero(dim, dim)) {}

void MomentAccumulator::add(const Eigen::Ref<const Eigen::RowVectorXd>& x, double weight) {
  require(x.size() == mean_.size(), ErrorCode::DimensionMismatch, "moment accumulator width mismatch");
  require(weight >= 0, ErrorCode::InvalidArgument, "negative sample weight");
  if (weight == 0.0) return;
  const double total = weight_ + weight;
  const Vector delta = x.transpose() - mean_;
  mean_ += (weight / total) * delta;
  scatter_.noalias() += (weight * weight_ / total) * delta * delta.transpose();
  weight_ = total;
  ++count_;
}

void MomentAccumulator::merge(const MomentAccumulator& other) {
  if (other.weight_ == 0.0) return;
  if (weight_ == 0.0) {
    *this = other;
    return;
  }
  require(other.dim() == dim(), ErrorCode::DimensionMismatch, "moment accumulator width mismatch");
  const double total = weight_ + other.weight_;
  const Vector delta = other.mean_ - mean_;
  mean_ += (other.weight_ / total) * delta;
  scatter_ += other.scatter_ + (weight_ * other.weight_ / total) * delta * delta.transpose();
  weight_ = total;
  count_ += other.count_;
}

Matrix MomentAccumulator::covariance() const {
  require(weight_ > 0, ErrorCode::UnderdeterminedMoments, "covariance of an empty sample");
  Matrix c = scatter_ / weight_;
  return 0.5 * (c + c.transpose());
}

MomentEstimates estimate_moments(std::span<const LabeledStates> traces, double rho) {
  require(rho >= 0.0 && rho <= 1.0, ErrorCode::InvalidArgument, "rho must lie in [0,1]");
  require(!traces.empty(), ErrorCode::UnderdeterminedMoments, "no traces");
  const int d = static_cast<int>(traces.front().states->cols());
  MomentAccumulator background(d), target(d);
  long long first_errors = 0;
  for (const auto& tr : traces) {
    const Matrix& s = *tr.states;
    require(static_cast<int>(s.cols()) == d, ErrorCode::DimensionMismatch, "mixed state widths");
    require(static_cast<Eigen::Index>(tr.labels.size()) == s.rows(), ErrorCode::LengthMismatch,
            "labels do not match step count");
    bool seen_error = false;
    for (Eigen::Index t = 0; t < s.rows(); ++t) {
      if (tr.labels[static_cast<std::size_t>(t)] == 0) {
        background.add(s.row(t), 1.0);
      } else if (!seen_error) {
        target.add(s.row(t), 1.0);
        seen_error = true;
        ++first_errors;
      } else {
        target.add(s.row(t), rho);
      }
    }
  }
  require(background.count() >= 2, ErrorCode::UnderdeterminedMoments, "fewer than 2 correct steps");
  require(first_errors >= 1, ErrorCode::UnderdeterminedMoments, "no first-error step");
  MomentEstimates m;
  m.mu0 = background.mean();
  m.c0 = background.covariance();
  m.mu1 = target.mean();
  m.c1 = target.covariance();
  m.rho = rho;
  m.n0 = background.count();
  m.n1_effective = target.weight();
  return m;
}

Matrix contrastive_matrix(const MomentEstimates& moments, double alpha) {
  require(alpha >= 0.0, ErrorCode::InvalidArgument, "alpha must be nonnegative");
  const auto d = moments.mu0.size();
  require(moments.mu1.size() == d && moments.c0.rows() == d && moments.c1.rows() == d,
          ErrorCode::DimensionMismatch, "moment dimensions disagree");
  const Vector delta = moments.mu1 - moments.mu0;
  Matrix m = delta * delta.transpose() + moments.c1 - alpha * moments.c0;
  return 0.5 * (m + m.transpose());
}

ContrastiveOperator::ContrastiveOperator(const StateStream& stream, double alpha) : stream_(stream), alpha_(alpha) {
  require(alpha >= 0.0, ErrorCode::InvalidArgument, "alpha must be nonnegative");
  const int d = stream.dim();
  Vector s0 = Vector::Zero(d), s1 = Vector::Zero(d);
  stream.for_each([&](const Eigen::Ref<const Matrix>& rows, int cls, const Vector& w) {
    if (cls == 0) {
      s0.noalias() += rows.transpose() * w;
      w0_ += w.sum();
    } else {
      s1.noalias() += rows.transpose() * w;
      w1_ += w.sum();
    }
  });
  require(w0_ > 0 && w1_ > 0, ErrorCode::UnderdeterminedMoments, "a class has zero total weight");
  mu0_ = s0 / w0_;
  mu1_ = s1 / w1_;
}

Matrix ContrastiveOperator::apply(const Matrix& block) const {
  const int d = dim();
  require(block.rows() == d, ErrorCode::DimensionMismatch, "operator block height mismatch");
  Matrix acc0 = Matrix::Zero(d, block.cols());
  Matrix acc1 = Matrix::Zero(d, block.cols());
  stream_.for_each([&](const Eigen::Ref<const Matrix>& rows, int cls, const Vector& w) {
    const Vector& mu = cls == 0 ? mu0_ : mu1_;
    const Matrix centered = rows.rowwise() - mu.transpose();
    const Matrix proj = w.asDiagonal() * (centered * block);
    (cls == 0 ? acc0 : acc1).noalias() += centered.transpose() * proj;
  });
  const Vector delta = mu1_ - mu0_;
  return delta * (delta.transpose() * block) + acc1 / w1_ - (alpha_ / w0_) * acc0;
}

std::size_t ContrastiveOperator::scratch_bytes(int cols) const {
  const auto d = static_cast<std::size_t>(dim());
  const auto r = static_cast<std::size_t>(stream_.max_block_rows());
  const auto c = static_cast<std::size_t>(cols);
  return (2 * d * c + r * d + r * c + d) * sizeof(double);
}

namespace {

struct Prepared {
  Matrix states;
  std::vector<int> labels;
};

class InMemoryStream final : public StateStream {
 public:
  InMemoryStream(const std::vector<Prepared>& traces, double rho) : traces_(traces), rho_(rho) {
    for (const auto& t : traces_) max_rows_ = std::max(max_rows_, static_cast<int>(t.states.rows()));
  }
  int dim() const override { return traces_.empty() ? 0 : static_cast<int>(traces_.front().states.cols()); }
  int max_block_rows() const override { return max_rows_; }

  void for_each(const Visitor& visit) const override {
    for (const auto& t : traces_) {
      std::vector<Eigen::Index> bg, tg;
      std::vector<double> tw;
      bool seen = false;
      for (Eigen::Index i = 0; i < t.states.rows(); ++i) {
        if (t.labels[static_cast<std::size_t>(i)] == 0) {
          bg.push_back(i);
        } else if (!seen) {
          tg.push_back(i);
          tw.push_back(1.0);
          seen = true;
        } else if (rho_ > 0) {
          tg.push_back(i);
          tw.push_back(rho_);
        }
      }
      if (!bg.empty()) {
        Matrix rows = t.states(bg, Eigen::all);
        visit(rows, 0, Vector::Ones(static_cast<Eigen::Index>(bg.size())));
      }
      if (!tg.empty()) {
        Matrix rows = t.states(tg, Eigen::all);
        visit(rows, 1, Eigen::Map<const Vector>(tw.data(), static_cast<Eigen::Index>(tw.size())));
      }
    }
  }

 private:
  const std::vector<Prepared>& traces_;
  double rho_;
  int max_rows_ = 0;
};

}  // namespace

ContrastiveLens fit_lens(std::span<const Trace> traces, const LensOptions& options) {
  require(!traces.empty(), ErrorCode::UnderdeterminedMoments, "no traces to fit a lens on");
  const int d = traces.front().dim();
  require(options.k >= 1 && options.k <= d, ErrorCode::InvalidRank,
          "k=" + std::to_string(options.k) + " outside [1," + std::to_string(d) + "]");

  ContrastiveLens lens;
  lens.dim = d;
  lens.k = options.k;
  lens.alpha = options.alpha;
  lens.rho = options.rho;
  lens.epsilon = options.epsilon;
  lens.method = options.method == EigMethod::Auto ? (d <= 512 ? EigMethod::Dense : EigMethod::Randomized)
                                                  : options.method;

  std::vector<Prepared> prepared;
  prepared.reserve(traces.size());
  for (const auto& tr : traces) {
    require(tr.dim() == d, ErrorCode::DimensionMismatch, "mixed state widths");
    try {
      NormalizedTrace nt = normalize_trace(tr, options.epsilon);
      prepared.push_back({std::move(nt.states), *tr.labels});
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoCorrectPrefix) throw;
      lens.diagnostics.excluded_ids.push_back(tr.id);
    }
  }
  lens.diagnostics.traces_used = static_cast<int>(prepared.size());

  Eigenpairs pairs;
  if (lens.method == EigMethod::Dense) {
    std::vector<LabeledStates> views;
    views.reserve(prepared.size());
    for (const auto& p : prepared) views.push_back({&p.states, p.labels});
    const MomentEstimates moments = estimate_moments(views, options.rho);
    lens.diagnostics.n0 = moments.n0;
    lens.diagnostics.n1_effective = moments.n1_effective;
    pairs = top_k_eigenspace(contrastive_matrix(moments, options.alpha), options.k, EigMethod::Dense);
  } else {
    long long n0 = 0, n1 = 0;
    for (const auto& p : prepared) {
      bool seen = false;
      for (int y : p.labels) {
        if (y == 0) ++n0;
        else if (!seen) { ++n1; seen = true; }
      }
    }
    require(n0 >= 2, ErrorCode::UnderdeterminedMoments, "fewer than 2 correct steps");
    require(n1 >= 1, ErrorCode::UnderdeterminedMoments, "no first-error step");
    InMemoryStream stream(prepared, options.rho);
    ContrastiveOperator op(stream, options.alpha);
    lens.diagnostics.n0 = n0;
    lens.diagnostics.n1_effective = op.weight1();
    RandomizedOptions ro;
    ro.seed = options.seed;
    pairs = randomized_top_k(op, options.k, ro);
    canonicalize_signs(pairs.vectors);
  }
  lens.u = std::move(pairs.vectors);
  lens.eigenvalues = std::move(pairs.values);
  lens.diagnostics.solver_iterations = pairs.iterations;
  return lens;
}

Matrix project(const ContrastiveLens& lens, const Matrix& normalized_states) {
  require(normalized_states.cols() == lens.u.rows(), ErrorCode::DimensionMismatch,
          "states have d=" + std::to_string(normalized_states.cols()) + ", lens expects " +
              std::to_string(lens.u.rows()));
  return normalized_states * lens.u;
}

void save_lens(const ContrastiveLens& lens, const std::filesystem::path& path) {
  json j;
  j["format"] = "trajgeo-lens";
  j["version"] = 1;
  j["dim"] = lens.dim;
  j["k"] = lens.k;
  j["alpha"] = lens.alpha;
  j["rho"] = lens.rho;
  j["epsilon"] = lens.epsilon;
  j["method"] = to_string(lens.method);
  j["normalizer_policy"] = lens.normalizer_policy;
  std::vector<double> u;
  u.reserve(static_cast<std::size_t>(lens.u.size()));
  for (Eigen::Index i = 0; i < lens.u.rows(); ++i)
    for (Eigen::Index c = 0; c < lens.u.cols(); ++c) u.push_back(lens.u(i, c));
  j["u_row_major"] = u;
  j["eigenvalues"] = std::vector<double>(lens.eigenvalues.data(), lens.eigenvalues.data() + lens.eigenvalues.size());
  j["diagnostics"] = {{"traces_used", lens.diagnostics.traces_used},
                      {"excluded_ids", lens.diagnostics.excluded_ids},
                      {"n0", lens.diagnostics.n0},
                      {"n1_effective", lens.diagnostics.n1_effective},
                      {"solver_iterations", lens.diagnostics.solver_iterations}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << j.dump(1) << '\n';
}

ContrastiveLens load_lens(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  json j;
  try {
    in >> j;
    require(j.value("format", "") == "trajgeo-lens", ErrorCode::MalformedRecord, "not a lens file");
    require(j.value("version", 0) == 1, ErrorCode::MalformedRecord, "unsupported lens version");
    ContrastiveLens lens;
    lens.dim = j.at("dim").get<int>();
    lens.k = j.at("k").get<int>();
    lens.alpha = j.at("alpha").get<double>();
    lens.rho = j.at("rho").get<double>();
    lens.epsilon = j.at("epsilon").get<double>();
    lens.method = eig_method_from_string(j.at("method").get<std::string>());
    lens.normalizer_policy = j.at("normalizer_policy").get<std::string>();
    const auto u = j.at("u_row_major").get<std::vector<double>>();
    require(u.size() == static_cast<std::size_t>(lens.dim) * static_cast<std::size_t>(lens.k),
            ErrorCode::MalformedRecord, "lens matrix has wrong size");
    lens.u.resize(lens.dim, lens.k);
    for (int i = 0; i < lens.dim; ++i)
      for (int c = 0; c < lens.k; ++c) lens.u(i, c) = u[static_cast<std::size_t>(i) * lens.k + c];
    const auto ev = j.at("eigenvalues").get<std::vector<double>>();
    lens.eigenvalues = Eigen::Map<const Vector>(ev.data(), static_cast<Eigen::Index>(ev.size()));
    const auto& dg = j.at("diagnostics");
    lens.diagnostics.traces_used = dg.at("traces_used").get<int>();
    lens.diagnostics.excluded_ids = dg.at("excluded_ids").get<std::vector<std::string>>();
    lens.diagnostics.n0 = dg.at("n0").get<long long>();
    lens.diagnostics.n1_effective = dg.at("n1_effective").get<double>();
    lens.diagnostics.solver_iterations = dg.at("solver_iterations").get<int>();
    return lens;
  } catch (const json::exception& e) {
    fail(ErrorCode::MalformedRecord, path.string() + ": " + e.what());
  }
}

}  // namespace trajgeo
