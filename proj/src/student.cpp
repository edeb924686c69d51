#include "model_json.hpp"
#include "trajgeo/error.hpp"
#include "trajgeo/losses.hpp"
#include "trajgeo/nets.hpp"
#include "trajgeo/rng.hpp"

#include <cmath>

namespace trajgeo {

namespace {

using Row = Eigen::RowVectorXd;

const char* kDirNames[2] = {"fwd", "bwd"};

std::string pname(int layer, int dir, const char* what) {
  return "l" + std::to_string(layer) + "." + kDirNames[dir] + "." + what;
}

Matrix uniform(Rng& rng, int rows, int cols, double bound) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = bound * (2.0 * rng.uniform() - 1.0);
  return m;
}

Row sigm(const Row& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

struct DirCache {
  Matrix i, f, g, o, c, tc, h;  // each m x H, indexed by time
};

struct LayerCache {
  Matrix input;  // m x in
  DirCache dir[2];
  Matrix out;    // m x 2H, [forward | backward]
};

DirCache run_direction(const Matrix& x, const Matrix& wx, const Matrix& wh, const Matrix& b, bool reverse) {
  const Eigen::Index m = x.rows();
  const Eigen::Index hd = wh.cols();
  Matrix pre = x * wx.transpose();
  pre.rowwise() += b.col(0).transpose();
  DirCache dc;
  for (Matrix* mat : {&dc.i, &dc.f, &dc.g, &dc.o, &dc.c, &dc.tc, &dc.h}) mat->resize(m, hd);
  Row h_prev = Row::Zero(hd), c_prev = Row::Zero(hd);
  for (Eigen::Index s = 0; s < m; ++s) {
    const Eigen::Index t = reverse ? m - 1 - s : s;
    const Row gates = pre.row(t) + h_prev * wh.transpose();
    const Row ig = sigm(gates.segment(0, hd));
    const Row fg = sigm(gates.segment(hd, hd));
    const Row gg = gates.segment(2 * hd, hd).array().tanh().matrix();
    const Row og = sigm(gates.segment(3 * hd, hd));
    const Row c = fg.cwiseProduct(c_prev) + ig.cwiseProduct(gg);
    const Row tc = c.array().tanh().matrix();
    const Row h = og.cwiseProduct(tc);
    dc.i.row(t) = ig;
    dc.f.row(t) = fg;
    dc.g.row(t) = gg;
    dc.o.row(t) = og;
    dc.c.row(t) = c;
    dc.tc.row(t) = tc;
    dc.h.row(t) = h;
    h_prev = h;
    c_prev = c;
  }
  return dc;
}

/// Backpropagation through time for one direction; returns dL/dx.
Matrix backward_direction(const Matrix& x, const DirCache& dc, const Matrix& dh_out, bool reverse, Param& wx,
                          Param& wh, Param& b) {
  const Eigen::Index m = x.rows();
  const Eigen::Index hd = wh.value.cols();
  Matrix dgates(m, 4 * hd);
  Matrix h_prev_rows = Matrix::Zero(m, hd);
  Row dh_next = Row::Zero(hd), dc_next = Row::Zero(hd);
  for (Eigen::Index s = m - 1; s >= 0; --s) {
    const Eigen::Index t = reverse ? m - 1 - s : s;
    const Eigen::Index prev = reverse ? t + 1 : t - 1;
    const bool has_prev = s > 0;
    const Row c_prev = has_prev ? Row(dc.c.row(prev)) : Row::Zero(hd);
    if (has_prev) h_prev_rows.row(t) = dc.h.row(prev);

    const Row dh = dh_out.row(t) + dh_next;
    const Row ig = dc.i.row(t), fg = dc.f.row(t), gg = dc.g.row(t), og = dc.o.row(t), tc = dc.tc.row(t);
    const Row d_o = dh.cwiseProduct(tc);
    const Row dcell = dh.cwiseProduct(og).cwiseProduct((1.0 - tc.array().square()).matrix()) + dc_next;
    const Row d_i = dcell.cwiseProduct(gg);
    const Row d_g = dcell.cwiseProduct(ig);
    const Row d_f = dcell.cwiseProduct(c_prev);
    dc_next = dcell.cwiseProduct(fg);

    dgates.block(t, 0, 1, hd) = (d_i.array() * ig.array() * (1.0 - ig.array())).matrix();
    dgates.block(t, hd, 1, hd) = (d_f.array() * fg.array() * (1.0 - fg.array())).matrix();
    dgates.block(t, 2 * hd, 1, hd) = (d_g.array() * (1.0 - gg.array().square())).matrix();
    dgates.block(t, 3 * hd, 1, hd) = (d_o.array() * og.array() * (1.0 - og.array())).matrix();
    dh_next = dgates.row(t) * wh.value;
  }
  wx.grad += dgates.transpose() * x;
  wh.grad += dgates.transpose() * h_prev_rows;
  b.grad += dgates.colwise().sum().transpose();
  return dgates * wx.value;
}

}  // namespace

StudentModel::StudentModel(const StudentTopology& topology, std::uint64_t seed) : topo_(topology) {
  require(topo_.input_dim >= 1 && topo_.hidden >= 1 && topo_.layers >= 1 && topo_.head_hidden >= 1 &&
              topo_.aux_dim >= 0,
          ErrorCode::InvalidArgument, "student widths must be positive");
  Rng rng(seed);
  const int hd = topo_.hidden;
  const double bound = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int l = 0; l < topo_.layers; ++l) {
    const int in = l == 0 ? topo_.input_dim : 2 * hd;
    for (int dir = 0; dir < 2; ++dir) {
      params_.add(pname(l, dir, "wx"), uniform(rng, 4 * hd, in, bound), true);
      params_.add(pname(l, dir, "wh"), uniform(rng, 4 * hd, hd, bound), true);
      Matrix b = uniform(rng, 4 * hd, 1, bound);
      b.block(hd, 0, hd, 1).array() += 1.0;  // forget gate
      params_.add(pname(l, dir, "b"), std::move(b), false);
    }
  }
  params_.add("head.w1", rng.gaussian(topo_.head_hidden, 2 * hd) * std::sqrt(2.0 / (2 * hd)), true);
  params_.add("head.b1", Matrix::Zero(topo_.head_hidden, 1), false);
  params_.add("head.w2", rng.gaussian(1, topo_.head_hidden) * std::sqrt(1.0 / topo_.head_hidden), true);
  params_.add("head.b2", Matrix::Zero(1, 1), false);
  if (topo_.aux_dim > 0) {
    params_.add("aux.w", rng.gaussian(topo_.aux_dim, 2 * hd) * std::sqrt(1.0 / (2 * hd)), true);
    params_.add("aux.b", Matrix::Zero(topo_.aux_dim, 1), false);
  }
  norm_ = Standardizer::identity(topo_.input_dim);
  aux_norm_ = Standardizer::identity(topo_.aux_dim);
}

namespace {

struct Forward {
  std::vector<LayerCache> layers;
  Matrix z1, a1;
  StudentOutput out;
};

Forward run_forward(const StudentModel& model, const Matrix& states) {
  const auto& topo = model.topology();
  require(states.rows() >= 1, ErrorCode::MissingStates, "student needs at least one step");
  require(states.cols() == topo.input_dim, ErrorCode::DimensionMismatch,
          "student expects d=" + std::to_string(topo.input_dim) + ", got " + std::to_string(states.cols()));
  const auto& p = model.params();
  Forward fw;
  Matrix input = model.input_norm().apply(states);
  const int hd = topo.hidden;
  for (int l = 0; l < topo.layers; ++l) {
    LayerCache lc;
    lc.input = input;
    for (int dir = 0; dir < 2; ++dir)
      lc.dir[dir] = run_direction(input, p.get(pname(l, dir, "wx")).value, p.get(pname(l, dir, "wh")).value,
                                  p.get(pname(l, dir, "b")).value, dir == 1);
    lc.out.resize(states.rows(), 2 * hd);
    lc.out.leftCols(hd) = lc.dir[0].h;
    lc.out.rightCols(hd) = lc.dir[1].h;
    input = lc.out;
    fw.layers.push_back(std::move(lc));
  }
  const Matrix& c = fw.layers.back().out;
  fw.z1 = c * p.get("head.w1").value.transpose();
  fw.z1.rowwise() += p.get("head.b1").value.col(0).transpose();
  fw.a1 = fw.z1.cwiseMax(0.0);
  fw.out.logits = (fw.a1 * p.get("head.w2").value.transpose()).col(0).array() + p.get("head.b2").value(0, 0);
  fw.out.probs = fw.out.logits.unaryExpr([](double l) { return sigmoid(l); });
  if (model.has_aux()) {
    fw.out.aux = c * p.get("aux.w").value.transpose();
    fw.out.aux.rowwise() += p.get("aux.b").value.col(0).transpose();
  }
  return fw;
}

}  // namespace

StudentOutput StudentModel::forward(const Matrix& states) const { return run_forward(*this, states).out; }

void StudentModel::backward(const Matrix& states, const Vector& grad_logits, const Matrix& grad_aux) {
  forward_backward(states, [&](const StudentOutput&) { return std::make_pair(grad_logits, grad_aux); });
}

StudentOutput StudentModel::forward_backward(const Matrix& states, const OutputGrad& grads) {
  Forward fw = run_forward(*this, states);
  const auto [grad_logits, grad_aux] = grads(fw.out);
  const Eigen::Index m = states.rows();
  require(grad_logits.size() == m, ErrorCode::LengthMismatch, "logit gradient length mismatch");
  const int hd = topo_.hidden;
  const Matrix& c = fw.layers.back().out;

  Param& w2 = params_.get("head.w2");
  params_.get("head.b2").grad(0, 0) += grad_logits.sum();
  w2.grad += grad_logits.transpose() * fw.a1;
  Matrix dz1 = grad_logits * w2.value;
  dz1.array() *= (fw.z1.array() > 0).cast<double>();
  Param& w1 = params_.get("head.w1");
  w1.grad += dz1.transpose() * c;
  params_.get("head.b1").grad += dz1.colwise().sum().transpose();
  Matrix dc = dz1 * w1.value;

  if (grad_aux.size() > 0) {
    require(has_aux(), ErrorCode::InvalidArgument, "aux gradient supplied to a model without the aux head");
    require(grad_aux.rows() == m && grad_aux.cols() == topo_.aux_dim, ErrorCode::LengthMismatch,
            "aux gradient shape mismatch");
    Param& aw = params_.get("aux.w");
    aw.grad += grad_aux.transpose() * c;
    params_.get("aux.b").grad += grad_aux.colwise().sum().transpose();
    dc += grad_aux * aw.value;
  }

  for (int l = topo_.layers - 1; l >= 0; --l) {
    const LayerCache& lc = fw.layers[static_cast<std::size_t>(l)];
    Matrix dinput = Matrix::Zero(m, lc.input.cols());
    for (int dir = 0; dir < 2; ++dir) {
      const Matrix dh = dir == 0 ? Matrix(dc.leftCols(hd)) : Matrix(dc.rightCols(hd));
      dinput += backward_direction(lc.input, lc.dir[dir], dh, dir == 1, params_.get(pname(l, dir, "wx")),
                                   params_.get(pname(l, dir, "wh")), params_.get(pname(l, dir, "b")));
    }
    dc = std::move(dinput);
  }
  return std::move(fw.out);
}

StudentModel StudentModel::without_aux() const {
  StudentTopology t = topo_;
  t.aux_dim = 0;
  StudentModel out(t, 0);
  for (auto& p : out.params_) p.value = params_.get(p.name).value;
  out.norm_ = norm_;
  return out;
}

StudentModel StudentModel::mirrored() const {
  StudentModel out = *this;
  const int hd = topo_.hidden;
  auto swap_halves = [hd](const Matrix& w) {
    Matrix s(w.rows(), w.cols());
    s.leftCols(hd) = w.rightCols(hd);
    s.rightCols(hd) = w.leftCols(hd);
    return s;
  };
  for (int l = 0; l < topo_.layers; ++l) {
    for (const char* what : {"wx", "wh", "b"}) {
      Matrix v = params_.get(pname(l, 1, what)).value;
      Matrix u = params_.get(pname(l, 0, what)).value;
      if (l > 0 && std::string(what) == "wx") {
        v = swap_halves(v);
        u = swap_halves(u);
      }
      out.params_.get(pname(l, 0, what)).value = v;
      out.params_.get(pname(l, 1, what)).value = u;
    }
  }
  out.params_.get("head.w1").value = swap_halves(params_.get("head.w1").value);
  if (has_aux()) out.params_.get("aux.w").value = swap_halves(params_.get("aux.w").value);
  return out;
}

namespace {
bool not_aux(const std::string& name) { return name.rfind("aux.", 0) != 0; }
}  // namespace

void save_student(const StudentModel& model, const std::filesystem::path& path) {
  const auto& t = model.topology();
  detail::json j;
  j["format"] = "trajgeo-model";
  j["version"] = 1;
  j["kind"] = "student";
  j["topology"] = {{"input_dim", t.input_dim}, {"hidden", t.hidden},           {"layers", t.layers},
                   {"head_hidden", t.head_hidden}, {"aux_dim", 0}, {"gate_order", "ifgo"}};
  j["input_norm"] = detail::standardizer_json(model.input_norm());
  j["tensors"] = detail::params_json(model.params(), &not_aux);
  detail::write_json(j, path);
}

StudentModel load_student(const std::filesystem::path& path) {
  const auto j = detail::read_json(path);
  require(j.value("format", "") == "trajgeo-model" && j.value("kind", "") == "student", ErrorCode::MalformedRecord,
          path.string() + " is not a student model file");
  require(j.value("version", 0) == 1, ErrorCode::MalformedRecord, "unsupported model version");
  const auto& tj = j.at("topology");
  StudentTopology t;
  t.input_dim = tj.at("input_dim").get<int>();
  t.hidden = tj.at("hidden").get<int>();
  t.layers = tj.at("layers").get<int>();
  t.head_hidden = tj.at("head_hidden").get<int>();
  t.aux_dim = 0;
  StudentModel m(t, 0);
  detail::load_params(m.params(), j.at("tensors"));
  m.input_norm() = detail::standardizer_from_json(j.at("input_norm"));
  return m;
}

}  // namespace trajgeo
