#include "slottok/ad.hpp"

#include <cmath>
#include <stdexcept>

namespace slottok::ad {

namespace {

void check_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

// im2col buffers above this size are rebuilt in the backward pass instead of
// being cached on the tape; keeps per-graph memory bounded at 64x64 inputs.
constexpr std::size_t kColsCacheLimit = 8u << 20;

}  // namespace

bool all_finite(const Mat& m) { return m.allFinite(); }

int Graph::make(Mat val, bool needs_grad, std::function<void()> back) {
  Node n;
  n.val = std::move(val);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Mat& Graph::grad_ref(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
  return n.grad;
}

void Graph::add_grad(int id, const Mat& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.needs_grad) return;
  grad_ref(id) += g;
}

void Graph::check_same_graph(Var v) const {
  if (v.g != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("ad: Var does not belong to this graph");
}

Var Graph::input(Mat m) { return Var{this, make(std::move(m), false)}; }

Var Graph::leaf(Mat m) { return Var{this, make(std::move(m), true)}; }

Var Graph::param(Tensor& t) {
  const int id = make(t.value, t.trainable && !inference_);
  if (!inference_) nodes_[static_cast<std::size_t>(id)].bound = &t;
  return Var{this, id};
}

const Mat& Graph::val(Var v) const {
  check_same_graph(v);
  return nodes_[static_cast<std::size_t>(v.id)].val;
}

const Mat& Graph::grad(Var v) const {
  check_same_graph(v);
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) {
    static const Mat empty;
    const_cast<Node&>(n).grad = Mat::Zero(n.val.rows(), n.val.cols());
    (void)empty;
  }
  return n.grad;
}

void Graph::backward(Var loss) {
  backward({{loss, Mat::Ones(1, 1)}});
}

void Graph::backward(const std::vector<std::pair<Var, Mat>>& seeds) {
  for (const auto& [v, g] : seeds) {
    check_same_graph(v);
    check_shape(nodes_[static_cast<std::size_t>(v.id)].val, g, "backward seed");
    add_grad(v.id, g);
  }
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.needs_grad && n.grad.size() != 0 && n.back) n.back();
  }
}

void Graph::accumulate_param_grads(double scale) {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.bound != nullptr && n.bound->trainable && n.grad.size() != 0)
      n.bound->grad += scale * n.grad;
  }
}

// ---------------------------------------------------------------------------
// arithmetic

Var Graph::add(Var a, Var b) {
  check_same_graph(a);
  check_same_graph(b);
  check_shape(val(a), val(b), "add");
  const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
  const int id = make(val(a) + val(b), ng);
  if (ng)
    nodes_[id].back = [this, id, a, b] {
      const Mat& g = nodes_[id].grad;
      add_grad(a.id, g);
      add_grad(b.id, g);
    };
  return Var{this, id};
}

Var Graph::add_rowbc(Var a, Var row) {
  check_same_graph(a);
  check_same_graph(row);
  if (val(row).rows() != 1 || val(row).cols() != val(a).cols())
    throw std::invalid_argument("add_rowbc: row must be 1xC");
  const bool ng = nodes_[a.id].needs_grad || nodes_[row.id].needs_grad;
  Mat y = val(a);
  y.rowwise() += val(row).row(0);
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, a, row] {
      const Mat& g = nodes_[id].grad;
      add_grad(a.id, g);
      add_grad(row.id, g.colwise().sum());
    };
  return Var{this, id};
}

Var Graph::add_colbc(Var a, Var col) {
  check_same_graph(a);
  check_same_graph(col);
  if (val(col).cols() != 1 || val(col).rows() != val(a).rows())
    throw std::invalid_argument("add_colbc: col must be Rx1");
  const bool ng = nodes_[a.id].needs_grad || nodes_[col.id].needs_grad;
  Mat y = val(a);
  y.colwise() += val(col).col(0);
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, a, col] {
      const Mat& g = nodes_[id].grad;
      add_grad(a.id, g);
      add_grad(col.id, g.rowwise().sum());
    };
  return Var{this, id};
}

Var Graph::sub(Var a, Var b) {
  check_same_graph(a);
  check_same_graph(b);
  check_shape(val(a), val(b), "sub");
  const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
  const int id = make(val(a) - val(b), ng);
  if (ng)
    nodes_[id].back = [this, id, a, b] {
      const Mat& g = nodes_[id].grad;
      add_grad(a.id, g);
      if (nodes_[b.id].needs_grad) add_grad(b.id, -g);
    };
  return Var{this, id};
}

Var Graph::mul(Var a, Var b) {
  check_same_graph(a);
  check_same_graph(b);
  check_shape(val(a), val(b), "mul");
  const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
  const int id = make(val(a).cwiseProduct(val(b)), ng);
  if (ng)
    nodes_[id].back = [this, id, a, b] {
      const Mat& g = nodes_[id].grad;
      if (nodes_[a.id].needs_grad) add_grad(a.id, g.cwiseProduct(val(b)));
      if (nodes_[b.id].needs_grad) add_grad(b.id, g.cwiseProduct(val(a)));
    };
  return Var{this, id};
}

Var Graph::mul_rowbc(Var a, Var row) {
  check_same_graph(a);
  check_same_graph(row);
  if (val(row).rows() != 1 || val(row).cols() != val(a).cols())
    throw std::invalid_argument("mul_rowbc: row must be 1xC");
  const bool ng = nodes_[a.id].needs_grad || nodes_[row.id].needs_grad;
  Mat y = val(a).array().rowwise() * val(row).row(0).array();
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, a, row] {
      const Mat& g = nodes_[id].grad;
      if (nodes_[a.id].needs_grad)
        add_grad(a.id, g.array().rowwise() * val(row).row(0).array());
      if (nodes_[row.id].needs_grad)
        add_grad(row.id, g.cwiseProduct(val(a)).colwise().sum());
    };
  return Var{this, id};
}

Var Graph::smul(Var a, double k) { return affine(a, k, 0.0); }

Var Graph::affine(Var a, double k, double c) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  const int id = make(k * val(a).array() + c, ng);
  if (ng)
    nodes_[id].back = [this, id, a, k] { add_grad(a.id, k * nodes_[id].grad); };
  return Var{this, id};
}

Var Graph::mul_snode(Var a, Var s) {
  check_same_graph(a);
  check_same_graph(s);
  if (val(s).size() != 1) throw std::invalid_argument("mul_snode: s must be 1x1");
  const double sv = val(s)(0, 0);
  const bool ng = nodes_[a.id].needs_grad || nodes_[s.id].needs_grad;
  const int id = make(sv * val(a), ng);
  if (ng)
    nodes_[id].back = [this, id, a, s, sv] {
      const Mat& g = nodes_[id].grad;
      if (nodes_[a.id].needs_grad) add_grad(a.id, sv * g);
      if (nodes_[s.id].needs_grad) {
        Mat gs(1, 1);
        gs(0, 0) = g.cwiseProduct(val(a)).sum();
        add_grad(s.id, gs);
      }
    };
  return Var{this, id};
}

Var Graph::div_snode(Var a, Var s) {
  check_same_graph(a);
  check_same_graph(s);
  if (val(s).size() != 1) throw std::invalid_argument("div_snode: s must be 1x1");
  const double sv = val(s)(0, 0);
  const bool ng = nodes_[a.id].needs_grad || nodes_[s.id].needs_grad;
  const int id = make(val(a) / sv, ng);
  if (ng)
    nodes_[id].back = [this, id, a, s, sv] {
      const Mat& g = nodes_[id].grad;
      if (nodes_[a.id].needs_grad) add_grad(a.id, g / sv);
      if (nodes_[s.id].needs_grad) {
        Mat gs(1, 1);
        gs(0, 0) = -g.cwiseProduct(val(a)).sum() / (sv * sv);
        add_grad(s.id, gs);
      }
    };
  return Var{this, id};
}

// ---------------------------------------------------------------------------
// linear algebra

Var Graph::matmul(Var a, Var b) {
  check_same_graph(a);
  check_same_graph(b);
  if (val(a).cols() != val(b).rows())
    throw std::invalid_argument("matmul: inner dimensions disagree");
  const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
  const int id = make(val(a) * val(b), ng);
  if (ng)
    nodes_[id].back = [this, id, a, b] {
      const Mat& g = nodes_[id].grad;
      if (nodes_[a.id].needs_grad) grad_ref(a.id).noalias() += g * val(b).transpose();
      if (nodes_[b.id].needs_grad) grad_ref(b.id).noalias() += val(a).transpose() * g;
    };
  return Var{this, id};
}

Var Graph::transpose(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  const int id = make(val(a).transpose(), ng);
  if (ng)
    nodes_[id].back = [this, id, a] { add_grad(a.id, nodes_[id].grad.transpose()); };
  return Var{this, id};
}

// ---------------------------------------------------------------------------
// reductions

Var Graph::sum_all(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  Mat y(1, 1);
  y(0, 0) = val(a).sum();
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      const double g = nodes_[id].grad(0, 0);
      grad_ref(a.id).array() += g;
    };
  return Var{this, id};
}

Var Graph::mean_all(Var a) {
  check_same_graph(a);
  const double inv = 1.0 / static_cast<double>(val(a).size());
  return smul(sum_all(a), inv);
}

Var Graph::rowsum(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  const int id = make(val(a).rowwise().sum(), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      const Mat& g = nodes_[id].grad;  // N×1
      grad_ref(a.id).colwise() += g.col(0);
    };
  return Var{this, id};
}

Var Graph::colsum(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  const int id = make(val(a).colwise().sum(), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      const Mat& g = nodes_[id].grad;  // 1×C
      grad_ref(a.id).rowwise() += g.row(0);
    };
  return Var{this, id};
}

Var Graph::rowmean(Var a) {
  return smul(rowsum(a), 1.0 / static_cast<double>(val(a).cols()));
}

Var Graph::colmean(Var a) {
  return smul(colsum(a), 1.0 / static_cast<double>(val(a).rows()));
}

// ---------------------------------------------------------------------------
// nonlinearities

Var Graph::sigmoid(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  Mat y = (1.0 / (1.0 + (-val(a).array()).exp())).matrix();
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      const Mat& y = nodes_[id].val;
      add_grad(a.id, (nodes_[id].grad.array() * y.array() * (1.0 - y.array())).matrix());
    };
  return Var{this, id};
}

Var Graph::tanh_(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  const int id = make(val(a).array().tanh().matrix(), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      const Mat& y = nodes_[id].val;
      add_grad(a.id, (nodes_[id].grad.array() * (1.0 - y.array().square())).matrix());
    };
  return Var{this, id};
}

Var Graph::relu(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  const int id = make(val(a).cwiseMax(0.0), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      add_grad(a.id, (nodes_[id].grad.array() *
                      (val(a).array() > 0.0).cast<double>())
                         .matrix());
    };
  return Var{this, id};
}

Var Graph::silu(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  Eigen::ArrayXXd s = 1.0 / (1.0 + (-val(a).array()).exp());
  const int id = make((val(a).array() * s).matrix(), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      Eigen::ArrayXXd s = 1.0 / (1.0 + (-val(a).array()).exp());
      Eigen::ArrayXXd d = s * (1.0 + val(a).array() * (1.0 - s));
      add_grad(a.id, (nodes_[id].grad.array() * d).matrix());
    };
  return Var{this, id};
}

Var Graph::exp_(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  const int id = make(val(a).array().exp().matrix(), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      add_grad(a.id, nodes_[id].grad.cwiseProduct(nodes_[id].val));
    };
  return Var{this, id};
}

Var Graph::log_(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  const int id = make(val(a).array().log().matrix(), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      add_grad(a.id, (nodes_[id].grad.array() / val(a).array()).matrix());
    };
  return Var{this, id};
}

Var Graph::sqrt_(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  const int id = make(val(a).array().sqrt().matrix(), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      add_grad(a.id, (nodes_[id].grad.array() * 0.5 / nodes_[id].val.array()).matrix());
    };
  return Var{this, id};
}

Var Graph::square(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  const int id = make(val(a).array().square().matrix(), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      add_grad(a.id, (nodes_[id].grad.array() * 2.0 * val(a).array()).matrix());
    };
  return Var{this, id};
}

// ---------------------------------------------------------------------------
// normalizations

Var Graph::softmax_rows(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  Mat y = val(a);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      const Mat& y = nodes_[id].val;
      const Mat& g = nodes_[id].grad;
      Mat gy = g.cwiseProduct(y);
      Eigen::VectorXd dot = gy.rowwise().sum();
      add_grad(a.id, gy - (y.array().colwise() * dot.array()).matrix());
    };
  return Var{this, id};
}

Var Graph::softmax_cols(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  Mat y = val(a);
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const double m = y.col(c).maxCoeff();
    y.col(c) = (y.col(c).array() - m).exp();
    y.col(c) /= y.col(c).sum();
  }
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      const Mat& y = nodes_[id].val;
      const Mat& g = nodes_[id].grad;
      Mat gy = g.cwiseProduct(y);
      Eigen::RowVectorXd dot = gy.colwise().sum();
      add_grad(a.id, gy - (y.array().rowwise() * dot.array()).matrix());
    };
  return Var{this, id};
}

Var Graph::log_softmax_rows(Var a) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  Mat y = val(a);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double m = y.row(r).maxCoeff();
    const double lse = m + std::log((y.row(r).array() - m).exp().sum());
    y.row(r).array() -= lse;
  }
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, a] {
      const Mat& y = nodes_[id].val;  // log-probs
      const Mat& g = nodes_[id].grad;
      Eigen::VectorXd gsum = g.rowwise().sum();
      add_grad(a.id, g - (y.array().exp().colwise() * gsum.array()).matrix());
    };
  return Var{this, id};
}

Var Graph::norm_rows_sum(Var a, double eps) {
  check_same_graph(a);
  const bool ng = nodes_[a.id].needs_grad;
  Mat shifted = val(a).array() + eps;
  Eigen::VectorXd s = shifted.rowwise().sum();
  Mat y = shifted.array().colwise() / s.array();
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, a, s] {
      const Mat& y = nodes_[id].val;
      const Mat& g = nodes_[id].grad;
      Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
      Mat ga = (g.array().colwise() - dot.array()).colwise() / s.array();
      add_grad(a.id, ga);
    };
  return Var{this, id};
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
  check_same_graph(x);
  check_same_graph(gamma);
  check_same_graph(beta);
  const Mat& xv = val(x);
  const Eigen::Index C = xv.cols();
  if (val(gamma).rows() != 1 || val(gamma).cols() != C)
    throw std::invalid_argument("layer_norm: gamma must be 1xC");
  if (val(beta).rows() != 1 || val(beta).cols() != C)
    throw std::invalid_argument("layer_norm: beta must be 1xC");

  Eigen::VectorXd mu = xv.rowwise().mean();
  Mat centered = xv.array().colwise() - mu.array();
  Eigen::VectorXd var = centered.array().square().rowwise().mean();
  Eigen::VectorXd inv_std = (var.array() + eps).rsqrt();
  Mat xhat = centered.array().colwise() * inv_std.array();
  Mat y = (xhat.array().rowwise() * val(gamma).row(0).array()).rowwise() +
          val(beta).row(0).array();
  const bool ng = nodes_[x.id].needs_grad || nodes_[gamma.id].needs_grad ||
                  nodes_[beta.id].needs_grad;
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, x, gamma, beta, xhat, inv_std] {
      const Mat& g = nodes_[id].grad;
      if (nodes_[gamma.id].needs_grad)
        add_grad(gamma.id, g.cwiseProduct(xhat).colwise().sum());
      if (nodes_[beta.id].needs_grad) add_grad(beta.id, g.colwise().sum());
      if (nodes_[x.id].needs_grad) {
        Mat ghat = g.array().rowwise() * val(gamma).row(0).array();
        Eigen::VectorXd m1 = ghat.rowwise().mean();
        Eigen::VectorXd m2 = ghat.cwiseProduct(xhat).rowwise().mean();
        Mat gx = ((ghat.array().colwise() - m1.array()) -
                  (xhat.array().colwise() * m2.array()))
                     .colwise() *
                 inv_std.array();
        add_grad(x.id, gx);
      }
    };
  return Var{this, id};
}

Var Graph::group_norm(Var x, int groups, Var gamma, Var beta, double eps) {
  check_same_graph(x);
  check_same_graph(gamma);
  check_same_graph(beta);
  const Mat& xv = val(x);
  const Eigen::Index C = xv.rows();
  const Eigen::Index S = xv.cols();
  if (C % groups != 0) throw std::invalid_argument("group_norm: C % groups != 0");
  if (val(gamma).rows() != C || val(gamma).cols() != 1)
    throw std::invalid_argument("group_norm: gamma must be Cx1");
  if (val(beta).rows() != C || val(beta).cols() != 1)
    throw std::invalid_argument("group_norm: beta must be Cx1");
  const Eigen::Index R = C / groups;

  Mat xhat(C, S);
  Eigen::VectorXd inv_std(groups);
  for (int gi = 0; gi < groups; ++gi) {
    auto blk = xv.middleRows(gi * R, R);
    const double mu = blk.mean();
    const double var = (blk.array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(gi) = is;
    xhat.middleRows(gi * R, R) = (blk.array() - mu) * is;
  }
  Mat y = (xhat.array().colwise() * val(gamma).col(0).array()).colwise() +
          val(beta).col(0).array();
  const bool ng = nodes_[x.id].needs_grad || nodes_[gamma.id].needs_grad ||
                  nodes_[beta.id].needs_grad;
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, x, gamma, beta, xhat, inv_std, groups, R] {
      const Mat& g = nodes_[id].grad;
      if (nodes_[gamma.id].needs_grad)
        add_grad(gamma.id, g.cwiseProduct(xhat).rowwise().sum());
      if (nodes_[beta.id].needs_grad) add_grad(beta.id, g.rowwise().sum());
      if (nodes_[x.id].needs_grad) {
        Mat ghat = g.array().colwise() * val(gamma).col(0).array();
        Mat gx(ghat.rows(), ghat.cols());
        for (int gi = 0; gi < groups; ++gi) {
          auto gblk = ghat.middleRows(gi * R, R);
          auto hblk = xhat.middleRows(gi * R, R);
          const double m1 = gblk.mean();
          const double m2 = gblk.cwiseProduct(hblk).mean();
          gx.middleRows(gi * R, R) =
              ((gblk.array() - m1) - hblk.array() * m2) * inv_std(gi);
        }
        add_grad(x.id, gx);
      }
    };
  return Var{this, id};
}

Var Graph::l2norm_rows(Var x, double eps) {
  check_same_graph(x);
  const bool ng = nodes_[x.id].needs_grad;
  Eigen::VectorXd norms = val(x).rowwise().norm().array() + eps;
  Mat y = val(x).array().colwise() / norms.array();
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, x, norms] {
      const Mat& y = nodes_[id].val;
      const Mat& g = nodes_[id].grad;
      Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
      Mat gx = (g - (y.array().colwise() * dot.array()).matrix()).array().colwise() /
               norms.array();
      add_grad(x.id, gx);
    };
  return Var{this, id};
}

// ---------------------------------------------------------------------------
// shape ops

Var Graph::concat_rows(Var a, Var b) {
  check_same_graph(a);
  check_same_graph(b);
  if (val(a).cols() != val(b).cols())
    throw std::invalid_argument("concat_rows: column counts differ");
  const Eigen::Index ra = val(a).rows(), rb = val(b).rows();
  Mat y(ra + rb, val(a).cols());
  y.topRows(ra) = val(a);
  y.bottomRows(rb) = val(b);
  const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, a, b, ra, rb] {
      const Mat& g = nodes_[id].grad;
      if (nodes_[a.id].needs_grad) add_grad(a.id, g.topRows(ra));
      if (nodes_[b.id].needs_grad) add_grad(b.id, g.bottomRows(rb));
    };
  return Var{this, id};
}

Var Graph::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  Eigen::Index cols = 0;
  bool ng = false;
  for (Var p : parts) {
    check_same_graph(p);
    cols += val(p).cols();
    ng = ng || nodes_[p.id].needs_grad;
  }
  Mat y(val(parts[0]).rows(), cols);
  Eigen::Index c0 = 0;
  for (Var p : parts) {
    y.middleCols(c0, val(p).cols()) = val(p);
    c0 += val(p).cols();
  }
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, parts] {
      const Mat& g = nodes_[id].grad;
      Eigen::Index c0 = 0;
      for (Var p : parts) {
        const Eigen::Index w = val(p).cols();
        if (nodes_[p.id].needs_grad) add_grad(p.id, g.middleCols(c0, w));
        c0 += w;
      }
    };
  return Var{this, id};
}

Var Graph::slice_rows(Var a, int r0, int n) {
  check_same_graph(a);
  if (r0 < 0 || n < 0 || r0 + n > val(a).rows())
    throw std::invalid_argument("slice_rows: out of range");
  const bool ng = nodes_[a.id].needs_grad;
  const int id = make(val(a).middleRows(r0, n), ng);
  if (ng)
    nodes_[id].back = [this, id, a, r0, n] {
      grad_ref(a.id).middleRows(r0, n) += nodes_[id].grad;
    };
  return Var{this, id};
}

Var Graph::slice_cols(Var a, int c0, int n) {
  check_same_graph(a);
  if (c0 < 0 || n < 0 || c0 + n > val(a).cols())
    throw std::invalid_argument("slice_cols: out of range");
  const bool ng = nodes_[a.id].needs_grad;
  const int id = make(val(a).middleCols(c0, n), ng);
  if (ng)
    nodes_[id].back = [this, id, a, c0, n] {
      grad_ref(a.id).middleCols(c0, n) += nodes_[id].grad;
    };
  return Var{this, id};
}

Var Graph::embed_rows(Var table, const std::vector<int>& ids) {
  check_same_graph(table);
  const Mat& t = val(table);
  Mat y(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows())
      throw std::out_of_range("embed_rows: id " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(t.rows()));
    y.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
  }
  const bool ng = nodes_[table.id].needs_grad;
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, table, ids] {
      const Mat& g = nodes_[id].grad;
      Mat& gt = grad_ref(table.id);
      for (std::size_t i = 0; i < ids.size(); ++i)
        gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    };
  return Var{this, id};
}

// ---------------------------------------------------------------------------
// convolution

namespace {

// Valid output range [lo, hi) along one axis for a given kernel offset.
inline void conv_span(int d, int extent, int stride, int pad, int out_extent,
                      int& lo, int& hi) {
  lo = 0;
  while (lo < out_extent && lo * stride - pad + d < 0) ++lo;
  hi = out_extent;
  while (hi > lo && (hi - 1) * stride - pad + d >= extent) --hi;
}

}  // namespace

void im2col(const Mat& x, int c_in, int h, int w, int k, int stride, int pad,
            Mat& cols) {
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  cols.setZero(static_cast<Eigen::Index>(c_in) * k * k, static_cast<Eigen::Index>(ho) * wo);
  for (int c = 0; c < c_in; ++c) {
    for (int dy = 0; dy < k; ++dy) {
      int oy_lo, oy_hi;
      conv_span(dy, h, stride, pad, ho, oy_lo, oy_hi);
      for (int dx = 0; dx < k; ++dx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * k + dy) * k + dx;
        int ox_lo, ox_hi;
        conv_span(dx, w, stride, pad, wo, ox_lo, ox_hi);
        const int n = ox_hi - ox_lo;
        if (n <= 0) continue;
        for (int oy = oy_lo; oy < oy_hi; ++oy) {
          const int iy = oy * stride - pad + dy;
          const Eigen::Index dst = static_cast<Eigen::Index>(oy) * wo + ox_lo;
          const Eigen::Index src =
              static_cast<Eigen::Index>(iy) * w + (ox_lo * stride - pad + dx);
          if (stride == 1) {
            cols.row(row).segment(dst, n) = x.row(c).segment(src, n);
          } else {
            for (int i = 0; i < n; ++i)
              cols(row, dst + i) = x(c, src + static_cast<Eigen::Index>(i) * stride);
          }
        }
      }
    }
  }
}

void col2im(const Mat& cols, int c_in, int h, int w, int k, int stride,
            int pad, Mat& gx) {
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  for (int c = 0; c < c_in; ++c) {
    for (int dy = 0; dy < k; ++dy) {
      int oy_lo, oy_hi;
      conv_span(dy, h, stride, pad, ho, oy_lo, oy_hi);
      for (int dx = 0; dx < k; ++dx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * k + dy) * k + dx;
        int ox_lo, ox_hi;
        conv_span(dx, w, stride, pad, wo, ox_lo, ox_hi);
        const int n = ox_hi - ox_lo;
        if (n <= 0) continue;
        for (int oy = oy_lo; oy < oy_hi; ++oy) {
          const int iy = oy * stride - pad + dy;
          const Eigen::Index src = static_cast<Eigen::Index>(oy) * wo + ox_lo;
          const Eigen::Index dst =
              static_cast<Eigen::Index>(iy) * w + (ox_lo * stride - pad + dx);
          if (stride == 1) {
            gx.row(c).segment(dst, n) += cols.row(row).segment(src, n);
          } else {
            for (int i = 0; i < n; ++i)
              gx(c, dst + static_cast<Eigen::Index>(i) * stride) += cols(row, src + i);
          }
        }
      }
    }
  }
}

Var Graph::conv2d(Var x, Var w, Var b, int c_in, int h, int w_in, int c_out,
                  int k, int stride, int pad) {
  check_same_graph(x);
  check_same_graph(w);
  check_same_graph(b);
  if (val(x).rows() != c_in || val(x).cols() != static_cast<Eigen::Index>(h) * w_in)
    throw std::invalid_argument("conv2d: x must be c_in x (h*w)");
  if (val(w).rows() != c_out || val(w).cols() != static_cast<Eigen::Index>(c_in) * k * k)
    throw std::invalid_argument("conv2d: w must be c_out x (c_in*k*k)");
  if (val(b).rows() != c_out || val(b).cols() != 1)
    throw std::invalid_argument("conv2d: b must be c_out x 1");

  Mat cols;
  im2col(val(x), c_in, h, w_in, k, stride, pad, cols);
  Mat y = val(w) * cols;
  y.colwise() += val(b).col(0);

  const bool cache = static_cast<std::size_t>(cols.size()) * sizeof(double) <= kColsCacheLimit;
  const bool ng =
      nodes_[x.id].needs_grad || nodes_[w.id].needs_grad || nodes_[b.id].needs_grad;
  const int id = make(std::move(y), ng);
  if (ng) {
    Mat cached = cache ? std::move(cols) : Mat();
    nodes_[id].back = [this, id, x, w, b, c_in, h, w_in, k, stride, pad,
                       cached = std::move(cached)] {
      const Mat& g = nodes_[id].grad;
      Mat rebuilt;
      const Mat* colsp = &cached;
      if (cached.size() == 0) {
        im2col(val(x), c_in, h, w_in, k, stride, pad, rebuilt);
        colsp = &rebuilt;
      }
      if (nodes_[w.id].needs_grad) grad_ref(w.id).noalias() += g * colsp->transpose();
      if (nodes_[b.id].needs_grad) add_grad(b.id, g.rowwise().sum());
      if (nodes_[x.id].needs_grad) {
        Mat gcols = val(w).transpose() * g;
        col2im(gcols, c_in, h, w_in, k, stride, pad, grad_ref(x.id));
      }
    };
  }
  return Var{this, id};
}

Var Graph::upsample2(Var x, int h, int w) {
  check_same_graph(x);
  const Mat& xv = val(x);
  if (xv.cols() != static_cast<Eigen::Index>(h) * w)
    throw std::invalid_argument("upsample2: x must be C x (h*w)");
  const Eigen::Index C = xv.rows();
  Mat y(C, static_cast<Eigen::Index>(4) * h * w);
  const int W2 = 2 * w;
  for (int iy = 0; iy < h; ++iy)
    for (int ix = 0; ix < w; ++ix) {
      const Eigen::Index src = static_cast<Eigen::Index>(iy) * w + ix;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          y.col(static_cast<Eigen::Index>(2 * iy + dy) * W2 + (2 * ix + dx)) = xv.col(src);
    }
  const bool ng = nodes_[x.id].needs_grad;
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, x, h, w] {
      const Mat& g = nodes_[id].grad;
      Mat& gx = grad_ref(x.id);
      const int W2 = 2 * w;
      for (int iy = 0; iy < h; ++iy)
        for (int ix = 0; ix < w; ++ix) {
          const Eigen::Index dst = static_cast<Eigen::Index>(iy) * w + ix;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              gx.col(dst) +=
                  g.col(static_cast<Eigen::Index>(2 * iy + dy) * W2 + (2 * ix + dx));
        }
    };
  return Var{this, id};
}

// ---------------------------------------------------------------------------
// quantization / losses

Var Graph::straight_through(Var z, Mat quantized) {
  check_same_graph(z);
  check_shape(val(z), quantized, "straight_through");
  const bool ng = nodes_[z.id].needs_grad;
  const int id = make(std::move(quantized), ng);
  if (ng)
    nodes_[id].back = [this, id, z] { add_grad(z.id, nodes_[id].grad); };
  return Var{this, id};
}

Var Graph::detach(Var a) {
  check_same_graph(a);
  return input(val(a));
}

Var Graph::mse(Var a, Var b) { return mean_all(square(sub(a, b))); }

Var Graph::sse(Var a, Var b) { return sum_all(square(sub(a, b))); }

Var Graph::pick_nll_mean(Var logp, const std::vector<int>& targets,
                         const std::vector<bool>& active) {
  check_same_graph(logp);
  const Mat& lp = val(logp);
  if (targets.size() != static_cast<std::size_t>(lp.rows()) ||
      active.size() != targets.size())
    throw std::invalid_argument("pick_nll_mean: targets/active must match rows");
  int n_active = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!active[i]) continue;
    if (targets[i] < 0 || targets[i] >= lp.cols())
      throw std::out_of_range("pick_nll_mean: target id out of range");
    acc -= lp(static_cast<Eigen::Index>(i), targets[i]);
    ++n_active;
  }
  Mat y(1, 1);
  y(0, 0) = n_active > 0 ? acc / n_active : 0.0;
  const bool ng = nodes_[logp.id].needs_grad && n_active > 0;
  const int id = make(std::move(y), ng);
  if (ng)
    nodes_[id].back = [this, id, logp, targets, active, n_active] {
      const double g = nodes_[id].grad(0, 0);
      Mat& gl = grad_ref(logp.id);
      for (std::size_t i = 0; i < targets.size(); ++i)
        if (active[i])
          gl(static_cast<Eigen::Index>(i), targets[i]) -= g / n_active;
    };
  return Var{this, id};
}

}  // namespace slottok::ad
