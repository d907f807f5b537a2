#include "slottok/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace slottok::nn {

Mat xavier(int rows, int cols, Rng& rng) {
  const double a = std::sqrt(6.0 / (rows + cols));
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-a, a);
  return m;
}

Mat gaussian_init(int rows, int cols, double std, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = std * rng.gaussian();
  return m;
}

Mat causal_mask(int n) {
  Mat m = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m(i, j) = -1e30;
  return m;
}

Linear::Linear(const std::string& name, int in, int out, Rng& rng, bool bias)
    : W(name + ".W", xavier(in, out, rng)),
      b(name + ".b", Mat::Zero(1, out), /*no_decay=*/true),
      has_bias(bias) {}

Var Linear::operator()(Graph& g, Var x) {
  Var y = g.matmul(x, g.param(W));
  if (has_bias) y = g.add_rowbc(y, g.param(b));
  return y;
}

void Linear::collect(std::vector<Tensor*>& out) {
  out.push_back(&W);
  if (has_bias) out.push_back(&b);
}

LayerNorm::LayerNorm(const std::string& name, int dim)
    : gamma(name + ".gamma", Mat::Ones(1, dim), /*no_decay=*/true),
      beta(name + ".beta", Mat::Zero(1, dim), /*no_decay=*/true) {}

Var LayerNorm::operator()(Graph& g, Var x) {
  return g.layer_norm(x, g.param(gamma), g.param(beta));
}

void LayerNorm::collect(std::vector<Tensor*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

Mha::Mha(const std::string& name, int dim, int n_heads, Rng& rng)
    : heads(n_heads),
      wq(name + ".q", dim, dim, rng),
      wk(name + ".k", dim, dim, rng),
      wv(name + ".v", dim, dim, rng),
      wo(name + ".o", dim, dim, rng) {
  if (dim % n_heads != 0) throw std::invalid_argument("mha: dim % heads != 0");
}

Var Mha::operator()(Graph& g, Var x, Var ctx, const Mat* mask) {
  const int dim = static_cast<int>(g.val(x).cols());
  const int dh = dim / heads;
  Var q = wq(g, x), k = wk(g, ctx), v = wv(g, ctx);
  std::vector<Var> outs;
  outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Var qh = g.slice_cols(q, h * dh, dh);
    Var kh = g.slice_cols(k, h * dh, dh);
    Var vh = g.slice_cols(v, h * dh, dh);
    Var scores = g.smul(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(double(dh)));
    if (mask != nullptr) scores = g.add(scores, g.input(*mask));
    Var attn = g.softmax_rows(scores);
    outs.push_back(g.matmul(attn, vh));
  }
  return wo(g, g.concat_cols(outs));
}

void Mha::collect(std::vector<Tensor*>& out) {
  wq.collect(out);
  wk.collect(out);
  wv.collect(out);
  wo.collect(out);
}

FeedForward::FeedForward(const std::string& name, int dim, int hidden, Rng& rng)
    : in(name + ".in", dim, hidden, rng), out(name + ".out", hidden, dim, rng) {}

Var FeedForward::operator()(Graph& g, Var x) { return out(g, g.silu(in(g, x))); }

void FeedForward::collect(std::vector<Tensor*>& out_v) {
  in.collect(out_v);
  out.collect(out_v);
}

Block::Block(const std::string& name, int dim, int heads, int ff_hidden, Rng& rng)
    : ln1(name + ".ln1", dim),
      ln2(name + ".ln2", dim),
      attn(name + ".attn", dim, heads, rng),
      ff(name + ".ff", dim, ff_hidden, rng) {}

Var Block::operator()(Graph& g, Var x, const Mat* mask) {
  Var h = ln1(g, x);
  x = g.add(x, attn(g, h, h, mask));
  x = g.add(x, ff(g, ln2(g, x)));
  return x;
}

void Block::collect(std::vector<Tensor*>& out) {
  ln1.collect(out);
  ln2.collect(out);
  attn.collect(out);
  ff.collect(out);
}

GruCell::GruCell(const std::string& name, int in, int dim, Rng& rng)
    : wi(name + ".wi", xavier(in, 3 * dim, rng)),
      wh(name + ".wh", xavier(dim, 3 * dim, rng)),
      bi(name + ".bi", Mat::Zero(1, 3 * dim), /*no_decay=*/true),
      bh(name + ".bh", Mat::Zero(1, 3 * dim), /*no_decay=*/true) {}

Var GruCell::operator()(Graph& g, Var x, Var h) {
  const int dim = static_cast<int>(g.val(h).cols());
  Var gi = g.add_rowbc(g.matmul(x, g.param(wi)), g.param(bi));
  Var gh = g.add_rowbc(g.matmul(h, g.param(wh)), g.param(bh));
  Var r = g.sigmoid(g.add(g.slice_cols(gi, 0, dim), g.slice_cols(gh, 0, dim)));
  Var z = g.sigmoid(g.add(g.slice_cols(gi, dim, dim), g.slice_cols(gh, dim, dim)));
  Var n = g.tanh_(g.add(g.slice_cols(gi, 2 * dim, dim),
                        g.mul(r, g.slice_cols(gh, 2 * dim, dim))));
  // h' = (1 - z) * n + z * h
  return g.add(g.mul(g.affine(z, -1.0, 1.0), n), g.mul(z, h));
}

void GruCell::collect(std::vector<Tensor*>& out) {
  out.push_back(&wi);
  out.push_back(&wh);
  out.push_back(&bi);
  out.push_back(&bh);
}

}  // namespace slottok::nn
