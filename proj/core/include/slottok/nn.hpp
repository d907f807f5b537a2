#pragma once

#include <string>
#include <vector>

#include "slottok/ad.hpp"
#include "slottok/rng.hpp"

namespace slottok::nn {

using ad::Graph;
using ad::Mat;
using ad::Tensor;
using ad::Var;

Mat xavier(int rows, int cols, Rng& rng);
Mat gaussian_init(int rows, int cols, double std, Rng& rng);

// Builds the additive causal mask (0 on/below diagonal, -1e30 above). The
// large negative underflows to exactly 0 after softmax, so masked positions
// contribute nothing, bit-exactly.
Mat causal_mask(int n);

struct Linear {
  Tensor W;  // in x out
  Tensor b;  // 1 x out
  bool has_bias = true;

  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng, bool bias = true);
  Var operator()(Graph& g, Var x);
  void collect(std::vector<Tensor*>& out);
};

struct LayerNorm {
  Tensor gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(const std::string& name, int dim);
  Var operator()(Graph& g, Var x);
  void collect(std::vector<Tensor*>& out);
};

// Multi-head attention; queries from `x`, keys/values from `ctx` (pass the
// same Var for self-attention). Optional additive mask on the score matrix.
struct Mha {
  int heads = 1;
  Linear wq, wk, wv, wo;

  Mha() = default;
  Mha(const std::string& name, int dim, int n_heads, Rng& rng);
  Var operator()(Graph& g, Var x, Var ctx, const Mat* mask = nullptr);
  void collect(std::vector<Tensor*>& out);
};

struct FeedForward {
  Linear in, out;

  FeedForward() = default;
  FeedForward(const std::string& name, int dim, int hidden, Rng& rng);
  Var operator()(Graph& g, Var x);
  void collect(std::vector<Tensor*>& out);
};

// Pre-norm transformer block: x += attn(ln1(x)); x += ff(ln2(x)).
struct Block {
  LayerNorm ln1, ln2;
  Mha attn;
  FeedForward ff;

  Block() = default;
  Block(const std::string& name, int dim, int heads, int ff_hidden, Rng& rng);
  Var operator()(Graph& g, Var x, const Mat* mask = nullptr);
  void collect(std::vector<Tensor*>& out);
};

// GRU cell with packed gate matrices, gate order (r, z, n).
struct GruCell {
  Tensor wi;  // in x 3D
  Tensor wh;  // D x 3D
  Tensor bi, bh;  // 1 x 3D

  GruCell() = default;
  GruCell(const std::string& name, int in, int dim, Rng& rng);
  Var operator()(Graph& g, Var x, Var h);
  void collect(std::vector<Tensor*>& out);
};

}  // namespace slottok::nn
