#pragma once

#include <optional>
#include <string>
#include <vector>

#include "slottok/image.hpp"
#include "slottok/nn.hpp"

namespace slottok::decoder {

using ad::Graph;
using ad::Mat;
using ad::Tensor;
using ad::Var;

struct DiffusionConfig {
  int timesteps = 200;
  std::string schedule = "linear";
  double beta_start = 5e-4;
  double beta_end = 0.1;

  void validate() const;
};

struct DiffusionSchedule {
  Eigen::VectorXd betas, alphas, alpha_bars, alpha_bars_prev, posterior_var;
  std::vector<int> timestep_map;  // respaced index -> original timestep

  static DiffusionSchedule make(const DiffusionConfig& cfg);
  // Strided subsampling of the full schedule down to `steps` steps.
  DiffusionSchedule respaced(int steps) const;
  int size() const { return static_cast<int>(betas.size()); }
};

struct DecoderConfig {
  int n_slots = 8;
  int dim = 64;       // slot width
  int d_t = 64;       // time/global embedding width (= reference width)
  int canvas = 64;
  int base_channels = 16;
  std::vector<int> channel_mult = {1, 2, 3};
  int groups = 8;
  int refine_heads = 4;
  int refine_ff = 256;
  int global_hidden = 128;
  bool mlp_then_pool = false;        // global head variant
  bool global_add_before_mlp = false;  // where the global embedding joins t
  bool freeze_unet_body = false;     // train only cross-attention blocks
  DiffusionConfig diffusion;

  static DecoderConfig desk();
  void validate() const;
};

struct DecoderConditioning {
  Mat local;    // N x D refined slots
  Mat global;   // 1 x d_t
};

Mat timestep_embedding(int t, int dim);

// 3x3/1x1 convolution parameters; weights stored c_out x (c_in*k*k).
struct Conv {
  Tensor w, b;
  int c_in = 0, c_out = 0, k = 3, stride = 1, pad = 1;

  Conv() = default;
  Conv(const std::string& name, int cin, int cout, int kk, int s, int p, Rng& rng,
       bool zero_init = false);
  Var operator()(Graph& g, Var x, int h, int w) const;
  void collect(std::vector<Tensor*>& out);
};

struct GroupNormP {
  Tensor gamma, beta;  // C x 1
  int groups = 8;

  GroupNormP() = default;
  GroupNormP(const std::string& name, int channels, int groups_);
  Var operator()(Graph& g, Var x) const;
  void collect(std::vector<Tensor*>& out);
};

struct ResBlock {
  int c_in = 0, c_out = 0;
  GroupNormP gn1, gn2;
  Conv conv1, conv2;
  nn::Linear temb_proj;
  std::optional<Conv> skip;

  ResBlock() = default;
  ResBlock(const std::string& name, int cin, int cout, int d_t, int groups, Rng& rng);
  Var operator()(Graph& g, Var x, int h, int w, Var temb) const;
  void collect(std::vector<Tensor*>& out);
};

// Spatial tokens attend to the refined slot set.
struct CrossAttn {
  nn::LayerNorm ln;
  nn::Linear wq, wk, wv, wo;

  CrossAttn() = default;
  CrossAttn(const std::string& name, int channels, int cond_dim, Rng& rng);
  Var operator()(Graph& g, Var x, Var cond) const;
  void collect(std::vector<Tensor*>& out);
};

struct UNet {
  DecoderConfig cfg;
  nn::Linear time1, time2;
  Conv conv_in;
  std::vector<ResBlock> down_res;      // 2 per level
  std::vector<CrossAttn> down_xa;      // 1 per level
  std::vector<Conv> downsample;        // levels-1
  ResBlock mid0, mid1;
  CrossAttn mid_xa;
  std::vector<ResBlock> up_res;        // 2 per level
  std::vector<CrossAttn> up_xa;        // 1 per level
  std::vector<Conv> upsample_conv;     // levels-1
  GroupNormP gn_out;
  Conv conv_out;

  UNet() = default;
  UNet(const DecoderConfig& c, Rng& rng);

  // z_t: 3 x (canvas^2). Returns predicted noise of the same shape.
  Var operator()(Graph& g, Var z_t, int t_orig, Var cond_local, Var cond_global);

  void collect(std::vector<Tensor*>& out);
  void collect_cross_attention(std::vector<Tensor*>& out);
};

struct DiffusionLossResult {
  Var loss;       // ||eps_hat - eps||^2 (element mean)
  Var global_emb; // the conditioning global embedding used (for L_clip)
};

struct VisualDecoder {
  DecoderConfig cfg;
  nn::Block refine_block;
  nn::LayerNorm refine_ln;
  nn::Linear global1, global2;
  UNet unet;
  DiffusionSchedule schedule;

  VisualDecoder() = default;
  VisualDecoder(const DecoderConfig& c, Rng& rng);

  Var refine_g(Graph& g, Var s_emb);
  Mat refine(const Mat& s_emb);

  Var global_head_g(Graph& g, Var s_hat);
  Mat global_head(const Mat& s_hat);

  // Standard forward process sample z_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps,
  // with x0 the [-1,1]-scaled image.
  Mat forward_process(const Image& img, int t, const Mat& eps) const;

  // Noise-prediction loss at a uniformly drawn timestep.
  DiffusionLossResult diffusion_loss_g(Graph& g, const Image& img, Var s_hat,
                                       Var s_global, int t, const Mat& eps);

  // Ancestral sampling; deterministic given the rng seed.
  Image sample(const DecoderConditioning& cond, int steps, Rng& rng);

  void collect(std::vector<Tensor*>& out);
  void set_trainable(bool on);
  // Stage-1 scope flag: only the UNet cross-attention blocks stay trainable.
  void apply_freeze_policy();
};

}  // namespace slottok::decoder
