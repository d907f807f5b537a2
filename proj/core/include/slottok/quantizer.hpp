#pragma once

#include <string>
#include <vector>

#include "slottok/nn.hpp"

namespace slottok::quantizer {

using ad::Graph;
using ad::Mat;
using ad::Tensor;
using ad::Var;

enum class CommitMode { cumulative, per_depth };

struct QuantizerConfig {
  int codebook_size = 512;  // V
  int d_code = 16;
  int depth = 4;            // K
  int slot_dim = 64;        // D of the slot embeddings
  int n_slots = 8;
  int post_heads = 4;
  int post_ff = 256;
  CommitMode commit = CommitMode::cumulative;
  double ema_decay = 0.99;
  int dead_code_steps = 50;   // consecutive unused updates before revival

  static QuantizerConfig desk();
  static QuantizerConfig paper();  // V=8192, d_code=32, K=4
  void validate() const;
};

struct SlotTokens {
  std::vector<int> codes;  // n*k entries, slot-major depth-inner
  int n = 0, k = 0;
  std::string config_hash;

  int at(int slot, int depth) const { return codes[static_cast<std::size_t>(slot) * k + depth]; }
};

struct QuantizeResult {
  SlotTokens tokens;
  std::vector<Mat> z_hat_per_depth;  // K entries, each N x d_code
  Mat z;                             // N x d_code
  Mat quantized_sum;                 // sum_k z_hat (N x d_code)
  double commit_loss = 0.0;
};

// Graph handles for the trainable path.
struct QuantizeTrain {
  QuantizeResult result;
  Var z;            // down-projected slots (pre-quantization)
  Var quantized;    // straight-through node carrying sum_k z_hat
  Var commit;       // commitment loss (1x1)
};

struct ResidualQuantizer {
  QuantizerConfig cfg;
  nn::Linear down;   // D -> d_code
  nn::Linear up;     // d_code -> D
  Tensor codebook;   // V x d_code; EMA-updated, not gradient-trained
  nn::Block post;    // reconstruction transformer block over slots
  nn::LayerNorm post_ln;
  std::string config_hash;

  // EMA state + usage accounting.
  Mat ema_sums;                  // V x d_code
  Eigen::VectorXd ema_counts;    // V
  std::vector<int> unused_steps;
  std::vector<long> usage_counts;       // assignments in the last update
  std::vector<long> total_usage;

  ResidualQuantizer() = default;
  ResidualQuantizer(const QuantizerConfig& c, Rng& rng);

  // Exact nearest-neighbor RVQ over the shared codebook.
  QuantizeResult quantize_values(const Mat& slots) const;
  QuantizeTrain quantize_g(Graph& g, Var slots);

  // Residuals that selected each code, per depth; feeds the EMA update.
  struct BatchAssignments {
    std::vector<int> entry;        // flattened entry index per assignment
    std::vector<Mat> residual_rows;  // matching residual vectors (1 x d_code)
  };
  BatchAssignments assignments_of(const Mat& z) const;

  void codebook_update(const BatchAssignments& batch, Rng& rng);

  Var dequantize_g(Graph& g, const SlotTokens& tokens);
  Mat dequantize(const SlotTokens& tokens);

  // Reconstruction path from the straight-through node (training).
  Var reconstruct_g(Graph& g, Var quantized);

  void collect(std::vector<Tensor*>& out);
  void set_trainable(bool on);
};

// Token stream file: "SLTK" magic, u32 version, u32 N, u32 K, u32 V,
// length-prefixed config hash, u32 image count, then N*K little-endian u16
// codes per image.
void save_tokens(const std::string& path, const std::vector<SlotTokens>& tokens,
                 int v, const std::string& config_hash);
std::vector<SlotTokens> load_tokens(const std::string& path, int* v_out = nullptr,
                                    std::string* hash_out = nullptr);

}  // namespace slottok::quantizer
