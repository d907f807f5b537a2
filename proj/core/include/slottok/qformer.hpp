#pragma once

#include <string>
#include <vector>

#include "slottok/nn.hpp"

namespace slottok::qformer {

using ad::Graph;
using ad::Mat;
using ad::Tensor;
using ad::Var;

enum class AttnNormalization { weighted_mean, paper_literal };

struct SlotConfig {
  int n_slots = 8;
  int dim = 64;            // slot width D
  int d_input = 64;        // feature width from the vision encoder
  int gru_iters = 3;
  int num_layers = 4;
  int heads = 4;
  int ff_hidden = 256;
  double noise_scale = 1.0;
  double temperature_init = 0.07;
  AttnNormalization normalization = AttnNormalization::weighted_mean;
  bool use_slot_attention = true;   // false = plain cross-attention ablation
  int text_vocab = 0;
  int max_text_len = 24;

  static SlotConfig desk(int text_vocab);
  static SlotConfig paper(int text_vocab);  // N=32, D=768 preset
  void validate() const;
};

enum class Mode { train, eval };

struct SlotEmbeddings {
  Mat slots;                    // N x D
  std::vector<Mat> attention_maps;  // one N x M map per (layer, iteration)
};

struct TextEmbedding {
  Mat final_emb;   // 1 x D, last non-pad position
  Mat per_token;   // L x D
};

// One slot-attention layer: shared q/k/v projections, an input norm, a slot
// norm applied per refinement iteration, and a GRU shared across iterations.
struct SlotAttnLayer {
  nn::LayerNorm ln_slots, ln_inputs;
  nn::Linear q, k, v;
  nn::GruCell gru;
  nn::Linear cross_out;  // only used by the cross-attention ablation

  SlotAttnLayer() = default;
  SlotAttnLayer(const std::string& name, int dim, int d_input, Rng& rng);
  void collect(std::vector<Tensor*>& out);
};

struct SlotStepResult {
  Var slots;
  Var attn;    // N x M, softmax over the slot axis
  Var update;  // N x D weighted mean of projected features (pre-GRU)
};

// Slot Q-Former: stacked (slot attention xG, causal self-attention, FF)
// blocks over learned slot queries, with the self-attention and feed-forward
// tensors shared with the causal text branch.
struct SlotQFormer {
  SlotConfig cfg;
  Tensor slot_mu;         // N x D learned queries
  Tensor slot_log_sigma;  // 1 x D learned noise scale (log)
  std::vector<SlotAttnLayer> slot_layers;
  std::vector<nn::Block> shared_blocks;   // used by BOTH branches
  Tensor tok_emb, text_pos;
  nn::Linear lm_head;     // D -> text vocab, for the grounded-caption loss
  Tensor temperature;     // ITC temperature, clamped to [1e-3, 1]

  SlotQFormer() = default;
  SlotQFormer(const SlotConfig& c, Rng& rng);

  // Slot initialization: learned queries plus Gaussian noise of learned scale
  // in train mode; noise disabled in eval mode.
  Var init_slots(Graph& g, Mode mode, Rng& rng);

  // One competitive-attention refinement with GRU update.
  SlotStepResult slot_attention_step(Graph& g, int layer, Var slots, Var features);

  // Full stack. Attention maps for every (layer, iteration) are recorded
  // into `out` when non-null.
  Var encode_slots_g(Graph& g, Var features, Mode mode, Rng& rng,
                     SlotEmbeddings* out = nullptr);
  SlotEmbeddings encode_slots(const Mat& features, Mode mode, Rng& rng);

  // Causal text branch over the shared blocks (no slot-attention layers).
  Var encode_text_g(Graph& g, const std::vector<int>& ids, Var* per_token = nullptr);
  TextEmbedding encode_text(const std::vector<int>& ids);

  // Caption logits with all N slots as causal prefix; rows cover the text
  // positions, row i predicts token i+1 of `ids` (row N-1.. etc).
  Var caption_logits_g(Graph& g, Var slot_embs, const std::vector<int>& ids);

  double clamped_temperature() const;
  void clamp_temperature();

  void collect(std::vector<Tensor*>& out);
  void set_trainable(bool on);
};

}  // namespace slottok::qformer
