#include "slottok/qformer.hpp"

#include <cmath>
#include <stdexcept>

namespace slottok::qformer {

SlotConfig SlotConfig::desk(int text_vocab_size) {
  SlotConfig c;
  c.text_vocab = text_vocab_size;
  return c;
}

SlotConfig SlotConfig::paper(int text_vocab_size) {
  SlotConfig c;
  c.n_slots = 32;
  c.dim = 768;
  c.d_input = 1024;
  c.gru_iters = 3;
  c.num_layers = 4;
  c.heads = 8;
  c.ff_hidden = 3072;
  c.text_vocab = text_vocab_size;
  return c;
}

void SlotConfig::validate() const {
  if (n_slots < 1) throw std::invalid_argument("SlotConfig: n_slots >= 1 required");
  if (gru_iters < 1) throw std::invalid_argument("SlotConfig: gru_iters >= 1 required");
  if (num_layers < 1) throw std::invalid_argument("SlotConfig: num_layers >= 1 required");
  if (text_vocab <= 0) throw std::invalid_argument("SlotConfig: text_vocab unset");
}

SlotAttnLayer::SlotAttnLayer(const std::string& name, int dim, int d_input, Rng& rng)
    : ln_slots(name + ".ln_slots", dim),
      ln_inputs(name + ".ln_inputs", d_input),
      q(name + ".q", dim, dim, rng),
      k(name + ".k", d_input, dim, rng),
      v(name + ".v", d_input, dim, rng),
      gru(name + ".gru", dim, dim, rng),
      cross_out(name + ".cross_out", dim, dim, rng) {}

void SlotAttnLayer::collect(std::vector<Tensor*>& out) {
  ln_slots.collect(out);
  ln_inputs.collect(out);
  q.collect(out);
  k.collect(out);
  v.collect(out);
  gru.collect(out);
  cross_out.collect(out);
}

SlotQFormer::SlotQFormer(const SlotConfig& c, Rng& rng)
    : cfg(c),
      slot_mu("qf.slot_mu", nn::gaussian_init(c.n_slots, c.dim, 0.5, rng),
              /*no_decay=*/true),
      slot_log_sigma("qf.slot_log_sigma", Mat::Zero(1, c.dim), /*no_decay=*/true),
      tok_emb("qf.tok_emb", nn::gaussian_init(c.text_vocab, c.dim, 0.02, rng),
              /*no_decay=*/true),
      text_pos("qf.text_pos", nn::gaussian_init(c.max_text_len, c.dim, 0.02, rng),
               /*no_decay=*/true),
      lm_head("qf.lm_head", c.dim, c.text_vocab, rng),
      temperature("qf.tau", Mat::Constant(1, 1, c.temperature_init), /*no_decay=*/true) {
  c.validate();
  for (int i = 0; i < c.num_layers; ++i) {
    slot_layers.emplace_back("qf.layer" + std::to_string(i) + ".slot_attn", c.dim,
                             c.d_input, rng);
    shared_blocks.emplace_back("qf.layer" + std::to_string(i) + ".shared", c.dim,
                               c.heads, c.ff_hidden, rng);
  }
}

Var SlotQFormer::init_slots(Graph& g, Mode mode, Rng& rng) {
  Var mu = g.param(slot_mu);
  if (mode == Mode::eval || cfg.noise_scale == 0.0) {
    if (mode == Mode::eval) return mu;
    // train mode with zero scale: still differentiates through mu only
    return mu;
  }
  Mat eps(cfg.n_slots, cfg.dim);
  for (Eigen::Index i = 0; i < eps.rows(); ++i)
    for (Eigen::Index j = 0; j < eps.cols(); ++j) eps(i, j) = rng.gaussian();
  Var sigma = g.exp_(g.param(slot_log_sigma));  // 1 x D
  Var noise = g.mul_rowbc(g.input(cfg.noise_scale * eps), sigma);
  return g.add(mu, noise);
}

SlotStepResult SlotQFormer::slot_attention_step(Graph& g, int layer, Var slots,
                                                Var features) {
  SlotAttnLayer& L = slot_layers.at(static_cast<std::size_t>(layer));
  Var qs = L.q(g, L.ln_slots(g, slots));
  Var fe = L.ln_inputs(g, features);
  Var ke = L.k(g, fe);
  Var ve = L.v(g, fe);
  Var logits = g.smul(g.matmul(qs, g.transpose(ke)), 1.0 / std::sqrt(double(cfg.dim)));
  if (!ad::all_finite(g.val(logits)))
    throw std::runtime_error("slot_attention_step: non-finite attention logits at layer " +
                             std::to_string(layer));
  // Competition: softmax over the slot axis, then weighted-mean renorm over
  // features (the paper_literal flag keeps the column-normalized map as-is).
  Var attn = g.softmax_cols(logits);
  Var weights = cfg.normalization == AttnNormalization::weighted_mean
                    ? g.norm_rows_sum(attn, 1e-8)
                    : attn;
  Var update = g.matmul(weights, ve);
  Var next = L.gru(g, update, slots);
  return {next, attn, update};
}

Var SlotQFormer::encode_slots_g(Graph& g, Var features, Mode mode, Rng& rng,
                                SlotEmbeddings* out) {
  Var slots = init_slots(g, mode, rng);
  const Mat cmask = nn::causal_mask(cfg.n_slots);
  for (int l = 0; l < cfg.num_layers; ++l) {
    if (cfg.use_slot_attention) {
      for (int it = 0; it < cfg.gru_iters; ++it) {
        SlotStepResult r;
        try {
          r = slot_attention_step(g, l, slots, features);
        } catch (const std::runtime_error& e) {
          throw std::runtime_error(std::string(e.what()) + " iteration " +
                                   std::to_string(it));
        }
        slots = r.slots;
        if (out) out->attention_maps.push_back(g.val(r.attn));
      }
    } else {
      // Ablation: one standard cross-attention pass, no GRU refinement.
      SlotAttnLayer& L = slot_layers.at(static_cast<std::size_t>(l));
      Var qs = L.q(g, L.ln_slots(g, slots));
      Var fe = L.ln_inputs(g, features);
      Var logits =
          g.smul(g.matmul(qs, g.transpose(L.k(g, fe))), 1.0 / std::sqrt(double(cfg.dim)));
      if (!ad::all_finite(g.val(logits)))
        throw std::runtime_error("cross_attention: non-finite logits at layer " +
                                 std::to_string(l));
      Var attn = g.softmax_rows(logits);
      slots = g.add(slots, L.cross_out(g, g.matmul(attn, L.v(g, fe))));
      if (out) out->attention_maps.push_back(g.val(attn));
    }
    slots = shared_blocks[static_cast<std::size_t>(l)](g, slots, &cmask);
  }
  if (out) out->slots = g.val(slots);
  return slots;
}

SlotEmbeddings SlotQFormer::encode_slots(const Mat& features, Mode mode, Rng& rng) {
  Graph g;
  SlotEmbeddings out;
  encode_slots_g(g, g.input(features), mode, rng, &out);
  return out;
}

Var SlotQFormer::encode_text_g(Graph& g, const std::vector<int>& ids, Var* per_token) {
  if (ids.empty()) throw std::invalid_argument("encode_text: empty sequence");
  if (static_cast<int>(ids.size()) > cfg.max_text_len)
    throw std::invalid_argument("encode_text: sequence longer than max_text_len");
  const int L = static_cast<int>(ids.size());
  Var x = g.embed_rows(g.param(tok_emb), ids);
  x = g.add(x, g.slice_rows(g.param(text_pos), 0, L));
  const Mat cmask = nn::causal_mask(L);
  for (auto& b : shared_blocks) x = b(g, x, &cmask);
  if (per_token) *per_token = x;
  return g.slice_rows(x, L - 1, 1);
}

TextEmbedding SlotQFormer::encode_text(const std::vector<int>& ids) {
  Graph g;
  Var per_token;
  Var final_emb = encode_text_g(g, ids, &per_token);
  return {g.val(final_emb), g.val(per_token)};
}

Var SlotQFormer::caption_logits_g(Graph& g, Var slot_embs, const std::vector<int>& ids) {
  if (ids.empty()) throw std::invalid_argument("caption_logits: empty caption");
  const int N = cfg.n_slots;
  const int L = static_cast<int>(ids.size());
  Var text = g.embed_rows(g.param(tok_emb), ids);
  text = g.add(text, g.slice_rows(g.param(text_pos), 0, L));
  Var seq = g.concat_rows(slot_embs, text);
  const Mat cmask = nn::causal_mask(N + L);
  for (auto& b : shared_blocks) seq = b(g, seq, &cmask);
  // Row N-1 predicts ids[0]; row N+i predicts ids[i+1].
  Var rows = g.slice_rows(seq, N - 1, L);
  return lm_head(g, rows);
}

double SlotQFormer::clamped_temperature() const {
  return std::min(1.0, std::max(1e-3, temperature.value(0, 0)));
}

void SlotQFormer::clamp_temperature() {
  temperature.value(0, 0) = clamped_temperature();
}

void SlotQFormer::collect(std::vector<Tensor*>& out) {
  out.push_back(&slot_mu);
  out.push_back(&slot_log_sigma);
  for (auto& l : slot_layers) l.collect(out);
  for (auto& b : shared_blocks) b.collect(out);
  out.push_back(&tok_emb);
  out.push_back(&text_pos);
  lm_head.collect(out);
  out.push_back(&temperature);
}

void SlotQFormer::set_trainable(bool on) {
  std::vector<Tensor*> ts;
  collect(ts);
  for (auto* t : ts) t->trainable = on;
}

}  // namespace slottok::qformer
