#include "slottok/model.hpp"

#include <nlohmann/json.hpp>

#include "slottok/serialize.hpp"

namespace slottok::model {

using nlohmann::json;

ModelConfig ModelConfig::desk(int text_vocab) {
  ModelConfig c;
  c.enc = encoder::EncoderConfig::desk();
  c.qf = qformer::SlotConfig::desk(text_vocab);
  c.rvq = quantizer::QuantizerConfig::desk();
  c.dec = decoder::DecoderConfig::desk();
  c.ref.image_tower = encoder::EncoderConfig::desk();
  c.ref.text_vocab = text_vocab;
  return c;
}

json ModelConfig::to_json() const {
  json j;
  j["encoder"] = {{"canvas", enc.canvas},   {"patch", enc.patch},
                  {"d_input", enc.d_input}, {"layers", enc.layers},
                  {"heads", enc.heads},     {"ff_hidden", enc.ff_hidden},
                  {"trainable", enc.trainable}};
  j["qformer"] = {{"n_slots", qf.n_slots},
                  {"dim", qf.dim},
                  {"d_input", qf.d_input},
                  {"gru_iters", qf.gru_iters},
                  {"num_layers", qf.num_layers},
                  {"heads", qf.heads},
                  {"ff_hidden", qf.ff_hidden},
                  {"noise_scale", qf.noise_scale},
                  {"temperature_init", qf.temperature_init},
                  {"normalization", qf.normalization == qformer::AttnNormalization::weighted_mean
                                        ? "weighted_mean"
                                        : "paper_literal"},
                  {"use_slot_attention", qf.use_slot_attention},
                  {"text_vocab", qf.text_vocab},
                  {"max_text_len", qf.max_text_len}};
  j["quantizer"] = {{"codebook_size", rvq.codebook_size},
                    {"d_code", rvq.d_code},
                    {"depth", rvq.depth},
                    {"slot_dim", rvq.slot_dim},
                    {"n_slots", rvq.n_slots},
                    {"post_heads", rvq.post_heads},
                    {"post_ff", rvq.post_ff},
                    {"commit", rvq.commit == quantizer::CommitMode::cumulative
                                   ? "cumulative"
                                   : "per_depth"},
                    {"ema_decay", rvq.ema_decay},
                    {"dead_code_steps", rvq.dead_code_steps}};
  j["decoder"] = {{"n_slots", dec.n_slots},
                  {"dim", dec.dim},
                  {"d_t", dec.d_t},
                  {"canvas", dec.canvas},
                  {"base_channels", dec.base_channels},
                  {"channel_mult", dec.channel_mult},
                  {"groups", dec.groups},
                  {"refine_heads", dec.refine_heads},
                  {"refine_ff", dec.refine_ff},
                  {"global_hidden", dec.global_hidden},
                  {"mlp_then_pool", dec.mlp_then_pool},
                  {"global_add_before_mlp", dec.global_add_before_mlp},
                  {"freeze_unet_body", dec.freeze_unet_body},
                  {"timesteps", dec.diffusion.timesteps},
                  {"beta_start", dec.diffusion.beta_start},
                  {"beta_end", dec.diffusion.beta_end}};
  j["reference"] = {{"d_ref", ref.d_ref},
                    {"text_layers", ref.text_layers},
                    {"text_heads", ref.text_heads},
                    {"text_ff", ref.text_ff},
                    {"text_vocab", ref.text_vocab},
                    {"max_text_len", ref.max_text_len},
                    {"tower_patch", ref.image_tower.patch},
                    {"tower_layers", ref.image_tower.layers},
                    {"tower_canvas", ref.image_tower.canvas},
                    {"tower_d_input", ref.image_tower.d_input}};
  return j;
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  const auto& e = j.at("encoder");
  c.enc.canvas = e.at("canvas");
  c.enc.patch = e.at("patch");
  c.enc.d_input = e.at("d_input");
  c.enc.layers = e.at("layers");
  c.enc.heads = e.at("heads");
  c.enc.ff_hidden = e.at("ff_hidden");
  c.enc.trainable = e.at("trainable");
  const auto& q = j.at("qformer");
  c.qf.n_slots = q.at("n_slots");
  c.qf.dim = q.at("dim");
  c.qf.d_input = q.at("d_input");
  c.qf.gru_iters = q.at("gru_iters");
  c.qf.num_layers = q.at("num_layers");
  c.qf.heads = q.at("heads");
  c.qf.ff_hidden = q.at("ff_hidden");
  c.qf.noise_scale = q.at("noise_scale");
  c.qf.temperature_init = q.at("temperature_init");
  c.qf.normalization = q.at("normalization") == "weighted_mean"
                           ? qformer::AttnNormalization::weighted_mean
                           : qformer::AttnNormalization::paper_literal;
  c.qf.use_slot_attention = q.at("use_slot_attention");
  c.qf.text_vocab = q.at("text_vocab");
  c.qf.max_text_len = q.at("max_text_len");
  const auto& r = j.at("quantizer");
  c.rvq.codebook_size = r.at("codebook_size");
  c.rvq.d_code = r.at("d_code");
  c.rvq.depth = r.at("depth");
  c.rvq.slot_dim = r.at("slot_dim");
  c.rvq.n_slots = r.at("n_slots");
  c.rvq.post_heads = r.at("post_heads");
  c.rvq.post_ff = r.at("post_ff");
  c.rvq.commit = r.at("commit") == "cumulative" ? quantizer::CommitMode::cumulative
                                                : quantizer::CommitMode::per_depth;
  c.rvq.ema_decay = r.at("ema_decay");
  c.rvq.dead_code_steps = r.at("dead_code_steps");
  const auto& d = j.at("decoder");
  c.dec.n_slots = d.at("n_slots");
  c.dec.dim = d.at("dim");
  c.dec.d_t = d.at("d_t");
  c.dec.canvas = d.at("canvas");
  c.dec.base_channels = d.at("base_channels");
  c.dec.channel_mult = d.at("channel_mult").get<std::vector<int>>();
  c.dec.groups = d.at("groups");
  c.dec.refine_heads = d.at("refine_heads");
  c.dec.refine_ff = d.at("refine_ff");
  c.dec.global_hidden = d.at("global_hidden");
  c.dec.mlp_then_pool = d.at("mlp_then_pool");
  c.dec.global_add_before_mlp = d.at("global_add_before_mlp");
  c.dec.freeze_unet_body = d.at("freeze_unet_body");
  c.dec.diffusion.timesteps = d.at("timesteps");
  c.dec.diffusion.beta_start = d.at("beta_start");
  c.dec.diffusion.beta_end = d.at("beta_end");
  const auto& f = j.at("reference");
  c.ref.d_ref = f.at("d_ref");
  c.ref.text_layers = f.at("text_layers");
  c.ref.text_heads = f.at("text_heads");
  c.ref.text_ff = f.at("text_ff");
  c.ref.text_vocab = f.at("text_vocab");
  c.ref.max_text_len = f.at("max_text_len");
  c.ref.image_tower.patch = f.at("tower_patch");
  c.ref.image_tower.layers = f.at("tower_layers");
  c.ref.image_tower.canvas = f.at("tower_canvas");
  c.ref.image_tower.d_input = f.at("tower_d_input");
  return c;
}

std::string ModelConfig::hash() const {
  const std::string s = to_json().dump();
  Fnv1a h;
  h.update(s.data(), s.size());
  return hex64(h.digest());
}

TokenizerModel::TokenizerModel(const ModelConfig& c, std::uint64_t seed) : cfg(c) {
  Rng rng(seed, /*stream=*/0x70cc);
  enc = encoder::VisionEncoder("enc", c.enc, rng);
  qf = qformer::SlotQFormer(c.qf, rng);
  rvq = quantizer::ResidualQuantizer(c.rvq, rng);
  dec = decoder::VisualDecoder(c.dec, rng);
  ref = encoder::ReferenceModel(c.ref, rng);
  rvq.config_hash = cfg.hash();
  enc.set_trainable(c.enc.trainable);
}

qformer::SlotEmbeddings TokenizerModel::encode_image(const Image& img) {
  ad::Graph g;
  g.set_inference(true);
  Rng noise_rng(0);
  qformer::SlotEmbeddings out;
  qf.encode_slots_g(g, enc.forward(g, img), qformer::Mode::eval, noise_rng, &out);
  return out;
}

quantizer::SlotTokens TokenizerModel::tokenize(const Image& img) {
  auto embs = encode_image(img);
  return rvq.quantize_values(embs.slots).tokens;
}

decoder::DecoderConditioning TokenizerModel::conditioning_from_tokens(
    const quantizer::SlotTokens& t) {
  const ad::Mat s_prime = rvq.dequantize(t);
  decoder::DecoderConditioning cond;
  cond.local = dec.refine(s_prime);
  cond.global = dec.global_head(cond.local);
  return cond;
}

decoder::DecoderConditioning TokenizerModel::conditioning_from_image(const Image& img) {
  auto embs = encode_image(img);
  decoder::DecoderConditioning cond;
  cond.local = dec.refine(embs.slots);
  cond.global = dec.global_head(cond.local);
  return cond;
}

Image TokenizerModel::reconstruct(const quantizer::SlotTokens& tokens, int steps,
                                  std::uint64_t seed) {
  Rng rng(seed, /*stream=*/0xd1ff);
  auto cond = conditioning_from_tokens(tokens);
  return dec.sample(cond, steps, rng);
}

Image TokenizerModel::reconstruct_continuous(const Image& img, int steps,
                                             std::uint64_t seed) {
  Rng rng(seed, /*stream=*/0xd1ff);
  auto cond = conditioning_from_image(img);
  return dec.sample(cond, steps, rng);
}

void TokenizerModel::collect_all(std::vector<ad::Tensor*>& out) {
  enc.collect(out);
  qf.collect(out);
  rvq.collect(out);
  dec.collect(out);
  ref.collect(out);
}

void TokenizerModel::save(const std::string& path) const {
  auto* self = const_cast<TokenizerModel*>(this);
  std::vector<ad::Tensor*> ts;
  self->collect_all(ts);
  json meta;
  meta["kind"] = "tokenizer";
  meta["model_config"] = cfg.to_json();
  meta["config_hash"] = cfg.hash();
  meta["stage"] = stage;
  meta["ref_frozen"] = ref.frozen;
  meta["ref_hash"] = ref.frozen_hash;
  save_checkpoint(path, meta, ts);
}

std::unique_ptr<TokenizerModel> TokenizerModel::load(const std::string& path) {
  json meta = peek_checkpoint(path);
  if (meta.value("kind", "") != "tokenizer")
    throw std::runtime_error("load: " + path + " is not a tokenizer checkpoint");
  auto cfg = ModelConfig::from_json(meta.at("model_config"));
  auto m = std::make_unique<TokenizerModel>(cfg, /*seed=*/0);
  std::vector<ad::Tensor*> ts;
  m->collect_all(ts);
  load_checkpoint(path, ts);
  m->stage = meta.at("stage").get<std::string>();
  if (meta.at("ref_frozen").get<bool>()) {
    m->ref.freeze();
    const std::string want = meta.at("ref_hash").get<std::string>();
    if (!want.empty() && want != m->ref.frozen_hash)
      throw std::runtime_error("load: reference embedder hash changed");
  }
  return m;
}

}  // namespace slottok::model
