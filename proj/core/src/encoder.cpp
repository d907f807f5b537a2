#include "slottok/encoder.hpp"

#include <stdexcept>

#include "slottok/serialize.hpp"

namespace slottok::encoder {

EncoderConfig EncoderConfig::desk() { return EncoderConfig{}; }

EncoderConfig EncoderConfig::paper() {
  EncoderConfig c;
  c.canvas = 448;
  c.patch = 14;
  c.d_input = 1024;
  c.layers = 2;
  c.heads = 8;
  c.ff_hidden = 4096;
  return c;
}

Mat patchify(const Mat& rgb, int h, int w, int patch) {
  if (h % patch != 0 || w % patch != 0)
    throw std::invalid_argument("patchify: canvas not divisible by patch");
  const int gh = h / patch, gw = w / patch;
  Mat out(static_cast<Eigen::Index>(gh) * gw, static_cast<Eigen::Index>(patch) * patch * 3);
  for (int py = 0; py < gh; ++py)
    for (int px = 0; px < gw; ++px) {
      const Eigen::Index row = static_cast<Eigen::Index>(py) * gw + px;
      Eigen::Index col = 0;
      for (int dy = 0; dy < patch; ++dy)
        for (int dx = 0; dx < patch; ++dx) {
          const Eigen::Index src =
              static_cast<Eigen::Index>(py * patch + dy) * w + (px * patch + dx);
          for (int c = 0; c < 3; ++c) out(row, col++) = rgb(c, src);
        }
    }
  return out;
}

VisionEncoder::VisionEncoder(const std::string& name, const EncoderConfig& c, Rng& rng)
    : cfg(c),
      patch_proj(name + ".patch", c.patch * c.patch * 3, c.d_input, rng),
      pos(name + ".pos", nn::gaussian_init(c.num_patches(), c.d_input, 0.02, rng),
          /*no_decay=*/true),
      ln_f(name + ".ln_f", c.d_input) {
  for (int i = 0; i < c.layers; ++i)
    blocks.emplace_back(name + ".block" + std::to_string(i), c.d_input, c.heads,
                        c.ff_hidden, rng);
}

Var VisionEncoder::forward(Graph& g, const Image& img) {
  if (img.h != cfg.canvas || img.w != cfg.canvas)
    throw std::invalid_argument("encode_features: image is " + std::to_string(img.h) +
                                "x" + std::to_string(img.w) + ", config wants " +
                                std::to_string(cfg.canvas));
  Var x = g.matmul(g.input(patchify(img.rgb, img.h, img.w, cfg.patch)),
                   g.param(patch_proj.W));
  x = g.add_rowbc(x, g.param(patch_proj.b));
  x = g.add(x, g.param(pos));
  for (auto& b : blocks) x = b(g, x);
  return ln_f(g, x);
}

FeatureGrid VisionEncoder::encode_features(const Image& img) {
  Graph g;
  FeatureGrid grid;
  grid.features = g.val(forward(g, img));
  grid.gh = cfg.grid_side();
  grid.gw = cfg.grid_side();
  return grid;
}

void VisionEncoder::collect(std::vector<Tensor*>& out) {
  patch_proj.collect(out);
  out.push_back(&pos);
  for (auto& b : blocks) b.collect(out);
  ln_f.collect(out);
}

void VisionEncoder::set_trainable(bool on) {
  std::vector<Tensor*> ts;
  collect(ts);
  for (auto* t : ts) t->trainable = on;
}

ReferenceModel::ReferenceModel(const ReferenceConfig& c, Rng& rng)
    : cfg(c),
      tower("ref.tower", c.image_tower, rng),
      img_proj("ref.img_proj", c.image_tower.d_input, c.d_ref, rng),
      tok_emb("ref.tok_emb", nn::gaussian_init(c.text_vocab, c.d_ref, 0.02, rng),
              /*no_decay=*/true),
      pos_emb("ref.pos_emb", nn::gaussian_init(c.max_text_len, c.d_ref, 0.02, rng),
              /*no_decay=*/true),
      txt_proj("ref.txt_proj", c.d_ref, c.d_ref, rng),
      temperature("ref.tau", Mat::Constant(1, 1, 0.07), /*no_decay=*/true) {
  if (c.text_vocab <= 0) throw std::invalid_argument("ReferenceModel: text_vocab unset");
  for (int i = 0; i < c.text_layers; ++i)
    text_blocks.emplace_back("ref.txt_block" + std::to_string(i), c.d_ref,
                             c.text_heads, c.text_ff, rng);
}

Var ReferenceModel::embed_image_g(Graph& g, const Image& img) {
  Var feats = tower.forward(g, img);          // M x d_input
  Var pooled = g.colmean(feats);              // 1 x d_input  (token mean)
  return g.l2norm_rows(img_proj(g, pooled));
}

Var ReferenceModel::embed_text_g(Graph& g, const std::vector<int>& ids) {
  if (ids.empty()) throw std::invalid_argument("embed_text: empty sequence");
  if (static_cast<int>(ids.size()) > cfg.max_text_len)
    throw std::invalid_argument("embed_text: sequence too long");
  const int L = static_cast<int>(ids.size());
  Var x = g.embed_rows(g.param(tok_emb), ids);
  x = g.add(x, g.slice_rows(g.param(pos_emb), 0, L));
  const Mat mask = nn::causal_mask(L);
  for (auto& b : text_blocks) x = b(g, x, &mask);
  Var last = g.slice_rows(x, L - 1, 1);
  return g.l2norm_rows(txt_proj(g, last));
}

Mat ReferenceModel::reference_embed(const Image& img) const {
  if (!frozen)
    throw std::logic_error("reference_embed: embedder not pretrained/frozen");
  auto* self = const_cast<ReferenceModel*>(this);
  Graph g;
  return g.val(self->embed_image_g(g, img));
}

void ReferenceModel::freeze() {
  std::vector<Tensor*> ts;
  collect(ts);
  for (auto* t : ts) t->trainable = false;
  frozen = true;
  frozen_hash = hex64(weights_hash(ts));
}

void ReferenceModel::collect(std::vector<Tensor*>& out) {
  tower.collect(out);
  img_proj.collect(out);
  out.push_back(&tok_emb);
  out.push_back(&pos_emb);
  for (auto& b : text_blocks) b.collect(out);
  txt_proj.collect(out);
  out.push_back(&temperature);
}

}  // namespace slottok::encoder
