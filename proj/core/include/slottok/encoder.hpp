#pragma once

#include <string>
#include <vector>

#include "slottok/image.hpp"
#include "slottok/nn.hpp"

namespace slottok::encoder {

using ad::Graph;
using ad::Mat;
using ad::Tensor;
using ad::Var;

struct EncoderConfig {
  int canvas = 64;
  int patch = 8;
  int d_input = 64;
  int layers = 2;
  int heads = 4;
  int ff_hidden = 256;
  bool trainable = true;

  int grid_side() const { return canvas / patch; }
  int num_patches() const { return grid_side() * grid_side(); }

  static EncoderConfig desk();
  // Table-scale preset: 448x448 input grid (config only; not the default).
  static EncoderConfig paper();
};

struct FeatureGrid {
  Mat features;  // M x d_input
  int gh = 0, gw = 0;
};

// Splits a planar 3x(H*W) image into rows of flattened P*P*3 patches.
Mat patchify(const Mat& rgb, int h, int w, int patch);

// Small ViT over non-overlapping patches; the trainable stand-in for a
// pretrained vision backbone.
struct VisionEncoder {
  EncoderConfig cfg;
  nn::Linear patch_proj;
  Tensor pos;
  std::vector<nn::Block> blocks;
  nn::LayerNorm ln_f;

  VisionEncoder() = default;
  VisionEncoder(const std::string& name, const EncoderConfig& c, Rng& rng);

  // Graph path; the image enters as a constant, parameters carry gradients.
  Var forward(Graph& g, const Image& img);
  FeatureGrid encode_features(const Image& img);

  void collect(std::vector<Tensor*>& out);
  void set_trainable(bool on);
};

struct ReferenceConfig {
  EncoderConfig image_tower;
  int d_ref = 64;
  int text_layers = 2;
  int text_heads = 4;
  int text_ff = 256;
  int text_vocab = 0;   // set from Vocabulary::size()
  int max_text_len = 24;
};

// Frozen global-image-embedding provider: a miniature two-tower contrastive
// model pre-trained on the synthetic pairs ("stage 0"), then locked.
struct ReferenceModel {
  ReferenceConfig cfg;
  VisionEncoder tower;
  nn::Linear img_proj;
  Tensor tok_emb, pos_emb;
  std::vector<nn::Block> text_blocks;
  nn::Linear txt_proj;
  Tensor temperature;  // 1x1, learnable during stage 0

  bool frozen = false;
  std::string frozen_hash;  // weight content hash at freeze time

  ReferenceModel() = default;
  ReferenceModel(const ReferenceConfig& c, Rng& rng);

  Var embed_image_g(Graph& g, const Image& img);               // 1 x d_ref, unit norm
  Var embed_text_g(Graph& g, const std::vector<int>& ids);     // 1 x d_ref, unit norm

  // Pure eval path; requires the model to be pretrained+frozen.
  Mat reference_embed(const Image& img) const;

  void freeze();
  void collect(std::vector<Tensor*>& out);
};

}  // namespace slottok::encoder
