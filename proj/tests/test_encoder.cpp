#include "doctest.h"

#include "slottok/encoder.hpp"
#include "slottok/serialize.hpp"
#include "slottok/train.hpp"
#include "test_util.hpp"

using namespace slottok;
using namespace slottok::encoder;
using namespace testutil;

TEST_CASE("feature grid shape follows M = (H/P)(W/P)") {
  Rng rng(1);
  EncoderConfig cfg;  // 64x64, P=8, D=64
  VisionEncoder enc("enc", cfg, rng);
  auto scene = tiny_scene(3, 2);
  auto grid = enc.encode_features(scene.image);
  CHECK(grid.features.rows() == 64);
  CHECK(grid.features.cols() == 64);
  CHECK(grid.gh * grid.gw == 64);
  CHECK(grid.features.allFinite());
}

TEST_CASE("shape contract holds for configured presets") {
  // Table-scale preset is shape arithmetic only: 448/14 = 32 per side.
  EncoderConfig paper = EncoderConfig::paper();
  CHECK(paper.canvas == 448);
  CHECK(paper.num_patches() == 32 * 32);
  EncoderConfig desk = EncoderConfig::desk();
  CHECK(desk.num_patches() == 64);
}

TEST_CASE("encode_features rejects wrong image shapes") {
  Rng rng(2);
  VisionEncoder enc("enc", EncoderConfig::desk(), rng);
  Image wrong(32, 32);
  CHECK_THROWS(enc.encode_features(wrong));
}

TEST_CASE("encoder stack gradient matches finite differences at tiny dims") {
  Rng rng(3);
  EncoderConfig cfg;
  cfg.canvas = 8;
  cfg.patch = 4;   // M = 4
  cfg.d_input = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ff_hidden = 16;
  VisionEncoder enc("enc", cfg, rng);
  Image img(8, 8);
  img.rgb = random_mat(3, 64, rng, 0.3).array() + 0.5;
  std::vector<ad::Tensor*> params;
  enc.collect(params);
  auto build = [&](ad::Graph& g) { return g.mean_all(g.square(enc.forward(g, img))); };
  CHECK(max_rel_grad_error(build, params, /*stride=*/2) < 1e-3);
}

TEST_CASE("eval forward is deterministic") {
  Rng rng(4);
  VisionEncoder enc("enc", EncoderConfig::desk(), rng);
  auto scene = tiny_scene(9, 1);
  auto a = enc.encode_features(scene.image);
  auto b = enc.encode_features(scene.image);
  CHECK(a.features == b.features);
}

TEST_CASE("reference embedder: freeze, hash, unit norm, purity") {
  auto vocab = synth::Vocabulary::standard();
  ReferenceConfig rc;
  rc.image_tower.canvas = 32;
  rc.image_tower.patch = 8;
  rc.image_tower.d_input = 32;
  rc.image_tower.ff_hidden = 64;
  rc.d_ref = 32;
  rc.text_ff = 64;
  rc.text_vocab = vocab.size();

  std::vector<synth::SceneSample> data;
  for (std::uint64_t s = 0; s < 16; ++s) {
    auto spec = synth::SceneSpec::defaults(s, 1 + static_cast<int>(s % 2));
    spec.canvas_h = spec.canvas_w = 32;
    data.push_back(synth::generate_scene(spec, vocab));
  }

  Rng rng(5);
  ReferenceModel ref(rc, rng);
  CHECK_THROWS_AS(ref.reference_embed(data[0].image), std::logic_error);

  train::Stage0Config cfg;
  cfg.steps = 30;
  cfg.batch = 8;
  train::pretrain_reference(ref, data, cfg);
  CHECK(ref.frozen);
  CHECK_FALSE(ref.frozen_hash.empty());

  // weight updates on a frozen reference are rejected
  CHECK_THROWS_AS(train::pretrain_reference(ref, data, cfg), std::logic_error);

  auto e1 = ref.reference_embed(data[0].image);
  auto e2 = ref.reference_embed(data[0].image);
  CHECK(e1 == e2);
  CHECK(e1.row(0).norm() == doctest::Approx(1.0).epsilon(1e-6));

  // identical seeds and data give identical frozen hashes
  Rng rng2(5);
  ReferenceModel ref2(rc, rng2);
  train::pretrain_reference(ref2, data, cfg);
  CHECK(ref2.frozen_hash == ref.frozen_hash);
}

TEST_CASE("reference weights survive other training untouched (bit-identical)") {
  auto vocab = synth::Vocabulary::standard();
  ReferenceConfig rc;
  rc.image_tower.canvas = 32;
  rc.image_tower.patch = 8;
  rc.image_tower.d_input = 32;
  rc.image_tower.ff_hidden = 64;
  rc.d_ref = 32;
  rc.text_ff = 64;
  rc.text_vocab = vocab.size();
  Rng rng(6);
  ReferenceModel ref(rc, rng);
  ref.freeze();
  const std::string h0 = ref.frozen_hash;
  // grads routed into frozen tensors are ignored by the optimizer
  std::vector<ad::Tensor*> ts;
  ref.collect(ts);
  for (auto* t : ts) t->grad.setConstant(1.0);
  train::AdamW opt(train::OptimConfig{});
  opt.step(ts, 1e-2);
  std::vector<ad::Tensor*> ts2;
  ref.collect(ts2);
  CHECK(hex64(weights_hash(ts2)) == h0);
  for (auto* t : ts) t->zero_grad();
}
