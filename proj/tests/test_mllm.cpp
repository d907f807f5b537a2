#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "slottok/mllm.hpp"
#include "slottok/serialize.hpp"
#include "test_util.hpp"

using namespace slottok;
using namespace slottok::mllm;
using namespace testutil;

namespace {

quantizer::SlotTokens random_tokens(int n, int k, int v, Rng& rng) {
  quantizer::SlotTokens t;
  t.n = n;
  t.k = k;
  for (int i = 0; i < n * k; ++i) t.codes.push_back(static_cast<int>(rng.below(v)));
  return t;
}

LmConfig tiny_lm_cfg(const VocabLayout& l) {
  LmConfig c;
  c.vocab_total = l.total();
  c.layers = 2;
  c.width = 32;
  c.heads = 4;
  c.ff_hidden = 64;
  c.context = 128;
  return c;
}

}  // namespace

TEST_CASE("vocabulary layout arithmetic and id partition") {
  auto l = build_vocab(100, 512);
  CHECK(l.total() == 614);
  CHECK(l.boi_id == 612);
  CHECK(l.eoi_id == 613);
  int text = 0, visual = 0, special = 0;
  for (int id = 0; id < l.total(); ++id) {
    switch (l.classify(id)) {
      case SegmentTag::text: ++text; break;
      case SegmentTag::visual: ++visual; break;
      case SegmentTag::special: ++special; break;
    }
  }
  CHECK(text == 100);
  CHECK(visual == 512);
  CHECK(special == 2);
  CHECK_THROWS(l.classify(614));

  auto paper = build_vocab(32000, 8192);
  CHECK(paper.visual_size == 8192);
  CHECK(paper.total() == 32000 + 8192 + 2);
}

TEST_CASE("flattening lengths for table and desk presets") {
  Rng rng(1);
  auto l32 = build_vocab(100, 8192);
  auto t32 = random_tokens(32, 4, 8192, rng);
  CHECK(image_to_lm_tokens(t32, l32).size() == 130);
  auto l8 = build_vocab(27, 512);
  auto t8 = random_tokens(8, 4, 512, rng);
  CHECK(image_to_lm_tokens(t8, l8).size() == 34);
}

TEST_CASE("flatten/unflatten is a bijection for both orders") {
  Rng rng(2);
  auto l = build_vocab(27, 512);
  for (int trial = 0; trial < 1000; ++trial) {
    auto t = random_tokens(8, 4, 512, rng);
    const auto order =
        trial % 2 == 0 ? FlattenOrder::slot_major : FlattenOrder::depth_major;
    auto span = image_to_lm_tokens(t, l, order);
    auto back = lm_tokens_to_image(span, l, 8, 4, order);
    CHECK(back.codes == t.codes);
  }
}

TEST_CASE("unflatten validates structure") {
  Rng rng(3);
  auto l = build_vocab(27, 512);
  auto t = random_tokens(4, 2, 512, rng);
  auto span = image_to_lm_tokens(t, l);
  auto bad = span;
  bad.pop_back();
  CHECK_THROWS(lm_tokens_to_image(bad, l, 4, 2));
  auto bad2 = span;
  bad2[1] = 3;  // text id inside the span
  CHECK_THROWS(lm_tokens_to_image(bad2, l, 4, 2));
}

TEST_CASE("pretrain assembly masks exactly the output modality") {
  Rng rng(4);
  auto l = build_vocab(27, 64);
  auto t = random_tokens(4, 2, 64, rng);
  auto span = image_to_lm_tokens(t, l);
  const std::vector<int> caption = {1, 3, 10, 16, 2};

  auto t2i = assemble_pretrain(span, caption, l, Direction::t2i);
  int active = 0;
  for (std::size_t i = 0; i < t2i.size(); ++i) {
    if (t2i.loss_mask[i]) {
      ++active;
      CHECK(i >= caption.size());  // only the image span
    }
  }
  CHECK(active == 4 * 2 + 2);  // N*K + <boi> + <eoi>

  auto i2t = assemble_pretrain(span, caption, l, Direction::i2t);
  for (std::size_t i = 0; i < i2t.size(); ++i)
    if (i2t.segment_tags[i] == SegmentTag::visual) CHECK_FALSE(i2t.loss_mask[i]);

  auto inter = assemble_interleaved(span, caption, span, caption, l);
  for (std::size_t i = 0; i < inter.size(); ++i)
    CHECK(inter.loss_mask[i] == (inter.segment_tags[i] == SegmentTag::text));
}

TEST_CASE("sft template renders role markers and masks only the answer") {
  Rng rng(5);
  auto vocab = synth::Vocabulary::standard();
  auto l = build_vocab(vocab.size(), 64);
  auto t = random_tokens(4, 2, 64, rng);
  auto span = image_to_lm_tokens(t, l);

  MixedSequence instruction;
  for (int id : {vocab.id("please"), vocab.id("generate"), vocab.id("an"), vocab.id("image")})
    instruction.append(id, false, SegmentTag::text);
  MixedSequence answer;
  for (int id : span) answer.append(id, false, l.classify(id));

  auto seq = assemble_sft(instruction, answer, l, vocab);
  CHECK(vocab.token(seq.ids.front()) == "USER:");
  bool has_assistant = false;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.segment_tags[i] == SegmentTag::text &&
        seq.ids[i] < vocab.size() && vocab.token(seq.ids[i]) == "ASSISTANT:")
      has_assistant = true;
  }
  CHECK(has_assistant);
  // loss is active exactly on the answer span
  int active = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) active += seq.loss_mask[i] ? 1 : 0;
  CHECK(active == static_cast<int>(span.size()));
  for (std::size_t i = 0; i + span.size() < seq.size(); ++i) CHECK_FALSE(seq.loss_mask[i]);

  SUBCASE("editing-style: image+text instruction, image answer") {
    MixedSequence edit_instr;
    for (int id : span) edit_instr.append(id, false, l.classify(id));
    edit_instr.append(vocab.id("red"), false, SegmentTag::text);
    auto seq2 = assemble_sft(edit_instr, answer, l, vocab);
    int act2 = 0;
    for (std::size_t i = 0; i < seq2.size(); ++i) act2 += seq2.loss_mask[i] ? 1 : 0;
    CHECK(act2 == static_cast<int>(span.size()));
  }
}

TEST_CASE("span well-formedness checker") {
  auto l = build_vocab(27, 64);
  Rng rng(6);
  auto span = image_to_lm_tokens(random_tokens(4, 2, 64, rng), l);
  std::vector<int> good = {1, 2};
  good.insert(good.end(), span.begin(), span.end());
  CHECK(spans_well_formed(good, l, 4, 2));
  auto truncated = std::vector<int>(span.begin(), span.end() - 2);
  CHECK_FALSE(spans_well_formed(truncated, l, 4, 2));
  std::vector<int> stray = {l.visual_offset + 3};
  CHECK_FALSE(spans_well_formed(stray, l, 4, 2));
}

TEST_CASE("masked positions contribute exactly zero gradient") {
  auto l = build_vocab(27, 64);
  LanguageModel lm(tiny_lm_cfg(l), l, /*seed=*/7);
  MixedSequence seq;
  for (int id : {1, 5, 9, 2}) seq.append(id, false, SegmentTag::text);
  ad::Graph g;
  auto [loss, count] = lm.sequence_loss_g(g, seq);
  CHECK(count == 0);
  CHECK(g.val(loss)(0, 0) == 0.0);
  g.backward(loss);
  g.accumulate_param_grads();
  std::vector<ad::Tensor*> ts;
  lm.collect(ts);
  for (auto* t : ts) CHECK(t->grad.isZero(0.0));
}

TEST_CASE("uniform logits give ln(total vocab) on active positions") {
  auto l = build_vocab(27, 64);
  LanguageModel lm(tiny_lm_cfg(l), l, 8);
  lm.head.W.value.setZero();
  lm.head.b.value.setZero();
  MixedSequence seq;
  seq.append(1, false, SegmentTag::text);
  seq.append(5, true, SegmentTag::text);
  seq.append(2, true, SegmentTag::text);
  ad::Graph g;
  auto [loss, count] = lm.sequence_loss_g(g, seq);
  CHECK(count == 2);
  CHECK(g.val(loss)(0, 0) == doctest::Approx(std::log(double(l.total()))).epsilon(1e-9));
}

TEST_CASE("LoRA: zero-init identity, freeze, merge parity") {
  auto l = build_vocab(27, 64);
  LanguageModel lm(tiny_lm_cfg(l), l, 9);
  const std::vector<int> probe = {1, 4, 9, l.boi_id, l.visual_offset + 3};
  const Mat before = lm.logits(probe);

  LoraSpec spec;
  spec.rank = 32;  // spans the full 32-wide projection
  spec.target = {"q", "v"};
  lm.lora_apply(spec, 11);
  CHECK(lm.lora_attached());
  const Mat after = lm.logits(probe);
  CHECK((before - after).cwiseAbs().maxCoeff() == 0.0);  // B is zero-initialized

  const auto base_hash = lm.base_weights_hash();

  // a few adapted steps move adapters but never the base weights
  MllmTrainConfig tc;
  tc.steps = 20;
  tc.batch = 2;
  tc.max_lr = 1e-2;
  tc.warmup_steps = 2;
  std::vector<MixedSequence> data;
  Rng rng(10);
  for (int i = 0; i < 4; ++i) {
    auto span = image_to_lm_tokens(random_tokens(4, 2, 64, rng), l);
    data.push_back(assemble_pretrain(span, {1, 5, 9, 2}, l, Direction::t2i));
  }
  MllmTrainer trainer(lm, data, tc);
  for (int s = 0; s < 20; ++s) trainer.step(s);
  CHECK(lm.base_weights_hash() == base_hash);

  const Mat unmerged = lm.logits(probe);
  lm.lora_merge();
  const Mat merged = lm.logits(probe);
  CHECK((unmerged - merged).cwiseAbs().maxCoeff() < 1e-5);
  lm.lora_unmerge();
  const Mat back = lm.logits(probe);
  CHECK((unmerged - back).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("unknown LoRA target raises") {
  LoraSpec spec;
  spec.rank = 4;
  spec.target = {"query"};
  CHECK_THROWS(spec.validate());
}

TEST_CASE("constrained generation emits well-formed spans and is deterministic") {
  auto l = build_vocab(27, 64);
  LanguageModel lm(tiny_lm_cfg(l), l, 12);
  MixedSequence prompt;
  for (int id : {1, 10, 16, 2}) prompt.append(id, false, SegmentTag::text);

  GenerateConfig gc;
  gc.max_new = 16;
  gc.n_slots = 3;
  gc.depth = 2;

  auto a = lm.generate(prompt, gc);
  auto b = lm.generate(prompt, gc);
  CHECK(a.ids == b.ids);  // greedy decoding is deterministic

  gc.temperature = 1.2;
  for (std::uint64_t s = 0; s < 20; ++s) {
    gc.seed = s;
    auto out = lm.generate(prompt, gc);
    CHECK(spans_well_formed(out.ids, l, gc.n_slots, gc.depth));
  }
}

TEST_CASE("generation reports context overflow") {
  auto l = build_vocab(27, 64);
  auto cfg = tiny_lm_cfg(l);
  cfg.context = 8;
  LanguageModel lm(cfg, l, 13);
  MixedSequence prompt;
  for (int id : {1, 2, 3, 4, 5, 6}) prompt.append(id, false, SegmentTag::text);
  GenerateConfig gc;
  gc.max_new = 10;
  try {
    lm.generate(prompt, gc);
    FAIL("expected overflow");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("truncat") != std::string::npos);
  }
}

TEST_CASE("language model save/load round trip") {
  auto l = build_vocab(27, 64);
  LanguageModel lm(tiny_lm_cfg(l), l, 14);
  const std::vector<int> probe = {1, 4, 9, 2};
  const Mat before = lm.logits(probe);
  const std::string path = "/tmp/slottok_lm_test.ckpt";
  lm.save(path);
  auto loaded = LanguageModel::load(path);
  CHECK((loaded->logits(probe) - before).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove(path);
}
