#include <benchmark/benchmark.h>

#include "slottok/decoder.hpp"
#include "slottok/evalsuite.hpp"
#include "slottok/qformer.hpp"
#include "slottok/quantizer.hpp"
#include "slottok/rng.hpp"

using namespace slottok;

namespace {

ad::Mat random_mat(int r, int c, Rng& rng) {
  ad::Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.gaussian();
  return m;
}

void BM_SlotAttentionStep(benchmark::State& state) {
  Rng rng(1);
  auto cfg = qformer::SlotConfig::desk(27);
  qformer::SlotQFormer qf(cfg, rng);
  const ad::Mat features = random_mat(64, 64, rng);
  for (auto _ : state) {
    ad::Graph g;
    g.set_inference(true);
    auto r = qf.slot_attention_step(g, 0, g.param(qf.slot_mu), g.input(features));
    benchmark::DoNotOptimize(g.val(r.slots));
  }
}
BENCHMARK(BM_SlotAttentionStep);

void BM_EncodeSlots(benchmark::State& state) {
  Rng rng(2);
  auto cfg = qformer::SlotConfig::desk(27);
  qformer::SlotQFormer qf(cfg, rng);
  const ad::Mat features = random_mat(64, 64, rng);
  Rng noise(0);
  for (auto _ : state) {
    ad::Graph g;
    g.set_inference(true);
    auto s = qf.encode_slots_g(g, g.input(features), qformer::Mode::eval, noise);
    benchmark::DoNotOptimize(g.val(s));
  }
}
BENCHMARK(BM_EncodeSlots);

void BM_RvqQuantize(benchmark::State& state) {
  Rng rng(3);
  auto cfg = quantizer::QuantizerConfig::desk();
  quantizer::ResidualQuantizer q(cfg, rng);
  const ad::Mat slots = random_mat(8, 64, rng);
  for (auto _ : state) {
    auto r = q.quantize_values(slots);
    benchmark::DoNotOptimize(r.tokens.codes.data());
  }
}
BENCHMARK(BM_RvqQuantize);

void BM_UnetForward(benchmark::State& state) {
  Rng rng(4);
  auto cfg = decoder::DecoderConfig::desk();
  decoder::VisualDecoder dec(cfg, rng);
  const ad::Mat z = random_mat(3, 64 * 64, rng);
  const ad::Mat local = random_mat(8, 64, rng);
  const ad::Mat global = random_mat(1, 64, rng);
  for (auto _ : state) {
    ad::Graph g;
    g.set_inference(true);
    auto eps = dec.unet(g, g.input(z), 100, g.input(local), g.input(global));
    benchmark::DoNotOptimize(g.val(eps));
  }
}
BENCHMARK(BM_UnetForward);

void BM_AdjustedRandIndex(benchmark::State& state) {
  Rng rng(5);
  std::vector<int> a(4096), b(4096);
  for (int i = 0; i < 4096; ++i) {
    a[i] = static_cast<int>(rng.below(8));
    b[i] = static_cast<int>(rng.below(5));
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(eval::adjusted_rand_index(a, b));
  }
}
BENCHMARK(BM_AdjustedRandIndex);

}  // namespace

BENCHMARK_MAIN();
