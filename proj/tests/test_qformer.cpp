#include "doctest.h"

#include <cmath>
#include <limits>

#include "slottok/qformer.hpp"
#include "test_util.hpp"

using namespace slottok;
using namespace slottok::qformer;
using namespace testutil;

namespace {

SlotConfig tiny_cfg(int n_slots, int dim, int d_input, int vocab, int heads = 2) {
  SlotConfig c;
  c.n_slots = n_slots;
  c.dim = dim;
  c.d_input = d_input;
  c.gru_iters = 2;
  c.num_layers = 2;
  c.heads = heads;
  c.ff_hidden = 4 * dim;
  c.text_vocab = vocab;
  return c;
}

// scalar mirror of the layer norm used in the model
Mat norm_rows(const Mat& x, double eps = 1e-6) {
  Mat y = x;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    y.row(r) = (x.row(r).array() - mu) / std::sqrt(var + eps);
  }
  return y;
}

}  // namespace

TEST_CASE("attention maps are column-stochastic over slots") {
  Rng rng(1);
  auto cfg = tiny_cfg(5, 16, 12, 27);
  SlotQFormer qf(cfg, rng);
  for (int trial = 0; trial < 20; ++trial) {
    SlotEmbeddings out;
    Rng noise(trial);
    ad::Graph g;
    qf.encode_slots_g(g, g.input(random_mat(10, 12, rng)), Mode::train, noise, &out);
    REQUIRE(out.attention_maps.size() ==
            static_cast<std::size_t>(cfg.num_layers * cfg.gru_iters));
    for (const auto& a : out.attention_maps) {
      Eigen::RowVectorXd sums = a.colwise().sum();
      for (Eigen::Index j = 0; j < sums.size(); ++j)
        CHECK(std::abs(sums(j) - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("single slot degenerates to mean pooling of projected features") {
  Rng rng(2);
  auto cfg = tiny_cfg(1, 8, 8, 27);
  SlotQFormer qf(cfg, rng);
  const int M = 6;
  Mat features = random_mat(M, 8, rng);
  ad::Graph g;
  auto res = qf.slot_attention_step(g, 0, g.param(qf.slot_mu), g.input(features));
  // attention weights: a single slot takes every feature column
  CHECK(g.val(res.attn).isApprox(Mat::Ones(1, M), 1e-12));
  // update row equals the mean of v(LN(features)), independent of q and k
  auto& layer = qf.slot_layers[0];
  Mat ve = norm_rows(features) * layer.v.W.value;
  ve.rowwise() += layer.v.b.value.row(0);
  Mat mean_v = ve.colwise().mean();
  CHECK((g.val(res.update) - mean_v).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("hand-computed two-slot three-feature oracle (64-bit)") {
  Rng rng(3);
  const int D = 3;
  auto cfg = tiny_cfg(2, D, D, 27, /*heads=*/1);
  SlotQFormer qf(cfg, rng);
  auto& L = qf.slot_layers[0];
  L.q.W.value = Mat::Identity(D, D);
  L.k.W.value = Mat::Identity(D, D);
  L.v.W.value = Mat::Identity(D, D);
  L.q.b.value.setZero();
  L.k.b.value.setZero();
  L.v.b.value.setZero();

  Mat S(2, D), E(3, D);
  S << 0.3, -1.1, 0.7, 1.4, 0.2, -0.5;
  E << 0.9, 0.1, -0.3, -0.7, 1.2, 0.4, 0.2, -0.6, 1.0;

  ad::Graph g;
  auto res = qf.slot_attention_step(g, 0, g.input(S), g.input(E));

  // direct scalar evaluation of the attention chain
  const Mat q = norm_rows(S);
  const Mat k = norm_rows(E);
  const Mat v = k;  // identity projection of the same normalized features
  Mat logits = q * k.transpose() / std::sqrt(double(D));
  Mat A(2, 3);
  for (int j = 0; j < 3; ++j) {
    double mx = std::max(logits(0, j), logits(1, j));
    const double e0 = std::exp(logits(0, j) - mx), e1 = std::exp(logits(1, j) - mx);
    A(0, j) = e0 / (e0 + e1);
    A(1, j) = e1 / (e0 + e1);
  }
  Mat W(2, 3);
  for (int i = 0; i < 2; ++i) {
    double s = 0.0;
    for (int j = 0; j < 3; ++j) s += A(i, j) + 1e-8;
    for (int j = 0; j < 3; ++j) W(i, j) = (A(i, j) + 1e-8) / s;
  }
  Mat U = W * v;

  CHECK((g.val(res.attn) - A).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((g.val(res.update) - U).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("paper_literal normalization keeps the column-softmax weights") {
  Rng rng(4);
  auto cfg = tiny_cfg(3, 8, 8, 27);
  cfg.normalization = AttnNormalization::paper_literal;
  SlotQFormer qf(cfg, rng);
  Mat E = random_mat(5, 8, rng);
  ad::Graph g;
  auto res = qf.slot_attention_step(g, 0, g.param(qf.slot_mu), g.input(E));
  // with W == A, the update is A * v(E)
  auto& L = qf.slot_layers[0];
  Mat ve = norm_rows(E) * L.v.W.value;
  ve.rowwise() += L.v.b.value.row(0);
  CHECK((g.val(res.update) - g.val(res.attn) * ve).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("non-finite logits raise an error naming layer and iteration") {
  Rng rng(5);
  auto cfg = tiny_cfg(2, 8, 8, 27);
  SlotQFormer qf(cfg, rng);
  Mat bad = Mat::Constant(4, 8, std::numeric_limits<double>::infinity());
  Rng noise(0);
  try {
    ad::Graph g;
    qf.encode_slots_g(g, g.input(bad), Mode::eval, noise);
    FAIL("expected non-finite logits error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("layer") != std::string::npos);
    CHECK(msg.find("iteration") != std::string::npos);
  }
}

TEST_CASE("init_slots: eval determinism, zero scale, and noise variance") {
  Rng rng(6);
  auto cfg = tiny_cfg(2, 16, 16, 27);
  SlotQFormer qf(cfg, rng);
  {
    ad::Graph g;
    Rng n1(11), n2(22);
    Mat a = g.val(qf.init_slots(g, Mode::eval, n1));
    Mat b = g.val(qf.init_slots(g, Mode::eval, n2));
    CHECK(a == b);
    CHECK(a == qf.slot_mu.value);
  }
  {
    auto cfg0 = cfg;
    cfg0.noise_scale = 0.0;
    Rng r2(7);
    SlotQFormer qf0(cfg0, r2);
    ad::Graph g;
    Rng noise(3);
    CHECK(g.val(qf0.init_slots(g, Mode::train, noise)) == qf0.slot_mu.value);
  }
  {
    // Monte-Carlo variance against the learned scale
    qf.slot_log_sigma.value.setConstant(std::log(0.8));
    Rng noise(99);
    const int draws = 10000;
    Mat acc = Mat::Zero(cfg.n_slots, cfg.dim);
    Mat acc2 = Mat::Zero(cfg.n_slots, cfg.dim);
    for (int i = 0; i < draws; ++i) {
      ad::Graph g;
      Mat s = g.val(qf.init_slots(g, Mode::train, noise)) - qf.slot_mu.value;
      acc += s;
      acc2 += s.cwiseProduct(s);
    }
    Mat var = acc2 / draws - (acc / draws).cwiseProduct(acc / draws);
    const double want = 0.8 * 0.8 * cfg.noise_scale * cfg.noise_scale;
    for (Eigen::Index i = 0; i < var.size(); ++i)
      CHECK(std::abs(var.data()[i] - want) / want < 0.05);
  }
}

TEST_CASE("encode_slots shapes and eval purity") {
  Rng rng(8);
  auto vocab_size = 27;
  auto cfg = SlotConfig::desk(vocab_size);
  SlotQFormer qf(cfg, rng);
  Mat features = random_mat(64, 64, rng);
  Rng n1(0), n2(0);
  auto a = qf.encode_slots(features, Mode::eval, n1);
  auto b = qf.encode_slots(features, Mode::eval, n2);
  CHECK(a.slots.rows() == 8);
  CHECK(a.slots.cols() == 64);
  CHECK(a.slots == b.slots);
}

TEST_CASE("paper preset produces 32 x 768 slot embeddings") {
  Rng rng(9);
  auto cfg = SlotConfig::paper(27);
  cfg.num_layers = 1;  // one layer is enough to check the preset shape
  SlotQFormer qf(cfg, rng);
  Mat features = random_mat(49, cfg.d_input, rng);
  Rng noise(0);
  auto out = qf.encode_slots(features, Mode::eval, noise);
  CHECK(out.slots.rows() == 32);
  CHECK(out.slots.cols() == 768);
}

TEST_CASE("text branch is causal under perturbation") {
  Rng rng(10);
  auto cfg = tiny_cfg(3, 16, 16, 27);
  SlotQFormer qf(cfg, rng);
  std::vector<int> ids = {1, 5, 7, 9, 2};
  auto t1 = qf.encode_text(ids);
  std::vector<int> ids2 = ids;
  ids2[3] = 12;  // change a later token
  auto t2 = qf.encode_text(ids2);
  for (int i = 0; i < 3; ++i)
    for (int d = 0; d < 16; ++d)
      CHECK(t1.per_token(i, d) == t2.per_token(i, d));
}

TEST_CASE("single-token input: final equals per_token[0]") {
  Rng rng(11);
  SlotQFormer qf(tiny_cfg(3, 16, 16, 27), rng);
  auto t = qf.encode_text({4});
  CHECK(t.final_emb == t.per_token);
}

TEST_CASE("empty text sequence raises") {
  Rng rng(12);
  SlotQFormer qf(tiny_cfg(3, 16, 16, 27), rng);
  CHECK_THROWS(qf.encode_text({}));
}

TEST_CASE("self-attention and feed-forward tensors are shared between branches") {
  Rng rng(13);
  auto cfg = tiny_cfg(3, 16, 16, 27);
  SlotQFormer qf(cfg, rng);
  Mat features = random_mat(9, 16, rng);
  std::vector<int> ids = {1, 4, 2};
  Rng noise(0);
  const Mat slots_before = qf.encode_slots(features, Mode::eval, noise).slots;
  const Mat text_before = qf.encode_text(ids).final_emb;
  // mutate one shared feed-forward weight
  qf.shared_blocks[0].ff.in.W.value(0, 0) += 0.75;
  Rng noise2(0);
  const Mat slots_after = qf.encode_slots(features, Mode::eval, noise2).slots;
  const Mat text_after = qf.encode_text(ids).final_emb;
  CHECK_FALSE(slots_before.isApprox(slots_after));
  CHECK_FALSE(text_before.isApprox(text_after));
}

TEST_CASE("slot_attention_step gradient (incl GRU) vs finite differences") {
  Rng rng(14);
  auto cfg = tiny_cfg(3, 8, 8, 27);
  SlotQFormer qf(cfg, rng);
  ad::Tensor slots("slots", random_mat(3, 8, rng));
  ad::Tensor features("features", random_mat(8, 8, rng));
  std::vector<ad::Tensor*> params = {&slots, &features};
  qf.slot_layers[0].collect(params);
  auto build = [&](ad::Graph& g) {
    auto res = qf.slot_attention_step(g, 0, g.param(slots), g.param(features));
    return g.add(g.mean_all(g.square(res.slots)), g.mean_all(g.square(res.attn)));
  };
  CHECK(max_rel_grad_error(build, params) < 1e-3);
}

TEST_CASE("cross-attention ablation replaces competition with per-slot softmax") {
  Rng rng(15);
  auto cfg = tiny_cfg(4, 16, 16, 27);
  cfg.use_slot_attention = false;
  SlotQFormer qf(cfg, rng);
  Mat features = random_mat(9, 16, rng);
  SlotEmbeddings out;
  Rng noise(0);
  ad::Graph g;
  qf.encode_slots_g(g, g.input(features), Mode::eval, noise, &out);
  REQUIRE(out.attention_maps.size() == static_cast<std::size_t>(cfg.num_layers));
  for (const auto& a : out.attention_maps) {
    // rows (slots) are normalized over features in the ablation
    Eigen::VectorXd sums = a.rowwise().sum();
    for (Eigen::Index i = 0; i < sums.size(); ++i)
      CHECK(sums(i) == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(out.slots.rows() == 4);
}
