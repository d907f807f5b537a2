#include "doctest.h"

#include <cmath>
#include <functional>

#include <nlohmann/json.hpp>

#include "slottok/evalsuite.hpp"
#include "test_util.hpp"

using namespace slottok;
using namespace slottok::eval;
using namespace testutil;

namespace {

Image const_image(int h, int w, double v) {
  Image im(h, w);
  im.rgb.setConstant(v);
  return im;
}

// Independent ARI route: pair counting over all C(n,2) element pairs.
double pair_counting_ari(const std::vector<int>& a, const std::vector<int>& b) {
  double n11 = 0, n00 = 0, n10 = 0, n01 = 0;
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      if (sa && sb) ++n11;
      else if (!sa && !sb) ++n00;
      else if (sa) ++n10;
      else ++n01;
    }
  const double den = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00);
  if (den == 0.0) return 1.0;
  return 2.0 * (n11 * n00 - n10 * n01) / den;
}

// Enumerates all set partitions of {0..n-1} as restricted growth strings.
void all_partitions(int n, std::vector<std::vector<int>>& out) {
  std::vector<int> labels(static_cast<std::size_t>(n), 0);
  std::function<void(int, int)> rec = [&](int i, int max_used) {
    if (i == n) {
      out.push_back(labels);
      return;
    }
    for (int l = 0; l <= max_used + 1 && l < n; ++l) {
      labels[static_cast<std::size_t>(i)] = l;
      rec(i + 1, std::max(max_used, l));
    }
  };
  rec(0, -1);
}

}  // namespace

TEST_CASE("psnr: cap, closed form, and formula re-evaluation") {
  Image a = const_image(16, 16, 0.5);
  CHECK(psnr(a, a) == kPsnrCap);

  Image b = const_image(16, 16, 0.6);  // MSE = 0.01 exactly
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));

  Rng rng(1);
  Image r1(16, 16), r2(16, 16);
  r1.rgb = (random_mat(3, 256, rng).array() * 0.2 + 0.5).matrix();
  r2.rgb = (random_mat(3, 256, rng).array() * 0.2 + 0.5).matrix();
  double mse = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 256; ++j) {
      const double d = r1.rgb(i, j) - r2.rgb(i, j);
      mse += d * d;
    }
  mse /= 3 * 256;
  CHECK(psnr(r1, r2) == doctest::Approx(10.0 * std::log10(1.0 / mse)).epsilon(1e-12));

  Image small(8, 8);
  CHECK_THROWS(psnr(a, small));
}

TEST_CASE("ssim: identity, symmetry, constant-offset closed form") {
  Rng rng(2);
  Image a(32, 32), b(32, 32);
  a.rgb = (random_mat(3, 1024, rng).array() * 0.2 + 0.5).matrix();
  b.rgb = (random_mat(3, 1024, rng).array() * 0.2 + 0.5).matrix();
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));

  // constant images: variance terms vanish, single-window closed form applies
  Image ca = const_image(32, 32, 0.25);
  Image cb = const_image(32, 32, 0.75);
  const double C1 = 1e-4;
  const double expect = (2.0 * 0.25 * 0.75 + C1) / (0.25 * 0.25 + 0.75 * 0.75 + C1);
  CHECK(ssim(ca, cb) == doctest::Approx(expect).epsilon(1e-9));

  Image tiny_img(8, 8);
  CHECK_THROWS(ssim(tiny_img, tiny_img));
}

TEST_CASE("pixel_l1 mirrors the mean absolute difference") {
  Image a = const_image(16, 16, 0.2);
  Image b = const_image(16, 16, 0.45);
  CHECK(pixel_l1(a, b) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("ari: perfect match, toy oracle, random centering") {
  std::vector<int> gt = {1, 1, 2, 2, 2, 3, 3, 3, 3};
  CHECK(adjusted_rand_index(gt, gt) == doctest::Approx(1.0));

  // 3x3 toy pair against the brute-force contingency formula
  std::vector<int> p1 = {0, 0, 1, 1, 2, 2, 2, 0, 1};
  CHECK(adjusted_rand_index(p1, gt) ==
        doctest::Approx(pair_counting_ari(p1, gt)).epsilon(1e-12));

  // chance-corrected: random labelings average near zero
  Rng rng(3);
  double acc = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> ra(60), rb(60);
    for (int i = 0; i < 60; ++i) {
      ra[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(4));
      rb[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(4));
    }
    acc += adjusted_rand_index(ra, rb);
  }
  CHECK(std::abs(acc / 100.0) < 0.05);
}

TEST_CASE("ari matches pair counting on all partitions of up to 6 elements") {
  for (int n = 2; n <= 6; ++n) {
    std::vector<std::vector<int>> parts;
    all_partitions(n, parts);
    for (const auto& pa : parts)
      for (const auto& pb : parts)
        CHECK(adjusted_rand_index(pa, pb) ==
              doctest::Approx(pair_counting_ari(pa, pb)).epsilon(1e-10));
  }
}

TEST_CASE("foreground ari excludes background and validates input") {
  std::vector<int> gt = {0, 0, 1, 1, 2, 2};
  std::vector<int> pred = {9, 9, 4, 4, 7, 7};
  CHECK(foreground_ari(pred, gt) == doctest::Approx(1.0));
  std::vector<int> no_fg = {0, 0, 0, 0, 0, 0};
  CHECK_THROWS(foreground_ari(pred, no_fg));
}

TEST_CASE("slot mask extraction upsamples and argmaxes") {
  Mat attn(2, 4);  // 2 slots on a 2x2 grid
  attn << 0.9, 0.1, 0.2, 0.8,
          0.1, 0.9, 0.8, 0.2;
  auto labels = slot_masks_from_attention(attn, 2, 2, 8, 8);
  CHECK(labels.size() == 64);
  CHECK(labels[0] == 0);        // top-left corner follows slot 0
  CHECK(labels[7] == 1);        // top-right follows slot 1
  CHECK(labels[8 * 7 + 0] == 1);  // bottom-left follows slot 1
  CHECK(labels[8 * 7 + 7] == 0);
}

TEST_CASE("ablation matrix reports missing checkpoints by name") {
  std::vector<AblationEntry> entries = {{"full", "/tmp/definitely_missing_a.ckpt"},
                                        {"ablated", "/tmp/definitely_missing_b.ckpt"}};
  std::vector<synth::SceneSample> dummy;
  EvalOptions opt;
  try {
    ablation_matrix(entries, dummy, dummy, opt);
    FAIL("expected missing-checkpoint error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("definitely_missing_a") != std::string::npos);
    CHECK(msg.find("definitely_missing_b") != std::string::npos);
  }
}
