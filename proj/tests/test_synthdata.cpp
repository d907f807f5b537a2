#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "slottok/synthdata.hpp"
#include "test_util.hpp"

using namespace slottok;
using namespace slottok::synth;

namespace {
std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}
}  // namespace

TEST_CASE("single red circle renders with exactly two mask ids") {
  auto vocab = Vocabulary::standard();
  SceneSpec spec = SceneSpec::defaults(0, 1);
  spec.palette = {"red"};
  spec.shapes = {ShapeKind::circle};
  auto s = generate_scene(spec, vocab);
  std::set<int> ids(s.mask.begin(), s.mask.end());
  CHECK(ids == std::set<int>{0, 1});
  // mask pixels carry the object's color, background pixels the background's
  bool saw_red = false;
  for (int y = 0; y < s.image.h; ++y)
    for (int x = 0; x < s.image.w; ++x) {
      if (s.mask[static_cast<std::size_t>(y) * s.image.w + x] == 1) {
        CHECK(s.image.at(0, y, x) > 0.5);
        saw_red = true;
      }
    }
  CHECK(saw_red);
}

TEST_CASE("generation is a pure function of the spec (byte-identical)") {
  auto vocab = Vocabulary::standard();
  SceneSpec spec = SceneSpec::defaults(123, 3);
  auto a = generate_scene(spec, vocab);
  auto b = generate_scene(spec, vocab);
  CHECK(a.image.rgb == b.image.rgb);
  CHECK(a.mask == b.mask);
  CHECK(a.caption_ids == b.caption_ids);

  const std::string d = "/tmp/slottok_det";
  std::filesystem::create_directories(d);
  write_png(d + "/a.png", a.image);
  write_png(d + "/b.png", b.image);
  CHECK(slurp(d + "/a.png") == slurp(d + "/b.png"));
}

TEST_CASE("masks partition the canvas and match rendered pixels") {
  auto vocab = Vocabulary::standard();
  for (std::uint64_t seed : {5u, 6u, 7u, 8u}) {
    SceneSpec spec = SceneSpec::defaults(seed, 1 + static_cast<int>(seed % 4));
    auto s = generate_scene(spec, vocab);
    CHECK(s.mask.size() == static_cast<std::size_t>(s.image.h) * s.image.w);
    for (int id : s.mask) {
      CHECK(id >= 0);
      CHECK(id <= spec.num_objects);
    }
  }
}

TEST_CASE("caption describes every object and the relation matches geometry") {
  auto vocab = Vocabulary::standard();
  SceneSpec spec = SceneSpec::defaults(7, 2);
  auto ids = build_caption(spec, vocab);
  CHECK(ids.front() == vocab.bos_id());
  CHECK(ids.back() == vocab.eos_id());
  CHECK(static_cast<int>(ids.size()) <= kMaxCaptionLen);

  const auto words = vocab.decode(std::vector<int>(ids.begin() + 1, ids.end() - 1));
  const auto parsed = parse_caption(words);
  const auto objects = derive_objects(spec);
  REQUIRE(parsed.objects.size() == objects.size());
  // multiset of (color, shape) pairs must round-trip
  std::multiset<std::pair<std::string, std::string>> want, got;
  for (const auto& o : objects) want.insert({o.color, shape_name(o.kind)});
  for (const auto& p : parsed.objects) got.insert(p);
  CHECK(want == got);
  CHECK(parsed.relation == relation_word(objects));
}

TEST_CASE("caption encode/decode round trip") {
  auto vocab = Vocabulary::standard();
  SceneSpec spec = SceneSpec::defaults(21, 4);
  const auto words = caption_words(spec);
  CHECK(vocab.decode(vocab.encode(words)) == words);
}

TEST_CASE("attribute grammar sweep has no out-of-vocabulary failures") {
  auto vocab = Vocabulary::standard();
  int parsed_ok = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    SceneSpec spec = SceneSpec::defaults(seed, 1 + static_cast<int>(seed % 4));
    const auto ids = build_caption(spec, vocab);  // throws on any OOV token
    const auto words = vocab.decode(std::vector<int>(ids.begin() + 1, ids.end() - 1));
    const auto parsed = parse_caption(words);
    CHECK(parsed.objects.size() == static_cast<std::size_t>(spec.num_objects));
    ++parsed_ok;
  }
  CHECK(parsed_ok == 10000);
}

TEST_CASE("out-of-vocabulary attribute raises an error naming the token") {
  auto vocab = Vocabulary::standard();
  SceneSpec spec = SceneSpec::defaults(3, 1);
  spec.palette = {"white"};  // valid color, deliberately not a caption word
  try {
    build_caption(spec, vocab);
    FAIL("expected an out-of-vocabulary error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("white") != std::string::npos);
  }
}

TEST_CASE("overcrowded canvas fails placement explicitly") {
  auto vocab = Vocabulary::standard();
  SceneSpec spec = SceneSpec::defaults(11, 4);
  spec.size_min_frac = 0.45;
  spec.size_max_frac = 0.45;
  CHECK_THROWS_AS(generate_scene(spec, vocab), PlacementError);
}

TEST_CASE("object overlap stays within 10% of either area") {
  for (std::uint64_t seed = 40; seed < 60; ++seed) {
    SceneSpec spec = SceneSpec::defaults(seed, 4);
    const auto objects = derive_objects(spec);
    // recompute coverage per object and check pairwise
    const int h = spec.canvas_h, w = spec.canvas_w;
    std::vector<std::set<int>> cov(objects.size());
    for (std::size_t i = 0; i < objects.size(); ++i)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (objects[i].covers(x + 0.5, y + 0.5)) cov[i].insert(y * w + x);
    for (std::size_t i = 0; i < objects.size(); ++i)
      for (std::size_t j = i + 1; j < objects.size(); ++j) {
        std::size_t inter = 0;
        for (int p : cov[i]) inter += cov[j].count(p);
        CHECK(inter <= 0.10 * std::min(cov[i].size(), cov[j].size()) + 1e-9);
      }
  }
}

TEST_CASE("make_splits is reproducible, disjoint, and counts match") {
  auto [train1, val1] = make_splits(64, 16, 1);
  auto [train2, val2] = make_splits(64, 16, 1);
  CHECK(train1.size() == 64);
  CHECK(val1.size() == 16);
  std::set<std::uint64_t> seeds;
  for (const auto& s : train1) seeds.insert(s.seed);
  for (const auto& s : val1) seeds.insert(s.seed);
  CHECK(seeds.size() == 80);  // distinct and disjoint
  for (std::size_t i = 0; i < train1.size(); ++i) {
    CHECK(train1[i].seed == train2[i].seed);
    CHECK(train1[i].num_objects == train2[i].num_objects);
  }
}

TEST_CASE("dataset save/load round trip") {
  auto vocab = Vocabulary::standard();
  std::vector<SceneSample> samples;
  for (std::uint64_t s = 100; s < 104; ++s)
    samples.push_back(generate_scene(SceneSpec::defaults(s, 2), vocab));
  const std::string dir = "/tmp/slottok_ds_test";
  std::filesystem::remove_all(dir);
  save_dataset(dir, samples, vocab);
  Vocabulary v2;
  auto loaded = load_dataset(dir, &v2);
  REQUIRE(loaded.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(loaded[i].caption_ids == samples[i].caption_ids);
    CHECK(loaded[i].mask == samples[i].mask);
    CHECK(loaded[i].spec.seed == samples[i].spec.seed);
    // PNG round trip quantizes to 8 bits
    CHECK((loaded[i].image.rgb - samples[i].image.rgb).cwiseAbs().maxCoeff() < 1.0 / 255.0);
  }
}
