#include "slottok/synthdata.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace slottok::synth {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::map<std::string, std::array<double, 3>>& color_table() {
  static const std::map<std::string, std::array<double, 3>> table = {
      {"red", {0.85, 0.15, 0.15}},    {"green", {0.15, 0.75, 0.20}},
      {"blue", {0.15, 0.25, 0.85}},   {"yellow", {0.92, 0.85, 0.15}},
      {"magenta", {0.80, 0.20, 0.78}},{"cyan", {0.15, 0.78, 0.80}},
      {"gray", {0.45, 0.45, 0.47}},   {"black", {0.05, 0.05, 0.05}},
      {"white", {0.95, 0.95, 0.95}},
  };
  return table;
}

std::array<double, 3> color_rgb(const std::string& name) {
  auto it = color_table().find(name);
  if (it == color_table().end())
    throw std::invalid_argument("unknown color: " + name);
  return it->second;
}

// Pixel-center coverage set of an object, as flat indices.
std::vector<int> coverage(const PlacedObject& o, int h, int w) {
  std::vector<int> px;
  const int y0 = std::max(0, static_cast<int>(std::floor(o.cy - o.half - 1)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(o.cy + o.half + 1)));
  const int x0 = std::max(0, static_cast<int>(std::floor(o.cx - o.half - 1)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(o.cx + o.half + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (o.covers(x + 0.5, y + 0.5)) px.push_back(y * w + x);
  return px;
}

int intersection_size(const std::vector<int>& a, const std::vector<int>& b) {
  int n = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) ++ia;
    else if (*ib < *ia) ++ib;
    else { ++n; ++ia; ++ib; }
  }
  return n;
}

}  // namespace

std::string shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  throw std::logic_error("shape_name: bad kind");
}

ShapeKind shape_from_name(const std::string& s) {
  if (s == "circle") return ShapeKind::circle;
  if (s == "square") return ShapeKind::square;
  if (s == "triangle") return ShapeKind::triangle;
  throw std::invalid_argument("unknown shape: " + s);
}

bool PlacedObject::covers(double px, double py) const {
  const double dx = px - cx;
  const double dy = py - cy;
  switch (kind) {
    case ShapeKind::circle:
      return dx * dx + dy * dy <= half * half;
    case ShapeKind::square:
      return std::abs(dx) <= half && std::abs(dy) <= half;
    case ShapeKind::triangle: {
      // Upward triangle: apex at (cx, cy - half), base at cy + half.
      if (dy < -half || dy > half) return false;
      const double t = (dy + half) / (2.0 * half);  // 0 at apex, 1 at base
      return std::abs(dx) <= t * half;
    }
  }
  return false;
}

SceneSpec SceneSpec::defaults(std::uint64_t seed, int num_objects) {
  SceneSpec s;
  s.seed = seed;
  s.num_objects = num_objects;
  s.palette = {"red", "green", "blue", "yellow", "magenta", "cyan"};
  s.shapes = {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
  return s;
}

void SceneSpec::validate() const {
  if (num_objects < 1 || num_objects > 4)
    throw std::invalid_argument("SceneSpec: num_objects must be in 1..4");
  if (canvas_h < 16 || canvas_w < 16)
    throw std::invalid_argument("SceneSpec: canvas too small");
  if (palette.empty() || shapes.empty())
    throw std::invalid_argument("SceneSpec: palette/shapes must be non-empty");
  if (!(size_min_frac > 0.0 && size_min_frac <= size_max_frac && size_max_frac < 0.5))
    throw std::invalid_argument("SceneSpec: bad object size fractions");
  for (const auto& c : palette) color_rgb(c);
  color_rgb(background);
}

std::vector<PlacedObject> derive_objects(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed, /*stream=*/0xa11ce);
  const int h = spec.canvas_h, w = spec.canvas_w;
  const double min_half = spec.size_min_frac * std::min(h, w);
  const double max_half = spec.size_max_frac * std::min(h, w);

  for (int attempt = 0; attempt < 50; ++attempt) {
    std::vector<PlacedObject> objects;
    std::vector<std::vector<int>> covers;
    bool ok = true;
    for (int i = 0; i < spec.num_objects && ok; ++i) {
      bool placed = false;
      for (int trial = 0; trial < 100; ++trial) {
        PlacedObject o;
        o.color = spec.palette[rng.below(spec.palette.size())];
        o.kind = spec.shapes[rng.below(spec.shapes.size())];
        o.half = rng.uniform(min_half, max_half);
        o.cx = rng.uniform(o.half + 1.0, w - o.half - 1.0);
        o.cy = rng.uniform(o.half + 1.0, h - o.half - 1.0);
        auto cov = coverage(o, h, w);
        bool overlaps = false;
        for (const auto& prev : covers) {
          const int inter = intersection_size(prev, cov);
          const int limit = static_cast<int>(
              0.10 * std::min(prev.size(), cov.size()));
          if (inter > limit) { overlaps = true; break; }
        }
        if (overlaps) continue;
        objects.push_back(o);
        covers.push_back(std::move(cov));
        placed = true;
        break;
      }
      if (!placed) ok = false;
    }
    if (ok) return objects;
  }
  throw PlacementError("placement failed: canvas too crowded for spec seed " +
                       std::to_string(spec.seed));
}

std::string relation_word(const std::vector<PlacedObject>& objects) {
  if (objects.size() < 2) return "";
  const double dx = objects[0].cx - objects[1].cx;
  const double dy = objects[0].cy - objects[1].cy;
  if (std::abs(dx) >= std::abs(dy)) return dx < 0 ? "left" : "right";
  return dy < 0 ? "above" : "below";
}

std::vector<std::string> caption_words(const SceneSpec& spec) {
  const auto objects = derive_objects(spec);
  std::vector<std::string> words;
  auto push_object = [&](const PlacedObject& o) {
    words.push_back("a");
    words.push_back(o.color);
    words.push_back(shape_name(o.kind));
  };
  push_object(objects[0]);
  if (objects.size() >= 2) {
    words.push_back(relation_word(objects));
    words.push_back("of");
    push_object(objects[1]);
    for (std::size_t i = 2; i < objects.size(); ++i) {
      words.push_back("and");
      push_object(objects[i]);
    }
  }
  return words;
}

std::vector<int> build_caption(const SceneSpec& spec, const Vocabulary& vocab) {
  const auto words = caption_words(spec);
  std::vector<int> ids;
  ids.push_back(vocab.bos_id());
  for (const auto& wd : words) {
    if (!vocab.contains(wd))
      throw std::invalid_argument("build_caption: token not in vocabulary: " + wd);
    ids.push_back(vocab.id(wd));
  }
  ids.push_back(vocab.eos_id());
  if (static_cast<int>(ids.size()) > kMaxCaptionLen)
    throw std::logic_error("build_caption: caption exceeds max length");
  return ids;
}

ParsedCaption parse_caption(const std::vector<std::string>& words) {
  ParsedCaption out;
  std::size_t i = 0;
  auto expect_object = [&]() {
    if (i >= words.size() || words[i] != "a")
      throw std::invalid_argument("parse_caption: expected 'a' at position " +
                                  std::to_string(i));
    if (i + 3 > words.size())
      throw std::invalid_argument("parse_caption: truncated object phrase");
    const std::string& color = words[i + 1];
    const std::string& shape = words[i + 2];
    color_rgb(color);
    shape_from_name(shape);
    out.objects.emplace_back(color, shape);
    i += 3;
  };
  expect_object();
  if (i < words.size()) {
    const std::string rel = words[i];
    if (rel != "left" && rel != "right" && rel != "above" && rel != "below")
      throw std::invalid_argument("parse_caption: bad relation word: " + rel);
    if (i + 1 >= words.size() || words[i + 1] != "of")
      throw std::invalid_argument("parse_caption: expected 'of'");
    out.relation = rel;
    i += 2;
    expect_object();
    while (i < words.size()) {
      if (words[i] != "and")
        throw std::invalid_argument("parse_caption: expected 'and'");
      ++i;
      expect_object();
    }
  }
  return out;
}

SceneSample generate_scene(const SceneSpec& spec, const Vocabulary& vocab) {
  const auto objects = derive_objects(spec);
  SceneSample s;
  s.spec = spec;
  s.image = Image(spec.canvas_h, spec.canvas_w);
  s.mask.assign(static_cast<std::size_t>(spec.canvas_h) * spec.canvas_w, 0);

  const auto bg = color_rgb(spec.background);
  for (int c = 0; c < 3; ++c) s.image.rgb.row(c).setConstant(bg[c]);

  // Later objects draw on top; mask and pixels use the same coverage rule.
  for (std::size_t oi = 0; oi < objects.size(); ++oi) {
    const auto& o = objects[oi];
    const auto rgb = color_rgb(o.color);
    for (int y = 0; y < spec.canvas_h; ++y)
      for (int x = 0; x < spec.canvas_w; ++x)
        if (o.covers(x + 0.5, y + 0.5)) {
          for (int c = 0; c < 3; ++c) s.image.at(c, y, x) = rgb[c];
          s.mask[static_cast<std::size_t>(y) * spec.canvas_w + x] =
              static_cast<int>(oi) + 1;
        }
  }
  s.caption_ids = build_caption(spec, vocab);
  return s;
}

Vocabulary Vocabulary::standard() {
  Vocabulary v;
  v.tokens_ = {"<pad>", "<bos>", "<eos>",
               "a", "and", "of", "left", "right", "above", "below",
               "red", "green", "blue", "yellow", "magenta", "cyan",
               "circle", "square", "triangle",
               "USER:", "ASSISTANT:", "please", "generate", "an", "image",
               "describe", "the"};
  for (std::size_t i = 0; i < v.tokens_.size(); ++i)
    v.index_[v.tokens_[i]] = static_cast<int>(i);
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end())
    throw std::invalid_argument("vocabulary: unknown token: " + token);
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size())
    throw std::out_of_range("vocabulary: bad id " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(const std::string& token) const {
  return index_.count(token) != 0;
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& words) const {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (int i : ids) words.push_back(token(i));
  return words;
}

std::pair<std::vector<SceneSpec>, std::vector<SceneSpec>> make_splits(
    int n_train, int n_val, std::uint64_t seed) {
  if (n_train <= 0 || n_val <= 0)
    throw std::invalid_argument("make_splits: counts must be positive");
  Rng rng(seed, /*stream=*/0x511375);
  auto draw = [&](std::uint64_t spec_seed) {
    return SceneSpec::defaults(spec_seed, rng.range_int(1, 4));
  };
  std::vector<SceneSpec> train, val;
  const std::uint64_t base = (seed << 20);
  for (int i = 0; i < n_train; ++i) train.push_back(draw(base + static_cast<std::uint64_t>(i)));
  for (int j = 0; j < n_val; ++j)
    val.push_back(draw(base + static_cast<std::uint64_t>(n_train + j)));
  return {train, val};
}

namespace {

json spec_to_json(const SceneSpec& s) {
  std::vector<std::string> shape_names;
  for (auto k : s.shapes) shape_names.push_back(shape_name(k));
  return json{{"seed", s.seed},         {"num_objects", s.num_objects},
              {"canvas_h", s.canvas_h}, {"canvas_w", s.canvas_w},
              {"palette", s.palette},   {"shapes", shape_names},
              {"background", s.background},
              {"size_min_frac", s.size_min_frac},
              {"size_max_frac", s.size_max_frac}};
}

SceneSpec spec_from_json(const json& j) {
  SceneSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.num_objects = j.at("num_objects").get<int>();
  s.canvas_h = j.at("canvas_h").get<int>();
  s.canvas_w = j.at("canvas_w").get<int>();
  s.palette = j.at("palette").get<std::vector<std::string>>();
  for (const auto& n : j.at("shapes"))
    s.shapes.push_back(shape_from_name(n.get<std::string>()));
  s.background = j.at("background").get<std::string>();
  s.size_min_frac = j.value("size_min_frac", s.size_min_frac);
  s.size_max_frac = j.value("size_max_frac", s.size_max_frac);
  return s;
}

}  // namespace

void save_dataset(const std::string& dir, const std::vector<SceneSample>& samples,
                  const Vocabulary& vocab) {
  fs::create_directories(dir);
  json manifest;
  manifest["version"] = 1;
  manifest["vocab"] = vocab.word_list();
  json items = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05zu", i);
    const std::string png = std::string(name) + ".png";
    const std::string sidecar = std::string(name) + ".json";
    write_png(dir + "/" + png, samples[i].image);
    json rec;
    rec["caption_ids"] = samples[i].caption_ids;
    rec["caption_text"] = caption_words(samples[i].spec);
    rec["mask"] = samples[i].mask;
    rec["spec"] = spec_to_json(samples[i].spec);
    std::ofstream sf(dir + "/" + sidecar);
    sf << rec.dump(2) << "\n";
    items.push_back({{"id", i}, {"image", png}, {"sidecar", sidecar}});
  }
  manifest["items"] = std::move(items);
  std::ofstream mf(dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";
  if (!mf) throw std::runtime_error("save_dataset: cannot write manifest");
}

std::vector<SceneSample> load_dataset(const std::string& dir, Vocabulary* vocab_out) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw std::runtime_error("load_dataset: no manifest in " + dir);
  json manifest = json::parse(mf);
  if (vocab_out) {
    *vocab_out = Vocabulary::standard();
    if (manifest.at("vocab").get<std::vector<std::string>>() != vocab_out->word_list())
      throw std::runtime_error("load_dataset: vocabulary mismatch");
  }
  std::vector<SceneSample> out;
  for (const auto& item : manifest.at("items")) {
    SceneSample s;
    s.image = read_png(dir + "/" + item.at("image").get<std::string>());
    std::ifstream sf(dir + "/" + item.at("sidecar").get<std::string>());
    if (!sf) throw std::runtime_error("load_dataset: missing sidecar");
    json rec = json::parse(sf);
    s.caption_ids = rec.at("caption_ids").get<std::vector<int>>();
    s.mask = rec.at("mask").get<std::vector<int>>();
    s.spec = spec_from_json(rec.at("spec"));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace slottok::synth
