#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "slottok/image.hpp"
#include "slottok/rng.hpp"

namespace slottok::synth {

enum class ShapeKind { circle, square, triangle };

std::string shape_name(ShapeKind k);
ShapeKind shape_from_name(const std::string& s);

struct SceneSpec {
  std::uint64_t seed = 0;
  int num_objects = 1;          // 1..4
  int canvas_h = 64;
  int canvas_w = 64;
  std::vector<std::string> palette;  // object color names
  std::vector<ShapeKind> shapes;     // allowed shape kinds
  std::string background = "gray";
  // Object half-extent range as a fraction of the canvas side.
  double size_min_frac = 0.11;
  double size_max_frac = 0.20;

  static SceneSpec defaults(std::uint64_t seed, int num_objects);
  void validate() const;
};

struct PlacedObject {
  std::string color;
  ShapeKind kind = ShapeKind::circle;
  double cx = 0.0, cy = 0.0;   // center, pixel coordinates
  double half = 0.0;           // half-extent (circle radius / half side)
  bool covers(double px, double py) const;
};

struct SceneSample {
  Image image;
  std::vector<int> caption_ids;
  std::vector<int> mask;   // h*w entries in {0..num_objects}, 0 = background
  SceneSpec spec;
};

struct PlacementError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Vocabulary {
 public:
  static Vocabulary standard();

  int id(const std::string& token) const;          // throws on unknown token
  const std::string& token(int id) const;          // throws on bad id
  bool contains(const std::string& token) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  int pad_id() const { return pad_; }
  int bos_id() const { return bos_; }
  int eos_id() const { return eos_; }

  std::vector<int> encode(const std::vector<std::string>& words) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;
  const std::vector<std::string>& word_list() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
  int pad_ = 0, bos_ = 1, eos_ = 2;
};

// Layout derived deterministically from spec.seed; shared by rendering and
// caption construction.
std::vector<PlacedObject> derive_objects(const SceneSpec& spec);

SceneSample generate_scene(const SceneSpec& spec, const Vocabulary& vocab);

std::vector<std::string> caption_words(const SceneSpec& spec);
std::vector<int> build_caption(const SceneSpec& spec, const Vocabulary& vocab);

// Spatial relation between the first two derived objects ("left", "right",
// "above", "below"); empty for single-object scenes.
std::string relation_word(const std::vector<PlacedObject>& objects);

struct ParsedCaption {
  std::vector<std::pair<std::string, std::string>> objects;  // (color, shape)
  std::string relation;  // empty when absent
};

// Grammar round trip used by tests and dataset validation.
ParsedCaption parse_caption(const std::vector<std::string>& words);

std::pair<std::vector<SceneSpec>, std::vector<SceneSpec>> make_splits(
    int n_train, int n_val, std::uint64_t seed);

// --- on-disk dataset ---------------------------------------------------
// DIR/manifest.json lists every sample; each sample is one PNG plus one JSON
// sidecar carrying caption ids, the mask and the generating spec.

void save_dataset(const std::string& dir, const std::vector<SceneSample>& samples,
                  const Vocabulary& vocab);
std::vector<SceneSample> load_dataset(const std::string& dir, Vocabulary* vocab_out = nullptr);

constexpr int kMaxCaptionLen = 20;

}  // namespace slottok::synth
