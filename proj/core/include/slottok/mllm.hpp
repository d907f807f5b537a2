#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "slottok/nn.hpp"
#include "slottok/quantizer.hpp"
#include "slottok/synthdata.hpp"

namespace slottok::mllm {

using ad::Graph;
using ad::Mat;
using ad::Tensor;
using ad::Var;

enum class SegmentTag { text, visual, special };

struct VocabLayout {
  int text_size = 0;
  int visual_offset = 0;
  int visual_size = 0;
  int boi_id = 0;
  int eoi_id = 0;

  int total() const { return text_size + visual_size + 2; }
  SegmentTag classify(int id) const;
  void validate() const;
};

// Text ids keep their values; the visual block sits directly above them,
// then <boi> and <eoi>.
VocabLayout build_vocab(int text_vocab_size, int codebook_size);

struct MixedSequence {
  std::vector<int> ids;
  std::vector<bool> loss_mask;          // true = this token is a training target
  std::vector<SegmentTag> segment_tags;

  void append(int id, bool mask, SegmentTag tag);
  void extend(const MixedSequence& other);
  std::size_t size() const { return ids.size(); }
};

enum class FlattenOrder { slot_major, depth_major };

// <boi>, flattened codes, <eoi>; inverse is exact and validates structure.
std::vector<int> image_to_lm_tokens(const quantizer::SlotTokens& tokens,
                                    const VocabLayout& layout,
                                    FlattenOrder order = FlattenOrder::slot_major);
quantizer::SlotTokens lm_tokens_to_image(const std::vector<int>& span,
                                         const VocabLayout& layout, int n, int k,
                                         FlattenOrder order = FlattenOrder::slot_major);

enum class Direction { t2i, i2t };

MixedSequence assemble_pretrain(const std::vector<int>& image_span,
                                const std::vector<int>& caption_ids,
                                const VocabLayout& layout, Direction dir);

// Two pairs concatenated with text-only loss, for the interleaved masking rule.
MixedSequence assemble_interleaved(const std::vector<int>& image_span_a,
                                   const std::vector<int>& caption_a,
                                   const std::vector<int>& image_span_b,
                                   const std::vector<int>& caption_b,
                                   const VocabLayout& layout);

// "USER: <instruction> ASSISTANT: <answer>", loss on the answer only.
MixedSequence assemble_sft(const MixedSequence& instruction, const MixedSequence& answer,
                           const VocabLayout& layout, const synth::Vocabulary& vocab);

// Structural check: every <boi> matched by <eoi> with exactly n*k visual ids
// between, no stray special/visual ids elsewhere.
bool spans_well_formed(const std::vector<int>& ids, const VocabLayout& layout, int n, int k);

struct LoraSpec {
  int rank = 8;
  std::vector<std::string> target;  // projection names among {"q","k","v","o"}
  double scaling = 1.0;

  void validate() const;
};

struct LoraAdapter {
  Tensor A;  // in x r
  Tensor B;  // r x out  (zero-initialized)
  double scale = 1.0;
};

struct LoraLinear {
  nn::Linear base;
  std::optional<LoraAdapter> lora;
  bool merged = false;

  LoraLinear() = default;
  LoraLinear(const std::string& name, int in, int out, Rng& rng);
  Var operator()(Graph& g, Var x);
  void attach(const std::string& name, int rank, double scale, Rng& rng);
  void merge();
  void unmerge();
  void collect(std::vector<Tensor*>& out);
  void collect_lora(std::vector<Tensor*>& out);
};

struct LmConfig {
  int vocab_total = 0;
  int layers = 4;
  int width = 256;
  int heads = 8;
  int ff_hidden = 1024;
  int context = 512;

  nlohmann::json to_json() const;
  static LmConfig from_json(const nlohmann::json& j);
};

struct LmBlock {
  nn::LayerNorm ln1, ln2;
  LoraLinear q, k, v, o;
  nn::Linear ff_in, ff_out;
  int heads = 1;

  LmBlock() = default;
  LmBlock(const std::string& name, int dim, int heads, int ff_hidden, Rng& rng);
  Var operator()(Graph& g, Var x, const Mat* mask);
  void collect(std::vector<Tensor*>& out);
};

struct GenerateConfig {
  int max_new = 64;
  double temperature = 0.0;   // 0 = greedy
  std::uint64_t seed = 0;
  int n_slots = 8;
  int depth = 4;
};

// Decoder-only LM over the extended multimodal vocabulary.
struct LanguageModel {
  LmConfig cfg;
  VocabLayout layout;
  Tensor tok_emb, pos_emb;
  std::vector<LmBlock> blocks;
  nn::LayerNorm ln_f;
  nn::Linear head;

  LanguageModel() = default;
  LanguageModel(const LmConfig& c, const VocabLayout& l, std::uint64_t seed);

  Var logits_g(Graph& g, const std::vector<int>& ids);
  Mat logits(const std::vector<int>& ids);

  // Masked next-token loss: CE over positions whose target is loss-active.
  // Returns (loss var, active count); mean over active targets.
  std::pair<Var, int> sequence_loss_g(Graph& g, const MixedSequence& seq);

  MixedSequence generate(const MixedSequence& prompt, const GenerateConfig& gcfg);

  void lora_apply(const LoraSpec& spec, std::uint64_t seed);
  void lora_merge();
  void lora_unmerge();
  bool lora_attached() const;

  void collect(std::vector<Tensor*>& out);
  void collect_trainable(std::vector<Tensor*>& out);  // respects LoRA freezing
  std::uint64_t base_weights_hash();

  void save(const std::string& path) const;
  static std::unique_ptr<LanguageModel> load(const std::string& path);
};

struct MllmTrainConfig {
  int steps = 2000;
  int batch = 8;
  double max_lr = 1e-3;
  int warmup_steps = 50;
  std::uint64_t seed = 0;
  std::optional<LoraSpec> lora;
};

struct MllmTrainer {
  LanguageModel& lm;
  std::vector<MixedSequence> data;
  MllmTrainConfig cfg;

  MllmTrainer(LanguageModel& model, std::vector<MixedSequence> sequences,
              MllmTrainConfig c);
  ~MllmTrainer();
  double step(int step_index);
  std::vector<double> run(const std::string& metrics_path = "");

 private:
  std::vector<Tensor*> trainable_;
  std::unique_ptr<class TrainerState> state_;
};

// Teacher-forced accuracy over loss-active positions.
double teacher_forced_accuracy(LanguageModel& lm, const std::vector<MixedSequence>& data);

}  // namespace slottok::mllm
