#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "slottok/model.hpp"

namespace slottok::train {

using ad::Graph;
using ad::Mat;
using ad::Tensor;
using ad::Var;

struct LossWeights {
  double w1 = 0.5, w2 = 1.0, w3 = 0.5, w4 = 0.5;  // stage 1: clip, diff, itc, i2t
  double w5 = 1.0, w6 = 1.0, w7 = 0.1, w8 = 0.1;  // stage 2: recon, commit, diff, clip
  void validate() const;
};

struct AblationFlags {
  bool no_slot_attention = false;
  bool no_diffusion_loss = false;
  bool no_alignment_loss = false;
};

struct OptimConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.01;
};

struct TrainConfig {
  int stage = 1;
  double max_lr = 1e-3;
  int warmup_steps = 100;
  int total_steps = 2000;
  int batch = 8;
  std::uint64_t seed = 0;
  double grad_clip = 1.0;
  OptimConfig optim;
  LossWeights weights;
  AblationFlags ablation;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load_file(const std::string& path);
};

// Linear warmup to max_lr, then cosine decay to zero at total_steps.
double lr_at(int step, const TrainConfig& cfg);

class AdamW {
 public:
  explicit AdamW(OptimConfig cfg) : cfg_(cfg) {}

  // Applies one update; parameters whose gradient is exactly zero (and
  // non-trainable ones) are left untouched, optimizer state included.
  void step(const std::vector<Tensor*>& params, double lr);
  static double global_grad_norm(const std::vector<Tensor*>& params);
  static void clip_grad_norm(const std::vector<Tensor*>& params, double max_norm);
  static void zero_grads(const std::vector<Tensor*>& params);

 private:
  struct State {
    Mat m, v;
  };
  OptimConfig cfg_;
  std::unordered_map<Tensor*, State> state_;
  long t_ = 0;
};

struct LossBreakdown {
  double clip = 0, diff = 0, itc = 0, i2t = 0;
  double recon = 0, commit = 0;
  double total = 0;
  double lr = 0;
  nlohmann::json to_json(int step) const;
};

// Symmetric InfoNCE over final slot/text embeddings, both directions summed,
// averaged over the batch. Inputs are used as-is (callers normalize).
Var itc_loss_g(Graph& g, Var slot_finals, Var text_finals, Var tau);
double itc_loss(const Mat& slot_finals, const Mat& text_finals, double tau);

// Caption cross-entropy given slots as causal prefix; mean over positions.
Var i2t_loss_g(Graph& g, qformer::SlotQFormer& qf, Var slots,
               const std::vector<int>& caption_ids);

// Writes one JSON line per step: {"step":..., losses..., "lr":...}.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::string& path);
  void write(int step, const LossBreakdown& b);

 private:
  std::string path_;
};

// Stage 0: pre-trains the reference embedder with a symmetric contrastive
// objective, then freezes it.
struct Stage0Config {
  int steps = 400;
  int batch = 16;
  double lr = 3e-3;
  std::uint64_t seed = 7;
};
void pretrain_reference(encoder::ReferenceModel& ref,
                        const std::vector<synth::SceneSample>& data,
                        const Stage0Config& cfg, const std::string& metrics_path = "");

class Stage1Trainer {
 public:
  Stage1Trainer(model::TokenizerModel& m, const std::vector<synth::SceneSample>& data,
                TrainConfig cfg);

  LossBreakdown step(int step_index, const std::vector<int>& batch_indices);
  // Runs the full schedule; returns the loss trace.
  std::vector<LossBreakdown> run(const std::string& metrics_path = "");
  std::vector<int> batch_for_step(int step_index) const;

 private:
  model::TokenizerModel& m_;
  const std::vector<synth::SceneSample>& data_;
  TrainConfig cfg_;
  std::vector<Mat> reference_targets_;
  std::vector<Tensor*> trainable_;
  AdamW opt_;
};

class Stage2Trainer {
 public:
  Stage2Trainer(model::TokenizerModel& m, const std::vector<synth::SceneSample>& data,
                TrainConfig cfg);

  LossBreakdown step(int step_index, const std::vector<int>& batch_indices);
  std::vector<LossBreakdown> run(const std::string& metrics_path = "");
  std::vector<int> batch_for_step(int step_index) const;

  std::uint64_t frozen_hash() const;

 private:
  model::TokenizerModel& m_;
  const std::vector<synth::SceneSample>& data_;
  TrainConfig cfg_;
  std::vector<Mat> reference_targets_;
  std::vector<Mat> slot_embs_;       // precomputed frozen S_emb per sample
  std::vector<Tensor*> trainable_;
  std::vector<Tensor*> frozen_;
  std::uint64_t frozen_hash_at_start_ = 0;
  AdamW opt_;
};

// Deterministic batch composition shared by the trainers.
std::vector<int> batch_indices(int step, int batch, int dataset_size, std::uint64_t seed);

void abort_if_not_finite(double v, const std::string& component);

}  // namespace slottok::train
