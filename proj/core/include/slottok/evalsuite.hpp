#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "slottok/model.hpp"

namespace slottok::eval {

using ad::Mat;

// 10*log10(1/MSE) for [0,1] images; identical images report the 99 dB cap.
constexpr double kPsnrCap = 99.0;
double psnr(const Image& a, const Image& b);

// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), standard constants,
// averaged over channels.
double ssim(const Image& a, const Image& b);

double pixel_l1(const Image& a, const Image& b);

// Adjusted Rand index between two labelings of the same pixels.
double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

// ARI restricted to pixels with gt > 0; throws when none exist.
double foreground_ari(const std::vector<int>& pred, const std::vector<int>& gt);

// Per-pixel slot labels from an N x M attention map: bilinear upsampling of
// each slot's map to the canvas, then argmax over slots.
std::vector<int> slot_masks_from_attention(const Mat& attn, int grid_h, int grid_w,
                                           int out_h, int out_w);

struct MetricReport {
  double psnr = 0.0;
  double ssim = 0.0;
  double pixel_l1 = 0.0;
  std::vector<nlohmann::json> per_sample;
  std::string config_hash;
  std::string weights_hash;
  // Reserved for full-scale runs with pretrained perceptual metrics.
  double lpips = -1.0, dreamsim = -1.0, clip_t = -1.0;

  nlohmann::json to_json() const;
};

struct EvalOptions {
  int sample_steps = 200;
  std::uint64_t seed = 0;
  int max_samples = -1;   // -1 = all
};

// Token -> image reconstruction metrics over a dataset (stage-2 path).
MetricReport evaluate_reconstruction(model::TokenizerModel& m,
                                     const std::vector<synth::SceneSample>& data,
                                     const EvalOptions& opt);

// Object-discovery score of the final-layer slot masks on ground truth.
struct AriOptions {
  int layer = -1;       // -1 = final recorded map
};
double mean_foreground_ari(model::TokenizerModel& m,
                           const std::vector<synth::SceneSample>& data,
                           const AriOptions& opt = {});

enum class DropGranularity { slot, token };

struct DropStudyResult {
  double fraction = 0.0;
  MetricReport baseline;
  MetricReport dropped;
  double psnr_rel_delta = 0.0;   // (dropped - baseline) / baseline
  double ssim_rel_delta = 0.0;
  nlohmann::json to_json() const;
};

// Paired replacement study: both arms share images, diffusion seeds, and a
// replacement stream derived from one seed.
DropStudyResult token_drop_study(model::TokenizerModel& m,
                                 const std::vector<synth::SceneSample>& data,
                                 double fraction, std::uint64_t seed,
                                 const EvalOptions& opt,
                                 DropGranularity granularity = DropGranularity::slot);

struct AblationEntry {
  std::string name;
  std::string checkpoint_path;
};

// Per-config {PSNR, SSIM, ARI, drop delta} table; throws listing any missing
// checkpoint.
nlohmann::json ablation_matrix(const std::vector<AblationEntry>& configs,
                               const std::vector<synth::SceneSample>& recon_data,
                               const std::vector<synth::SceneSample>& ari_data,
                               const EvalOptions& opt, double drop_fraction = 0.5);

std::string render_table(const nlohmann::json& matrix);

}  // namespace slottok::eval
