#include "slottok/train.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "slottok/serialize.hpp"

namespace slottok::train {

using nlohmann::json;

void LossWeights::validate() const {
  for (double w : {w1, w2, w3, w4, w5, w6, w7, w8})
    if (w < 0.0) throw std::invalid_argument("LossWeights: weights must be >= 0");
}

void TrainConfig::validate() const {
  weights.validate();
  if (stage != 1 && stage != 2) throw std::invalid_argument("TrainConfig: stage must be 1 or 2");
  if (warmup_steps >= total_steps)
    throw std::invalid_argument("TrainConfig: warmup must be < total steps");
  if (batch < 1) throw std::invalid_argument("TrainConfig: batch >= 1");
}

json TrainConfig::to_json() const {
  return json{{"stage", stage},
              {"max_lr", max_lr},
              {"warmup_steps", warmup_steps},
              {"total_steps", total_steps},
              {"batch", batch},
              {"seed", seed},
              {"grad_clip", grad_clip},
              {"optim",
               {{"beta1", optim.beta1},
                {"beta2", optim.beta2},
                {"eps", optim.eps},
                {"weight_decay", optim.weight_decay}}},
              {"weights",
               {{"w1", weights.w1}, {"w2", weights.w2}, {"w3", weights.w3},
                {"w4", weights.w4}, {"w5", weights.w5}, {"w6", weights.w6},
                {"w7", weights.w7}, {"w8", weights.w8}}},
              {"ablation",
               {{"no_slot_attention", ablation.no_slot_attention},
                {"no_diffusion_loss", ablation.no_diffusion_loss},
                {"no_alignment_loss", ablation.no_alignment_loss}}}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.stage = j.value("stage", c.stage);
  c.max_lr = j.value("max_lr", c.max_lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.batch = j.value("batch", c.batch);
  c.seed = j.value("seed", c.seed);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    c.optim.beta1 = o.value("beta1", c.optim.beta1);
    c.optim.beta2 = o.value("beta2", c.optim.beta2);
    c.optim.eps = o.value("eps", c.optim.eps);
    c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
  }
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    c.weights.w1 = w.value("w1", c.weights.w1);
    c.weights.w2 = w.value("w2", c.weights.w2);
    c.weights.w3 = w.value("w3", c.weights.w3);
    c.weights.w4 = w.value("w4", c.weights.w4);
    c.weights.w5 = w.value("w5", c.weights.w5);
    c.weights.w6 = w.value("w6", c.weights.w6);
    c.weights.w7 = w.value("w7", c.weights.w7);
    c.weights.w8 = w.value("w8", c.weights.w8);
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    c.ablation.no_slot_attention = a.value("no_slot_attention", false);
    c.ablation.no_diffusion_loss = a.value("no_diffusion_loss", false);
    c.ablation.no_alignment_loss = a.value("no_alignment_loss", false);
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("TrainConfig: cannot open " + path);
  return from_json(json::parse(f));
}

double lr_at(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    throw std::invalid_argument("lr_at: step outside [0, total]");
  if (step < cfg.warmup_steps)
    return cfg.max_lr * static_cast<double>(step) / cfg.warmup_steps;
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          (cfg.total_steps - cfg.warmup_steps);
  return 0.5 * cfg.max_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

double AdamW::global_grad_norm(const std::vector<Tensor*>& params) {
  double acc = 0.0;
  for (const Tensor* t : params)
    if (t->trainable) acc += t->grad.squaredNorm();
  return std::sqrt(acc);
}

void AdamW::clip_grad_norm(const std::vector<Tensor*>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return;
  const double scale = max_norm / norm;
  for (Tensor* t : params)
    if (t->trainable) t->grad *= scale;
}

void AdamW::zero_grads(const std::vector<Tensor*>& params) {
  for (Tensor* t : params) t->zero_grad();
}

void AdamW::step(const std::vector<Tensor*>& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Tensor* t : params) {
    if (!t->trainable) continue;
    if (t->grad.isZero(0.0)) continue;
    State& s = state_[t];
    if (s.m.size() == 0) {
      s.m = Mat::Zero(t->value.rows(), t->value.cols());
      s.v = Mat::Zero(t->value.rows(), t->value.cols());
    }
    s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * t->grad;
    s.v = cfg_.beta2 * s.v.array() + (1.0 - cfg_.beta2) * t->grad.array().square();
    const Mat mhat = s.m / bc1;
    const Mat vhat = s.v / bc2;
    if (!t->no_decay && cfg_.weight_decay > 0.0)
      t->value -= lr * cfg_.weight_decay * t->value;
    t->value.array() -= lr * mhat.array() / (vhat.array().sqrt() + cfg_.eps);
  }
}

json LossBreakdown::to_json(int step) const {
  return json{{"step", step},   {"clip", clip},     {"diff", diff},
              {"itc", itc},     {"i2t", i2t},       {"recon", recon},
              {"commit", commit}, {"total", total}, {"lr", lr}};
}

Var itc_loss_g(Graph& g, Var slot_finals, Var text_finals, Var tau) {
  const Eigen::Index B = g.val(slot_finals).rows();
  if (B < 2) throw std::invalid_argument("itc_loss: batch size must be >= 2");
  if (g.val(tau)(0, 0) <= 0.0) throw std::invalid_argument("itc_loss: tau must be > 0");
  Var sim = g.div_snode(g.matmul(slot_finals, g.transpose(text_finals)), tau);
  Var lp_i2t = g.log_softmax_rows(sim);
  Var lp_t2i = g.log_softmax_rows(g.transpose(sim));
  std::vector<int> diag(static_cast<std::size_t>(B));
  for (Eigen::Index i = 0; i < B; ++i) diag[static_cast<std::size_t>(i)] = static_cast<int>(i);
  const std::vector<bool> active(static_cast<std::size_t>(B), true);
  // Each direction is a mean of per-sample NLLs; their sum matches the
  // two-term per-sample loss averaged over the batch.
  return g.add(g.pick_nll_mean(lp_i2t, diag, active),
               g.pick_nll_mean(lp_t2i, diag, active));
}

double itc_loss(const Mat& slot_finals, const Mat& text_finals, double tau) {
  Graph g;
  Mat tau_m(1, 1);
  tau_m(0, 0) = tau;
  return g.val(itc_loss_g(g, g.input(slot_finals), g.input(text_finals),
                          g.input(tau_m)))(0, 0);
}

Var i2t_loss_g(Graph& g, qformer::SlotQFormer& qf, Var slots,
               const std::vector<int>& caption_ids) {
  if (caption_ids.empty()) throw std::invalid_argument("i2t_loss: empty caption");
  Var logits = qf.caption_logits_g(g, slots, caption_ids);
  const std::vector<bool> active(caption_ids.size(), true);
  return g.pick_nll_mean(g.log_softmax_rows(logits), caption_ids, active);
}

MetricsWriter::MetricsWriter(const std::string& path) : path_(path) {
  if (!path_.empty()) std::ofstream(path_, std::ios::trunc);
}

void MetricsWriter::write(int step, const LossBreakdown& b) {
  if (path_.empty()) return;
  std::ofstream f(path_, std::ios::app);
  f << b.to_json(step).dump() << "\n";
}

std::vector<int> batch_indices(int step, int batch, int dataset_size, std::uint64_t seed) {
  // Epoch-shuffled sampling; deterministic in (seed, step) alone.
  const int steps_per_epoch = std::max(1, dataset_size / batch);
  const int epoch = step / steps_per_epoch;
  const int slot_in_epoch = step % steps_per_epoch;
  Rng rng(seed, 0xba7c000 + static_cast<std::uint64_t>(epoch));
  const std::vector<int> perm = rng.permutation(dataset_size);
  std::vector<int> out;
  for (int i = 0; i < batch; ++i)
    out.push_back(perm[static_cast<std::size_t>((slot_in_epoch * batch + i) % dataset_size)]);
  return out;
}

void abort_if_not_finite(double v, const std::string& component) {
  if (!std::isfinite(v))
    throw std::runtime_error("training aborted: non-finite loss component " + component);
}

// ---------------------------------------------------------------------------
// stage 0

void pretrain_reference(encoder::ReferenceModel& ref,
                        const std::vector<synth::SceneSample>& data,
                        const Stage0Config& cfg, const std::string& metrics_path) {
  if (ref.frozen)
    throw std::logic_error("pretrain_reference: reference embedder is frozen");
  if (data.empty()) throw std::invalid_argument("pretrain_reference: empty dataset");
  std::vector<Tensor*> params;
  ref.collect(params);
  AdamW opt(OptimConfig{});
  MetricsWriter metrics(metrics_path);

  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = batch_indices(step, cfg.batch, static_cast<int>(data.size()), cfg.seed);
    const int B = static_cast<int>(idx.size());
    std::vector<std::unique_ptr<Graph>> graphs;
    std::vector<Var> img_vars, txt_vars;
    Mat img_embs(B, ref.cfg.d_ref), txt_embs(B, ref.cfg.d_ref);
    for (int b = 0; b < B; ++b) {
      auto g = std::make_unique<Graph>();
      const auto& s = data[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])];
      Var iv = ref.embed_image_g(*g, s.image);
      Var tv = ref.embed_text_g(*g, s.caption_ids);
      img_embs.row(b) = g->val(iv).row(0);
      txt_embs.row(b) = g->val(tv).row(0);
      img_vars.push_back(iv);
      txt_vars.push_back(tv);
      graphs.push_back(std::move(g));
    }
    Graph gb;
    Var s_in = gb.leaf(img_embs);
    Var t_in = gb.leaf(txt_embs);
    Var tau = gb.param(ref.temperature);
    Var loss = itc_loss_g(gb, s_in, t_in, tau);
    const double loss_v = gb.val(loss)(0, 0);
    abort_if_not_finite(loss_v, "reference contrastive loss");
    gb.backward(loss);
    gb.accumulate_param_grads();
    for (int b = 0; b < B; ++b) {
      auto& g = *graphs[static_cast<std::size_t>(b)];
      g.backward({{img_vars[static_cast<std::size_t>(b)], gb.grad(s_in).row(b)},
                  {txt_vars[static_cast<std::size_t>(b)], gb.grad(t_in).row(b)}});
      g.accumulate_param_grads();
    }
    AdamW::clip_grad_norm(params, 1.0);
    opt.step(params, cfg.lr);
    ref.temperature.value(0, 0) =
        std::min(1.0, std::max(1e-3, ref.temperature.value(0, 0)));
    AdamW::zero_grads(params);
    LossBreakdown b;
    b.itc = loss_v;
    b.total = loss_v;
    b.lr = cfg.lr;
    metrics.write(step, b);
  }
  ref.freeze();
}

// ---------------------------------------------------------------------------
// stage 1

Stage1Trainer::Stage1Trainer(model::TokenizerModel& m,
                             const std::vector<synth::SceneSample>& data,
                             TrainConfig cfg)
    : m_(m), data_(data), cfg_(cfg), opt_(cfg.optim) {
  cfg_.validate();
  if (cfg_.stage != 1) throw std::invalid_argument("Stage1Trainer: config stage != 1");
  if (data_.empty()) throw std::invalid_argument("Stage1Trainer: empty dataset");
  if (!m_.ref.frozen)
    throw std::logic_error("Stage1Trainer: reference embedder must be pretrained+frozen");
  if (cfg_.ablation.no_slot_attention != !m_.qf.cfg.use_slot_attention)
    throw std::invalid_argument(
        "Stage1Trainer: no_slot_attention flag disagrees with model config");

  m_.dec.apply_freeze_policy();
  m_.enc.collect(trainable_);
  m_.qf.collect(trainable_);
  m_.dec.collect(trainable_);

  reference_targets_.reserve(data_.size());
  for (const auto& s : data_) reference_targets_.push_back(m_.ref.reference_embed(s.image));
}

std::vector<int> Stage1Trainer::batch_for_step(int step) const {
  return batch_indices(step, cfg_.batch, static_cast<int>(data_.size()), cfg_.seed);
}

LossBreakdown Stage1Trainer::step(int step_index, const std::vector<int>& batch_idx) {
  const int B = static_cast<int>(batch_idx.size());
  const auto& w = cfg_.weights;
  const bool use_diff = !cfg_.ablation.no_diffusion_loss && w.w2 > 0.0;
  const bool use_align = !cfg_.ablation.no_alignment_loss;
  const bool use_itc = use_align && w.w3 > 0.0 && B >= 2;
  const bool use_i2t = use_align && w.w4 > 0.0;
  const double eff_w2 = cfg_.ablation.no_diffusion_loss ? 0.0 : w.w2;

  LossBreakdown out;
  std::vector<std::unique_ptr<Graph>> graphs;
  std::vector<Var> totals, sn_vars, txt_vars;
  Mat sn_embs(B, m_.qf.cfg.dim), txt_embs(B, m_.qf.cfg.dim);

  for (int b = 0; b < B; ++b) {
    const auto& sample = data_[static_cast<std::size_t>(batch_idx[static_cast<std::size_t>(b)])];
    auto gp = std::make_unique<Graph>();
    Graph& g = *gp;
    Rng noise_rng(cfg_.seed, Rng::mix(0x51a9e1 + static_cast<std::uint64_t>(step_index) * 131 +
                                      static_cast<std::uint64_t>(b)));
    Var features = m_.enc.forward(g, sample.image);
    Var slots = m_.qf.encode_slots_g(g, features, qformer::Mode::train, noise_rng);
    Var s_hat = m_.dec.refine_g(g, slots);
    Var s_global = m_.dec.global_head_g(g, s_hat);

    Var clip = g.mse(s_global, g.input(reference_targets_[static_cast<std::size_t>(
                                  batch_idx[static_cast<std::size_t>(b)])]));
    out.clip += g.val(clip)(0, 0) / B;
    Var total = g.smul(clip, w.w1);

    if (use_diff) {
      const int t = static_cast<int>(noise_rng.below(
          static_cast<std::uint64_t>(m_.dec.schedule.size())));
      Mat eps(3, static_cast<Eigen::Index>(m_.dec.cfg.canvas) * m_.dec.cfg.canvas);
      for (Eigen::Index i = 0; i < eps.rows(); ++i)
        for (Eigen::Index j = 0; j < eps.cols(); ++j) eps(i, j) = noise_rng.gaussian();
      auto dl = m_.dec.diffusion_loss_g(g, sample.image, s_hat, s_global, t, eps);
      out.diff += g.val(dl.loss)(0, 0) / B;
      total = g.add(total, g.smul(dl.loss, eff_w2));
    }
    if (use_i2t) {
      Var i2t = i2t_loss_g(g, m_.qf, slots, sample.caption_ids);
      out.i2t += g.val(i2t)(0, 0) / B;
      total = g.add(total, g.smul(i2t, w.w4));
    }
    if (use_itc) {
      Var sn = g.l2norm_rows(g.slice_rows(slots, m_.qf.cfg.n_slots - 1, 1));
      Var txt = g.l2norm_rows(m_.qf.encode_text_g(g, sample.caption_ids));
      sn_embs.row(b) = g.val(sn).row(0);
      txt_embs.row(b) = g.val(txt).row(0);
      sn_vars.push_back(sn);
      txt_vars.push_back(txt);
    }
    totals.push_back(total);
    graphs.push_back(std::move(gp));
  }

  abort_if_not_finite(out.clip, "L_clip");
  abort_if_not_finite(out.diff, "L_diff");
  abort_if_not_finite(out.i2t, "L_i2t");

  // Batch-level contrastive term; gradients are injected back into the
  // per-sample graphs at the embedding nodes.
  Mat g_sn, g_txt;
  double tau_now = m_.qf.clamped_temperature();
  if (use_itc) {
    Graph gb;
    Var s_in = gb.leaf(sn_embs);
    Var t_in = gb.leaf(txt_embs);
    m_.qf.clamp_temperature();
    Var tau = gb.param(m_.qf.temperature);
    Var itc = itc_loss_g(gb, s_in, t_in, tau);
    out.itc = gb.val(itc)(0, 0);
    abort_if_not_finite(out.itc, "L_itc");
    Mat seed(1, 1);
    seed(0, 0) = w.w3;
    gb.backward({{itc, seed}});
    gb.accumulate_param_grads();
    g_sn = gb.grad(s_in);
    g_txt = gb.grad(t_in);
    (void)tau_now;
  }

  for (int b = 0; b < B; ++b) {
    Graph& g = *graphs[static_cast<std::size_t>(b)];
    std::vector<std::pair<Var, Mat>> seeds;
    Mat one(1, 1);
    one(0, 0) = 1.0 / B;
    seeds.emplace_back(totals[static_cast<std::size_t>(b)], one);
    if (use_itc) {
      seeds.emplace_back(sn_vars[static_cast<std::size_t>(b)], Mat(g_sn.row(b)));
      seeds.emplace_back(txt_vars[static_cast<std::size_t>(b)], Mat(g_txt.row(b)));
    }
    g.backward(seeds);
    g.accumulate_param_grads();
    graphs[static_cast<std::size_t>(b)].reset();
  }

  const double lr = lr_at(step_index, cfg_);
  AdamW::clip_grad_norm(trainable_, cfg_.grad_clip);
  opt_.step(trainable_, lr);
  m_.qf.clamp_temperature();
  AdamW::zero_grads(trainable_);

  out.total = w.w1 * out.clip + eff_w2 * out.diff + w.w3 * out.itc + w.w4 * out.i2t;
  if (cfg_.ablation.no_alignment_loss) out.total = w.w1 * out.clip + eff_w2 * out.diff;
  abort_if_not_finite(out.total, "L_1");
  out.lr = lr;
  return out;
}

std::vector<LossBreakdown> Stage1Trainer::run(const std::string& metrics_path) {
  MetricsWriter metrics(metrics_path);
  std::vector<LossBreakdown> trace;
  for (int s = 0; s < cfg_.total_steps; ++s) {
    LossBreakdown b = step(s, batch_for_step(s));
    metrics.write(s, b);
    trace.push_back(b);
  }
  m_.stage = "stage1";
  return trace;
}

// ---------------------------------------------------------------------------
// stage 2

Stage2Trainer::Stage2Trainer(model::TokenizerModel& m,
                             const std::vector<synth::SceneSample>& data,
                             TrainConfig cfg)
    : m_(m), data_(data), cfg_(cfg), opt_(cfg.optim) {
  cfg_.validate();
  if (cfg_.stage != 2) throw std::invalid_argument("Stage2Trainer: config stage != 2");
  if (m_.stage != "stage1")
    throw std::logic_error("Stage2Trainer: stage-1 checkpoint required");
  if (!m_.ref.frozen) throw std::logic_error("Stage2Trainer: reference must be frozen");

  m_.enc.set_trainable(false);
  m_.qf.set_trainable(false);
  m_.dec.set_trainable(false);
  m_.rvq.set_trainable(true);
  m_.rvq.collect(trainable_);
  m_.enc.collect(frozen_);
  m_.qf.collect(frozen_);
  m_.dec.collect(frozen_);
  frozen_hash_at_start_ = weights_hash(frozen_);

  reference_targets_.reserve(data_.size());
  slot_embs_.reserve(data_.size());
  for (const auto& s : data_) {
    reference_targets_.push_back(m_.ref.reference_embed(s.image));
    slot_embs_.push_back(m_.encode_image(s.image).slots);
  }
}

std::vector<int> Stage2Trainer::batch_for_step(int step) const {
  return batch_indices(step, cfg_.batch, static_cast<int>(data_.size()), cfg_.seed);
}

std::uint64_t Stage2Trainer::frozen_hash() const { return weights_hash(frozen_); }

LossBreakdown Stage2Trainer::step(int step_index, const std::vector<int>& batch_idx) {
  const int B = static_cast<int>(batch_idx.size());
  const auto& w = cfg_.weights;
  const bool use_diff = !cfg_.ablation.no_diffusion_loss && w.w7 > 0.0;
  const bool use_clip = w.w8 > 0.0;
  const double eff_w7 = cfg_.ablation.no_diffusion_loss ? 0.0 : w.w7;

  LossBreakdown out;
  Mat batch_z(B * m_.qf.cfg.n_slots, m_.rvq.cfg.d_code);

  for (int b = 0; b < B; ++b) {
    const int di = batch_idx[static_cast<std::size_t>(b)];
    const auto& sample = data_[static_cast<std::size_t>(di)];
    Graph g;
    Rng noise_rng(cfg_.seed, Rng::mix(0x57a6e2 + static_cast<std::uint64_t>(step_index) * 131 +
                                      static_cast<std::uint64_t>(b)));
    Var slots_in = g.input(slot_embs_[static_cast<std::size_t>(di)]);
    auto qt = m_.rvq.quantize_g(g, slots_in);
    Var s_prime = m_.rvq.reconstruct_g(g, qt.quantized);
    Var recon = g.mse(s_prime, slots_in);
    out.recon += g.val(recon)(0, 0) / B;
    out.commit += g.val(qt.commit)(0, 0) / B;
    Var total = g.add(g.smul(recon, w.w5), g.smul(qt.commit, w.w6));

    if (use_diff || use_clip) {
      Var s_hat_q = m_.dec.refine_g(g, s_prime);
      Var s_global_q = m_.dec.global_head_g(g, s_hat_q);
      if (use_clip) {
        Var clip = g.mse(s_global_q, g.input(reference_targets_[static_cast<std::size_t>(di)]));
        out.clip += g.val(clip)(0, 0) / B;
        total = g.add(total, g.smul(clip, w.w8));
      }
      if (use_diff) {
        const int t = static_cast<int>(noise_rng.below(
            static_cast<std::uint64_t>(m_.dec.schedule.size())));
        Mat eps(3, static_cast<Eigen::Index>(m_.dec.cfg.canvas) * m_.dec.cfg.canvas);
        for (Eigen::Index i = 0; i < eps.rows(); ++i)
          for (Eigen::Index j = 0; j < eps.cols(); ++j) eps(i, j) = noise_rng.gaussian();
        auto dl = m_.dec.diffusion_loss_g(g, sample.image, s_hat_q, s_global_q, t, eps);
        out.diff += g.val(dl.loss)(0, 0) / B;
        total = g.add(total, g.smul(dl.loss, eff_w7));
      }
    }

    Mat one(1, 1);
    one(0, 0) = 1.0 / B;
    g.backward({{total, one}});
    g.accumulate_param_grads();
    batch_z.middleRows(static_cast<Eigen::Index>(b) * m_.qf.cfg.n_slots,
                       m_.qf.cfg.n_slots) = g.val(qt.z);
  }

  abort_if_not_finite(out.recon, "L_recon");
  abort_if_not_finite(out.commit, "L_commit");
  abort_if_not_finite(out.diff, "L_diff");
  abort_if_not_finite(out.clip, "L_clip");

  const double lr = lr_at(step_index, cfg_);
  AdamW::clip_grad_norm(trainable_, cfg_.grad_clip);
  opt_.step(trainable_, lr);
  AdamW::zero_grads(trainable_);

  // EMA codebook learning on the batch residual assignments.
  Rng ema_rng(cfg_.seed, 0xe3a0000 + static_cast<std::uint64_t>(step_index));
  m_.rvq.codebook_update(m_.rvq.assignments_of(batch_z), ema_rng);

  if (step_index % 100 == 99 && frozen_hash() != frozen_hash_at_start_)
    throw std::runtime_error("stage2: frozen-weight mutation detected");

  out.total = w.w5 * out.recon + w.w6 * out.commit + eff_w7 * out.diff + w.w8 * out.clip;
  abort_if_not_finite(out.total, "L_2");
  out.lr = lr;
  return out;
}

std::vector<LossBreakdown> Stage2Trainer::run(const std::string& metrics_path) {
  MetricsWriter metrics(metrics_path);
  std::vector<LossBreakdown> trace;
  for (int s = 0; s < cfg_.total_steps; ++s) {
    LossBreakdown b = step(s, batch_for_step(s));
    metrics.write(s, b);
    trace.push_back(b);
  }
  if (frozen_hash() != frozen_hash_at_start_)
    throw std::runtime_error("stage2: frozen-weight mutation detected");
  m_.stage = "stage2";
  return trace;
}

}  // namespace slottok::train
