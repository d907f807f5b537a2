#include "slottok/decoder.hpp"

#include <cmath>
#include <stdexcept>

namespace slottok::decoder {

void DiffusionConfig::validate() const {
  if (timesteps < 1) throw std::invalid_argument("diffusion: timesteps >= 1");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0))
    throw std::invalid_argument("diffusion: need 0 < beta_1 < ... < beta_T < 1");
  if (schedule != "linear") throw std::invalid_argument("diffusion: unknown schedule");
}

DiffusionSchedule DiffusionSchedule::make(const DiffusionConfig& cfg) {
  cfg.validate();
  DiffusionSchedule s;
  const int T = cfg.timesteps;
  s.betas.resize(T);
  for (int t = 0; t < T; ++t)
    s.betas(t) = T == 1 ? cfg.beta_start
                        : cfg.beta_start + (cfg.beta_end - cfg.beta_start) * t / (T - 1);
  s.alphas = 1.0 - s.betas.array();
  s.alpha_bars.resize(T);
  s.alpha_bars_prev.resize(T);
  s.posterior_var.resize(T);
  double ab = 1.0;
  for (int t = 0; t < T; ++t) {
    s.alpha_bars_prev(t) = ab;
    ab *= s.alphas(t);
    s.alpha_bars(t) = ab;
    s.posterior_var(t) = s.betas(t) * (1.0 - s.alpha_bars_prev(t)) / (1.0 - s.alpha_bars(t));
  }
  s.timestep_map.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) s.timestep_map[static_cast<std::size_t>(t)] = t;
  return s;
}

DiffusionSchedule DiffusionSchedule::respaced(int steps) const {
  const int T = size();
  if (steps >= T) return *this;
  if (steps < 1) throw std::invalid_argument("respaced: steps >= 1 required");
  DiffusionSchedule s;
  s.timestep_map.resize(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i)
    s.timestep_map[static_cast<std::size_t>(i)] =
        static_cast<int>((static_cast<long>(i) * T) / steps);
  s.betas.resize(steps);
  s.alphas.resize(steps);
  s.alpha_bars.resize(steps);
  s.alpha_bars_prev.resize(steps);
  s.posterior_var.resize(steps);
  double prev_ab = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double ab = alpha_bars(s.timestep_map[static_cast<std::size_t>(i)]);
    s.alpha_bars(i) = ab;
    s.alpha_bars_prev(i) = prev_ab;
    s.betas(i) = 1.0 - ab / prev_ab;
    s.alphas(i) = 1.0 - s.betas(i);
    s.posterior_var(i) = s.betas(i) * (1.0 - prev_ab) / (1.0 - ab);
    prev_ab = ab;
  }
  return s;
}

DecoderConfig DecoderConfig::desk() { return DecoderConfig{}; }

void DecoderConfig::validate() const {
  diffusion.validate();
  if (channel_mult.empty()) throw std::invalid_argument("decoder: channel_mult empty");
  if (canvas % (1 << (channel_mult.size() - 1)) != 0)
    throw std::invalid_argument("decoder: canvas not divisible across levels");
}

Mat timestep_embedding(int t, int dim) {
  Mat e(1, dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
    e(0, i) = std::sin(t * freq);
    e(0, half + i) = std::cos(t * freq);
  }
  for (int i = 2 * half; i < dim; ++i) e(0, i) = 0.0;
  return e;
}

Conv::Conv(const std::string& name, int cin, int cout, int kk, int s, int p,
           Rng& rng, bool zero_init)
    : w(name + ".w", zero_init ? Mat::Zero(cout, cin * kk * kk)
                               : nn::xavier(cout, cin * kk * kk, rng)),
      b(name + ".b", Mat::Zero(cout, 1), /*no_decay=*/true),
      c_in(cin), c_out(cout), k(kk), stride(s), pad(p) {}

Var Conv::operator()(Graph& g, Var x, int h, int wd) const {
  auto* self = const_cast<Conv*>(this);
  return g.conv2d(x, g.param(self->w), g.param(self->b), c_in, h, wd, c_out, k,
                  stride, pad);
}

void Conv::collect(std::vector<Tensor*>& out) {
  out.push_back(&w);
  out.push_back(&b);
}

GroupNormP::GroupNormP(const std::string& name, int channels, int groups_)
    : gamma(name + ".gamma", Mat::Ones(channels, 1), /*no_decay=*/true),
      beta(name + ".beta", Mat::Zero(channels, 1), /*no_decay=*/true),
      groups(groups_) {}

Var GroupNormP::operator()(Graph& g, Var x) const {
  auto* self = const_cast<GroupNormP*>(this);
  return g.group_norm(x, groups, g.param(self->gamma), g.param(self->beta));
}

void GroupNormP::collect(std::vector<Tensor*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

ResBlock::ResBlock(const std::string& name, int cin, int cout, int d_t, int groups,
                   Rng& rng)
    : c_in(cin), c_out(cout),
      gn1(name + ".gn1", cin, groups),
      gn2(name + ".gn2", cout, groups),
      conv1(name + ".conv1", cin, cout, 3, 1, 1, rng),
      conv2(name + ".conv2", cout, cout, 3, 1, 1, rng),
      temb_proj(name + ".temb", d_t, cout, rng) {
  if (cin != cout) skip.emplace(name + ".skip", cin, cout, 1, 1, 0, rng);
}

Var ResBlock::operator()(Graph& g, Var x, int h, int w, Var temb) const {
  auto* self = const_cast<ResBlock*>(this);
  Var hh = conv1(g, g.silu(gn1(g, x)), h, w);
  Var tproj = self->temb_proj(g, g.silu(temb));        // 1 x c_out
  hh = g.add_colbc(hh, g.transpose(tproj));
  hh = conv2(g, g.silu(gn2(g, hh)), h, w);
  Var sk = skip.has_value() ? (*skip)(g, x, h, w) : x;
  return g.add(hh, sk);
}

void ResBlock::collect(std::vector<Tensor*>& out) {
  gn1.collect(out);
  gn2.collect(out);
  conv1.collect(out);
  conv2.collect(out);
  temb_proj.collect(out);
  if (skip.has_value()) skip->collect(out);
}

CrossAttn::CrossAttn(const std::string& name, int channels, int cond_dim, Rng& rng)
    : ln(name + ".ln", channels),
      wq(name + ".q", channels, channels, rng),
      wk(name + ".k", cond_dim, channels, rng),
      wv(name + ".v", cond_dim, channels, rng),
      wo(name + ".o", channels, channels, rng) {}

Var CrossAttn::operator()(Graph& g, Var x, Var cond) const {
  auto* self = const_cast<CrossAttn*>(this);
  const int channels = static_cast<int>(g.val(x).rows());
  Var tokens = g.transpose(x);  // S x C
  Var h = self->ln(g, tokens);
  Var q = self->wq(g, h);
  Var k = self->wk(g, cond);
  Var v = self->wv(g, cond);
  Var scores = g.smul(g.matmul(q, g.transpose(k)), 1.0 / std::sqrt(double(channels)));
  Var attn = g.softmax_rows(scores);
  Var out = self->wo(g, g.matmul(attn, v));
  return g.transpose(g.add(tokens, out));
}

void CrossAttn::collect(std::vector<Tensor*>& out) {
  ln.collect(out);
  wq.collect(out);
  wk.collect(out);
  wv.collect(out);
  wo.collect(out);
}

UNet::UNet(const DecoderConfig& c, Rng& rng) : cfg(c) {
  const int levels = static_cast<int>(c.channel_mult.size());
  auto ch = [&](int level) { return c.base_channels * c.channel_mult[static_cast<std::size_t>(level)]; };
  time1 = nn::Linear("unet.time1", c.d_t, 2 * c.d_t, rng);
  time2 = nn::Linear("unet.time2", 2 * c.d_t, c.d_t, rng);
  conv_in = Conv("unet.conv_in", 3, ch(0), 3, 1, 1, rng);
  int prev = ch(0);
  for (int l = 0; l < levels; ++l) {
    down_res.emplace_back("unet.down" + std::to_string(l) + ".res0", prev, ch(l),
                          c.d_t, c.groups, rng);
    down_res.emplace_back("unet.down" + std::to_string(l) + ".res1", ch(l), ch(l),
                          c.d_t, c.groups, rng);
    down_xa.emplace_back("unet.down" + std::to_string(l) + ".xa", ch(l), c.dim, rng);
    if (l + 1 < levels)
      downsample.emplace_back("unet.down" + std::to_string(l) + ".pool", ch(l), ch(l),
                              3, 2, 1, rng);
    prev = ch(l);
  }
  const int cb = ch(levels - 1);
  mid0 = ResBlock("unet.mid.res0", cb, cb, c.d_t, c.groups, rng);
  mid_xa = CrossAttn("unet.mid.xa", cb, c.dim, rng);
  mid1 = ResBlock("unet.mid.res1", cb, cb, c.d_t, c.groups, rng);
  for (int l = levels - 1; l >= 0; --l) {
    up_res.emplace_back("unet.up" + std::to_string(l) + ".res0", 2 * ch(l), ch(l),
                        c.d_t, c.groups, rng);
    up_res.emplace_back("unet.up" + std::to_string(l) + ".res1", ch(l), ch(l),
                        c.d_t, c.groups, rng);
    up_xa.emplace_back("unet.up" + std::to_string(l) + ".xa", ch(l), c.dim, rng);
    if (l > 0)
      upsample_conv.emplace_back("unet.up" + std::to_string(l) + ".conv", ch(l),
                                 ch(l - 1), 3, 1, 1, rng);
  }
  gn_out = GroupNormP("unet.gn_out", ch(0), c.groups);
  conv_out = Conv("unet.conv_out", ch(0), 3, 3, 1, 1, rng, /*zero_init=*/true);
}

Var UNet::operator()(Graph& g, Var z_t, int t_orig, Var cond_local, Var cond_global) {
  const int levels = static_cast<int>(cfg.channel_mult.size());
  int h = cfg.canvas, w = cfg.canvas;

  Var tsin = g.input(timestep_embedding(t_orig, cfg.d_t));
  if (cfg.global_add_before_mlp) tsin = g.add(tsin, cond_global);
  Var temb = time2(g, g.silu(time1(g, tsin)));
  if (!cfg.global_add_before_mlp) temb = g.add(temb, cond_global);

  Var x = conv_in(g, z_t, h, w);
  std::vector<Var> skips;
  std::vector<std::pair<int, int>> dims;
  for (int l = 0; l < levels; ++l) {
    x = down_res[static_cast<std::size_t>(2 * l)](g, x, h, w, temb);
    x = down_res[static_cast<std::size_t>(2 * l + 1)](g, x, h, w, temb);
    x = down_xa[static_cast<std::size_t>(l)](g, x, cond_local);
    skips.push_back(x);
    dims.emplace_back(h, w);
    if (l + 1 < levels) {
      x = downsample[static_cast<std::size_t>(l)](g, x, h, w);
      h /= 2;
      w /= 2;
    }
  }
  x = mid0(g, x, h, w, temb);
  x = mid_xa(g, x, cond_local);
  x = mid1(g, x, h, w, temb);

  for (int i = 0; i < levels; ++i) {
    const int l = levels - 1 - i;
    x = g.concat_rows(x, skips[static_cast<std::size_t>(l)]);
    x = up_res[static_cast<std::size_t>(2 * i)](g, x, h, w, temb);
    x = up_res[static_cast<std::size_t>(2 * i + 1)](g, x, h, w, temb);
    x = up_xa[static_cast<std::size_t>(i)](g, x, cond_local);
    if (l > 0) {
      x = g.upsample2(x, h, w);
      h *= 2;
      w *= 2;
      x = upsample_conv[static_cast<std::size_t>(i)](g, x, h, w);
    }
  }
  return conv_out(g, g.silu(gn_out(g, x)), h, w);
}

void UNet::collect(std::vector<Tensor*>& out) {
  time1.collect(out);
  time2.collect(out);
  conv_in.collect(out);
  for (auto& r : down_res) r.collect(out);
  for (auto& a : down_xa) a.collect(out);
  for (auto& d : downsample) d.collect(out);
  mid0.collect(out);
  mid_xa.collect(out);
  mid1.collect(out);
  for (auto& r : up_res) r.collect(out);
  for (auto& a : up_xa) a.collect(out);
  for (auto& u : upsample_conv) u.collect(out);
  gn_out.collect(out);
  conv_out.collect(out);
}

void UNet::collect_cross_attention(std::vector<Tensor*>& out) {
  for (auto& a : down_xa) a.collect(out);
  mid_xa.collect(out);
  for (auto& a : up_xa) a.collect(out);
}

VisualDecoder::VisualDecoder(const DecoderConfig& c, Rng& rng)
    : cfg(c),
      refine_block("dec.refine", c.dim, c.refine_heads, c.refine_ff, rng),
      refine_ln("dec.refine_ln", c.dim),
      global1("dec.global1", c.dim, c.global_hidden, rng),
      global2("dec.global2", c.global_hidden, c.d_t, rng),
      unet(c, rng),
      schedule(DiffusionSchedule::make(c.diffusion)) {
  c.validate();
}

Var VisualDecoder::refine_g(Graph& g, Var s_emb) {
  return refine_ln(g, refine_block(g, s_emb));
}

Mat VisualDecoder::refine(const Mat& s_emb) {
  Graph g;
  g.set_inference(true);
  return g.val(refine_g(g, g.input(s_emb)));
}

Var VisualDecoder::global_head_g(Graph& g, Var s_hat) {
  if (cfg.mlp_then_pool) {
    Var mapped = global2(g, g.silu(global1(g, s_hat)));  // N x d_t
    return g.colmean(mapped);
  }
  Var pooled = g.colmean(s_hat);  // 1 x D
  return global2(g, g.silu(global1(g, pooled)));
}

Mat VisualDecoder::global_head(const Mat& s_hat) {
  Graph g;
  g.set_inference(true);
  return g.val(global_head_g(g, g.input(s_hat)));
}

Mat VisualDecoder::forward_process(const Image& img, int t, const Mat& eps) const {
  const Mat x0 = 2.0 * img.rgb.array() - 1.0;
  const double ab = schedule.alpha_bars(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

DiffusionLossResult VisualDecoder::diffusion_loss_g(Graph& g, const Image& img,
                                                    Var s_hat, Var s_global, int t,
                                                    const Mat& eps) {
  if (t < 0 || t >= schedule.size())
    throw std::invalid_argument("diffusion_loss: t out of range");
  Var z_t = g.input(forward_process(img, t, eps));
  Var eps_hat = unet(g, z_t, t, s_hat, s_global);
  DiffusionLossResult r;
  r.loss = g.mse(eps_hat, g.input(eps));
  r.global_emb = s_global;
  return r;
}

Image VisualDecoder::sample(const DecoderConditioning& cond, int steps, Rng& rng) {
  const DiffusionSchedule sch = schedule.respaced(steps);
  const int hw = cfg.canvas * cfg.canvas;
  Mat z(3, hw);
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = rng.gaussian();

  for (int i = sch.size() - 1; i >= 0; --i) {
    Graph g;
    g.set_inference(true);
    Var eps_hat = unet(g, g.input(z), sch.timestep_map[static_cast<std::size_t>(i)],
                       g.input(cond.local), g.input(cond.global));
    const Mat& eh = g.val(eps_hat);
    const double beta = sch.betas(i);
    const double alpha = sch.alphas(i);
    const double ab = sch.alpha_bars(i);
    Mat mean = (z - beta / std::sqrt(1.0 - ab) * eh) / std::sqrt(alpha);
    if (i > 0) {
      const double sigma = std::sqrt(sch.posterior_var(i));
      for (Eigen::Index r = 0; r < z.rows(); ++r)
        for (Eigen::Index c = 0; c < z.cols(); ++c)
          mean(r, c) += sigma * rng.gaussian();
    }
    z = std::move(mean);
  }
  Image out(cfg.canvas, cfg.canvas);
  out.rgb = ((z.array() + 1.0) * 0.5).cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

void VisualDecoder::collect(std::vector<Tensor*>& out) {
  refine_block.collect(out);
  refine_ln.collect(out);
  global1.collect(out);
  global2.collect(out);
  unet.collect(out);
}

void VisualDecoder::set_trainable(bool on) {
  std::vector<Tensor*> ts;
  collect(ts);
  for (auto* t : ts) t->trainable = on;
}

void VisualDecoder::apply_freeze_policy() {
  if (!cfg.freeze_unet_body) return;
  std::vector<Tensor*> body;
  unet.collect(body);
  for (auto* t : body) t->trainable = false;
  std::vector<Tensor*> xa;
  unet.collect_cross_attention(xa);
  for (auto* t : xa) t->trainable = true;
}

}  // namespace slottok::decoder
