#include "slottok/evalsuite.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <stdexcept>

#include "slottok/serialize.hpp"

namespace slottok::eval {

using nlohmann::json;

double psnr(const Image& a, const Image& b) {
  if (a.h != b.h || a.w != b.w) throw std::invalid_argument("psnr: shape mismatch");
  const double mse = (a.rgb - b.rgb).array().square().mean();
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double pixel_l1(const Image& a, const Image& b) { return mean_abs_diff(a, b); }

namespace {

// 1-D Gaussian taps for the standard 11x11, sigma=1.5 SSIM window.
std::vector<double> ssim_kernel() {
  const int R = 5;
  std::vector<double> k(2 * R + 1);
  double sum = 0.0;
  for (int i = -R; i <= R; ++i) {
    k[static_cast<std::size_t>(i + R)] = std::exp(-(i * i) / (2.0 * 1.5 * 1.5));
    sum += k[static_cast<std::size_t>(i + R)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable filter with reflect padding.
Eigen::MatrixXd blur(const Eigen::MatrixXd& img) {
  static const std::vector<double> k = ssim_kernel();
  const int R = 5;
  const auto reflect = [](int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  Eigen::MatrixXd tmp(img.rows(), img.cols());
  for (Eigen::Index y = 0; y < img.rows(); ++y)
    for (Eigen::Index x = 0; x < img.cols(); ++x) {
      double acc = 0.0;
      for (int d = -R; d <= R; ++d)
        acc += k[static_cast<std::size_t>(d + R)] *
               img(y, reflect(static_cast<int>(x) + d, static_cast<int>(img.cols())));
      tmp(y, x) = acc;
    }
  Eigen::MatrixXd out(img.rows(), img.cols());
  for (Eigen::Index y = 0; y < img.rows(); ++y)
    for (Eigen::Index x = 0; x < img.cols(); ++x) {
      double acc = 0.0;
      for (int d = -R; d <= R; ++d)
        acc += k[static_cast<std::size_t>(d + R)] *
               tmp(reflect(static_cast<int>(y) + d, static_cast<int>(img.rows())), x);
      out(y, x) = acc;
    }
  return out;
}

Eigen::MatrixXd channel_plane(const Image& im, int c) {
  Eigen::MatrixXd p(im.h, im.w);
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) p(y, x) = im.at(c, y, x);
  return p;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  if (a.h != b.h || a.w != b.w) throw std::invalid_argument("ssim: shape mismatch");
  if (a.h < 11 || a.w < 11)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  const double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    const Eigen::MatrixXd x = channel_plane(a, c);
    const Eigen::MatrixXd y = channel_plane(b, c);
    const Eigen::MatrixXd mx = blur(x), my = blur(y);
    const Eigen::MatrixXd sx = blur(x.cwiseProduct(x)) - mx.cwiseProduct(mx);
    const Eigen::MatrixXd sy = blur(y.cwiseProduct(y)) - my.cwiseProduct(my);
    const Eigen::MatrixXd sxy = blur(x.cwiseProduct(y)) - mx.cwiseProduct(my);
    Eigen::ArrayXXd num = (2.0 * mx.cwiseProduct(my).array() + C1) * (2.0 * sxy.array() + C2);
    Eigen::ArrayXXd den = (mx.array().square() + my.array().square() + C1) *
                          (sx.array() + sy.array() + C2);
    total += (num / den).mean();
  }
  return total / 3.0;
}

namespace {
double comb2(double n) { return n * (n - 1.0) / 2.0; }
}  // namespace

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("ari: label vectors must be same non-zero size");
  std::map<std::pair<int, int>, long> cont;
  std::map<int, long> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++cont[{a[i], b[i]}];
    ++ra[a[i]];
    ++rb[b[i]];
  }
  double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [k, v] : cont) sum_ij += comb2(static_cast<double>(v));
  for (const auto& [k, v] : ra) sum_a += comb2(static_cast<double>(v));
  for (const auto& [k, v] : rb) sum_b += comb2(static_cast<double>(v));
  const double n2 = comb2(static_cast<double>(a.size()));
  const double expected = sum_a * sum_b / n2;
  const double maxi = 0.5 * (sum_a + sum_b);
  if (maxi == expected) return 1.0;  // both partitions trivial
  return (sum_ij - expected) / (maxi - expected);
}

double foreground_ari(const std::vector<int>& pred, const std::vector<int>& gt) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("foreground_ari: size mismatch");
  std::vector<int> p, g;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt[i] > 0) {
      p.push_back(pred[i]);
      g.push_back(gt[i]);
    }
  if (g.empty()) throw std::invalid_argument("foreground_ari: no foreground pixels");
  return adjusted_rand_index(p, g);
}

std::vector<int> slot_masks_from_attention(const Mat& attn, int grid_h, int grid_w,
                                           int out_h, int out_w) {
  const Eigen::Index n_slots = attn.rows();
  if (attn.cols() != static_cast<Eigen::Index>(grid_h) * grid_w)
    throw std::invalid_argument("slot_masks: attention/grid mismatch");
  std::vector<int> labels(static_cast<std::size_t>(out_h) * out_w, 0);
  const double sy = static_cast<double>(grid_h) / out_h;
  const double sx = static_cast<double>(grid_w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      // Bilinear sample of each slot's map at the pixel center.
      const double gy = (y + 0.5) * sy - 0.5;
      const double gx = (x + 0.5) * sx - 0.5;
      const int y0 = std::max(0, std::min(grid_h - 1, static_cast<int>(std::floor(gy))));
      const int x0 = std::max(0, std::min(grid_w - 1, static_cast<int>(std::floor(gx))));
      const int y1 = std::min(grid_h - 1, y0 + 1);
      const int x1 = std::min(grid_w - 1, x0 + 1);
      const double fy = std::max(0.0, std::min(1.0, gy - y0));
      const double fx = std::max(0.0, std::min(1.0, gx - x0));
      int best = 0;
      double best_v = -1.0;
      for (Eigen::Index s = 0; s < n_slots; ++s) {
        const double v00 = attn(s, y0 * grid_w + x0);
        const double v01 = attn(s, y0 * grid_w + x1);
        const double v10 = attn(s, y1 * grid_w + x0);
        const double v11 = attn(s, y1 * grid_w + x1);
        const double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                         fy * ((1 - fx) * v10 + fx * v11);
        if (v > best_v) {
          best_v = v;
          best = static_cast<int>(s);
        }
      }
      labels[static_cast<std::size_t>(y) * out_w + x] = best;
    }
  }
  return labels;
}

json MetricReport::to_json() const {
  return json{{"psnr", psnr},
              {"ssim", ssim},
              {"pixel_l1", pixel_l1},
              {"config_hash", config_hash},
              {"weights_hash", weights_hash},
              {"lpips", lpips},
              {"dreamsim", dreamsim},
              {"clip_t", clip_t},
              {"per_sample", per_sample}};
}

namespace {

int sample_count(const std::vector<synth::SceneSample>& data, const EvalOptions& opt) {
  const int n = static_cast<int>(data.size());
  return opt.max_samples > 0 ? std::min(opt.max_samples, n) : n;
}

MetricReport report_from_pairs(model::TokenizerModel& m,
                               const std::vector<Image>& recon,
                               const std::vector<const synth::SceneSample*>& refs) {
  MetricReport r;
  r.config_hash = m.cfg.hash();
  std::vector<ad::Tensor*> ts;
  m.collect_all(ts);
  r.weights_hash = hex64(weights_hash(ts));
  for (std::size_t i = 0; i < recon.size(); ++i) {
    const double p = psnr(refs[i]->image, recon[i]);
    const double s = ssim(refs[i]->image, recon[i]);
    const double l1 = pixel_l1(refs[i]->image, recon[i]);
    r.psnr += p;
    r.ssim += s;
    r.pixel_l1 += l1;
    r.per_sample.push_back(json{{"index", i}, {"psnr", p}, {"ssim", s}, {"l1", l1}});
  }
  const double n = static_cast<double>(recon.size());
  r.psnr /= n;
  r.ssim /= n;
  r.pixel_l1 /= n;
  return r;
}

}  // namespace

MetricReport evaluate_reconstruction(model::TokenizerModel& m,
                                     const std::vector<synth::SceneSample>& data,
                                     const EvalOptions& opt) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const int n = sample_count(data, opt);
  std::vector<Image> recon;
  std::vector<const synth::SceneSample*> refs;
  for (int i = 0; i < n; ++i) {
    const auto tokens = m.tokenize(data[static_cast<std::size_t>(i)].image);
    recon.push_back(m.reconstruct(tokens, opt.sample_steps,
                                  opt.seed + static_cast<std::uint64_t>(i)));
    refs.push_back(&data[static_cast<std::size_t>(i)]);
  }
  return report_from_pairs(m, recon, refs);
}

double mean_foreground_ari(model::TokenizerModel& m,
                           const std::vector<synth::SceneSample>& data,
                           const AriOptions& opt) {
  if (data.empty()) throw std::invalid_argument("ari: empty dataset");
  double acc = 0.0;
  for (const auto& s : data) {
    auto embs = m.encode_image(s.image);
    if (embs.attention_maps.empty()) throw std::logic_error("ari: no attention maps");
    const std::size_t idx = opt.layer < 0 ? embs.attention_maps.size() - 1
                                          : static_cast<std::size_t>(opt.layer);
    const Mat& attn = embs.attention_maps.at(idx);
    const int gs = m.cfg.enc.grid_side();
    const auto labels = slot_masks_from_attention(attn, gs, gs, s.image.h, s.image.w);
    acc += foreground_ari(labels, s.mask);
  }
  return acc / static_cast<double>(data.size());
}

json DropStudyResult::to_json() const {
  return json{{"fraction", fraction},
              {"baseline", baseline.to_json()},
              {"dropped", dropped.to_json()},
              {"psnr_rel_delta", psnr_rel_delta},
              {"ssim_rel_delta", ssim_rel_delta}};
}

DropStudyResult token_drop_study(model::TokenizerModel& m,
                                 const std::vector<synth::SceneSample>& data,
                                 double fraction, std::uint64_t seed,
                                 const EvalOptions& opt, DropGranularity granularity) {
  if (fraction < 0.0 || fraction > 1.0)
    throw std::invalid_argument("token_drop_study: fraction must be in [0,1]");
  const int n = sample_count(data, opt);
  const int V = m.cfg.rvq.codebook_size;
  std::vector<Image> base_recon, drop_recon;
  std::vector<const synth::SceneSample*> refs;
  for (int i = 0; i < n; ++i) {
    const auto& sample = data[static_cast<std::size_t>(i)];
    auto tokens = m.tokenize(sample.image);
    const std::uint64_t img_seed = opt.seed + static_cast<std::uint64_t>(i);
    base_recon.push_back(m.reconstruct(tokens, opt.sample_steps, img_seed));

    auto dropped = tokens;
    Rng rng(seed, 0xd20b + static_cast<std::uint64_t>(i));
    if (granularity == DropGranularity::slot) {
      const int n_replace = static_cast<int>(std::ceil(fraction * tokens.n));
      const auto perm = rng.permutation(tokens.n);
      for (int r = 0; r < n_replace; ++r) {
        const int slot = perm[static_cast<std::size_t>(r)];
        for (int k = 0; k < tokens.k; ++k)
          dropped.codes[static_cast<std::size_t>(slot) * tokens.k + k] =
              static_cast<int>(rng.below(static_cast<std::uint64_t>(V)));
      }
    } else {
      const int total = tokens.n * tokens.k;
      const int n_replace = static_cast<int>(std::ceil(fraction * total));
      const auto perm = rng.permutation(total);
      for (int r = 0; r < n_replace; ++r)
        dropped.codes[static_cast<std::size_t>(perm[static_cast<std::size_t>(r)])] =
            static_cast<int>(rng.below(static_cast<std::uint64_t>(V)));
    }
    // Identical diffusion seed for both arms (paired design).
    drop_recon.push_back(m.reconstruct(dropped, opt.sample_steps, img_seed));
    refs.push_back(&sample);
  }
  DropStudyResult r;
  r.fraction = fraction;
  r.baseline = report_from_pairs(m, base_recon, refs);
  r.dropped = report_from_pairs(m, drop_recon, refs);
  r.psnr_rel_delta = (r.dropped.psnr - r.baseline.psnr) / r.baseline.psnr;
  r.ssim_rel_delta = (r.dropped.ssim - r.baseline.ssim) / r.baseline.ssim;
  return r;
}

json ablation_matrix(const std::vector<AblationEntry>& configs,
                     const std::vector<synth::SceneSample>& recon_data,
                     const std::vector<synth::SceneSample>& ari_data,
                     const EvalOptions& opt, double drop_fraction) {
  std::vector<std::string> missing;
  for (const auto& c : configs)
    if (!std::filesystem::exists(c.checkpoint_path)) missing.push_back(c.checkpoint_path);
  if (!missing.empty()) {
    std::string msg = "ablation_matrix: missing checkpoints:";
    for (const auto& p : missing) msg += " " + p;
    throw std::runtime_error(msg);
  }
  json rows = json::array();
  for (const auto& c : configs) {
    auto m = model::TokenizerModel::load(c.checkpoint_path);
    MetricReport rep = evaluate_reconstruction(*m, recon_data, opt);
    const double ari = mean_foreground_ari(*m, ari_data);
    auto drop = token_drop_study(*m, recon_data, drop_fraction, opt.seed, opt);
    rows.push_back(json{{"name", c.name},
                        {"psnr", rep.psnr},
                        {"ssim", rep.ssim},
                        {"ari", ari},
                        {"drop_psnr_rel_delta", drop.psnr_rel_delta}});
  }
  return json{{"drop_fraction", drop_fraction}, {"rows", rows}};
}

std::string render_table(const json& matrix) {
  std::ostringstream os;
  os << "config                     PSNR    SSIM     ARI   dropPSNR%\n";
  for (const auto& r : matrix.at("rows")) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-24s %6.2f  %6.3f  %6.3f  %9.1f\n",
                  r.at("name").get<std::string>().c_str(), r.at("psnr").get<double>(),
                  r.at("ssim").get<double>(), r.at("ari").get<double>(),
                  100.0 * r.at("drop_psnr_rel_delta").get<double>());
    os << buf;
  }
  return os.str();
}

}  // namespace slottok::eval
