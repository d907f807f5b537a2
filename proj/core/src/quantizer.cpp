#include "slottok/quantizer.hpp"

#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace slottok::quantizer {

QuantizerConfig QuantizerConfig::desk() { return QuantizerConfig{}; }

QuantizerConfig QuantizerConfig::paper() {
  QuantizerConfig c;
  c.codebook_size = 8192;
  c.d_code = 32;
  c.depth = 4;
  c.slot_dim = 768;
  c.n_slots = 32;
  return c;
}

void QuantizerConfig::validate() const {
  if (codebook_size < 2) throw std::invalid_argument("quantizer: V >= 2 required");
  if (codebook_size > 65536)
    throw std::invalid_argument("quantizer: V must fit 16-bit token files");
  if (depth < 1 || d_code < 1) throw std::invalid_argument("quantizer: bad depth/d_code");
}

ResidualQuantizer::ResidualQuantizer(const QuantizerConfig& c, Rng& rng)
    : cfg(c),
      down("rvq.down", c.slot_dim, c.d_code, rng),
      up("rvq.up", c.d_code, c.slot_dim, rng),
      codebook("rvq.codebook", nn::gaussian_init(c.codebook_size, c.d_code, 0.1, rng),
               /*no_decay=*/true),
      post("rvq.post", c.slot_dim, c.post_heads, c.post_ff, rng),
      post_ln("rvq.post_ln", c.slot_dim) {
  c.validate();
  codebook.trainable = false;  // EMA-updated, never via the optimizer
  ema_sums = codebook.value;
  ema_counts = Eigen::VectorXd::Ones(c.codebook_size);
  unused_steps.assign(static_cast<std::size_t>(c.codebook_size), 0);
  usage_counts.assign(static_cast<std::size_t>(c.codebook_size), 0);
  total_usage.assign(static_cast<std::size_t>(c.codebook_size), 0);
}

namespace {

// Exact nearest neighbor; plain per-entry squared distance, no algebraic
// shortcuts, so ties resolve to the lowest index.
int nearest_entry(const Mat& codebook, const Eigen::RowVectorXd& x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index e = 0; e < codebook.rows(); ++e) {
    const double d = (codebook.row(e) - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(e);
    }
  }
  return best;
}

}  // namespace

QuantizeResult ResidualQuantizer::quantize_values(const Mat& slots) const {
  if (codebook.value.size() == 0)
    throw std::logic_error("quantize: codebook uninitialized");
  if (slots.cols() != cfg.slot_dim)
    throw std::invalid_argument("quantize: slot width mismatch");
  const Eigen::Index n = slots.rows();

  Mat z = slots * down.W.value;
  z.rowwise() += down.b.value.row(0);

  QuantizeResult r;
  r.z = z;
  r.tokens.n = static_cast<int>(n);
  r.tokens.k = cfg.depth;
  r.tokens.config_hash = config_hash;
  r.tokens.codes.assign(static_cast<std::size_t>(n) * cfg.depth, 0);
  r.quantized_sum = Mat::Zero(n, cfg.d_code);

  Mat residual = z;
  Mat cumulative = Mat::Zero(n, cfg.d_code);
  double commit = 0.0;
  for (int k = 0; k < cfg.depth; ++k) {
    Mat zhat(n, cfg.d_code);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int e = nearest_entry(codebook.value, residual.row(i));
      r.tokens.codes[static_cast<std::size_t>(i) * cfg.depth + k] = e;
      zhat.row(i) = codebook.value.row(e);
    }
    residual -= zhat;
    cumulative += zhat;
    const Mat& target = cfg.commit == CommitMode::cumulative ? cumulative : zhat;
    commit += (z - target).squaredNorm() / static_cast<double>(z.size());
    r.z_hat_per_depth.push_back(std::move(zhat));
  }
  r.quantized_sum = cumulative;
  r.commit_loss = commit;
  return r;
}

QuantizeTrain ResidualQuantizer::quantize_g(Graph& g, Var slots) {
  QuantizeTrain t;
  Var z = down(g, slots);
  t.result = quantize_values(g.val(slots));
  t.z = z;
  t.quantized = g.straight_through(z, t.result.quantized_sum);
  // Codes are constants under stop-gradient; commitment pulls z toward them.
  Var commit;
  Mat cumulative = Mat::Zero(g.val(z).rows(), cfg.d_code);
  bool first = true;
  for (int k = 0; k < cfg.depth; ++k) {
    cumulative += t.result.z_hat_per_depth[static_cast<std::size_t>(k)];
    const Mat& target = cfg.commit == CommitMode::cumulative
                            ? cumulative
                            : t.result.z_hat_per_depth[static_cast<std::size_t>(k)];
    Var term = g.mse(z, g.input(target));
    commit = first ? term : g.add(commit, term);
    first = false;
  }
  t.commit = commit;
  return t;
}

ResidualQuantizer::BatchAssignments ResidualQuantizer::assignments_of(const Mat& z) const {
  BatchAssignments out;
  Mat residual = z;
  for (int k = 0; k < cfg.depth; ++k) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const int e = nearest_entry(codebook.value, residual.row(i));
      out.entry.push_back(e);
      out.residual_rows.push_back(residual.row(i));
    }
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const std::size_t idx = out.entry.size() - static_cast<std::size_t>(z.rows()) +
                              static_cast<std::size_t>(i);
      residual.row(i) -= codebook.value.row(out.entry[idx]);
    }
  }
  return out;
}

void ResidualQuantizer::codebook_update(const BatchAssignments& batch, Rng& rng) {
  const double decay = cfg.ema_decay;
  const int v = cfg.codebook_size;
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(v);
  Mat sums = Mat::Zero(v, cfg.d_code);
  std::fill(usage_counts.begin(), usage_counts.end(), 0L);
  for (std::size_t a = 0; a < batch.entry.size(); ++a) {
    const int e = batch.entry[a];
    counts(e) += 1.0;
    sums.row(e) += batch.residual_rows[a].row(0);
    ++usage_counts[static_cast<std::size_t>(e)];
    ++total_usage[static_cast<std::size_t>(e)];
  }
  if (decay >= 1.0) return;  // degenerate decay leaves entries untouched

  ema_counts = decay * ema_counts + (1.0 - decay) * counts;
  ema_sums = decay * ema_sums + (1.0 - decay) * sums;

  // Laplace-smoothed normalization keeps rarely used entries stable.
  const double total = ema_counts.sum();
  const double eps = 1e-5;
  for (int e = 0; e < v; ++e) {
    const double nsm = (ema_counts(e) + eps) / (total + v * eps) * total;
    codebook.value.row(e) = ema_sums.row(e) / nsm;
  }

  for (int e = 0; e < v; ++e) {
    if (usage_counts[static_cast<std::size_t>(e)] == 0)
      ++unused_steps[static_cast<std::size_t>(e)];
    else
      unused_steps[static_cast<std::size_t>(e)] = 0;
    if (unused_steps[static_cast<std::size_t>(e)] >= cfg.dead_code_steps &&
        !batch.residual_rows.empty()) {
      const auto pick = rng.below(batch.residual_rows.size());
      codebook.value.row(e) = batch.residual_rows[pick].row(0);
      ema_sums.row(e) = codebook.value.row(e);
      ema_counts(e) = 1.0;
      unused_steps[static_cast<std::size_t>(e)] = 0;
    }
  }
}

Var ResidualQuantizer::dequantize_g(Graph& g, const SlotTokens& tokens) {
  if (tokens.k != cfg.depth)
    throw std::invalid_argument("dequantize: depth mismatch");
  Mat summed = Mat::Zero(tokens.n, cfg.d_code);
  for (int i = 0; i < tokens.n; ++i)
    for (int k = 0; k < tokens.k; ++k) {
      const int code = tokens.at(i, k);
      if (code < 0 || code >= cfg.codebook_size)
        throw std::out_of_range("dequantize: code " + std::to_string(code) +
                                " out of range at slot " + std::to_string(i) +
                                " depth " + std::to_string(k));
      summed.row(i) += codebook.value.row(code);
    }
  return reconstruct_g(g, g.input(summed));
}

Var ResidualQuantizer::reconstruct_g(Graph& g, Var quantized) {
  Var x = up(g, quantized);
  x = post(g, x);
  return post_ln(g, x);
}

Mat ResidualQuantizer::dequantize(const SlotTokens& tokens) {
  Graph g;
  return g.val(dequantize_g(g, tokens));
}

void ResidualQuantizer::collect(std::vector<Tensor*>& out) {
  down.collect(out);
  up.collect(out);
  out.push_back(&codebook);
  post.collect(out);
  post_ln.collect(out);
}

void ResidualQuantizer::set_trainable(bool on) {
  std::vector<Tensor*> ts;
  collect(ts);
  for (auto* t : ts) t->trainable = on;
  codebook.trainable = false;
}

// ---------------------------------------------------------------------------
// token stream files

namespace {
constexpr char kMagic[4] = {'S', 'L', 'T', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
template <typename T>
T read_pod(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
}  // namespace

void save_tokens(const std::string& path, const std::vector<SlotTokens>& tokens,
                 int v, const std::string& config_hash) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_tokens: cannot open " + path);
  if (tokens.empty()) throw std::invalid_argument("save_tokens: no token arrays");
  const int n = tokens.front().n, k = tokens.front().k;
  f.write(kMagic, 4);
  write_pod(f, kVersion);
  write_pod(f, static_cast<std::uint32_t>(n));
  write_pod(f, static_cast<std::uint32_t>(k));
  write_pod(f, static_cast<std::uint32_t>(v));
  write_pod(f, static_cast<std::uint32_t>(config_hash.size()));
  f.write(config_hash.data(), static_cast<std::streamsize>(config_hash.size()));
  write_pod(f, static_cast<std::uint32_t>(tokens.size()));
  for (const auto& t : tokens) {
    if (t.n != n || t.k != k)
      throw std::invalid_argument("save_tokens: inconsistent token shapes");
    for (int c : t.codes) {
      if (c < 0 || c >= v) throw std::out_of_range("save_tokens: code out of range");
      write_pod(f, static_cast<std::uint16_t>(c));
    }
  }
  if (!f) throw std::runtime_error("save_tokens: write failed");
}

std::vector<SlotTokens> load_tokens(const std::string& path, int* v_out,
                                    std::string* hash_out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_tokens: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("load_tokens: bad magic in " + path);
  if (read_pod<std::uint32_t>(f) != kVersion)
    throw std::runtime_error("load_tokens: unsupported version");
  const auto n = read_pod<std::uint32_t>(f);
  const auto k = read_pod<std::uint32_t>(f);
  const auto v = read_pod<std::uint32_t>(f);
  const auto hash_len = read_pod<std::uint32_t>(f);
  std::string hash(hash_len, '\0');
  f.read(hash.data(), hash_len);
  const auto count = read_pod<std::uint32_t>(f);
  if (!f) throw std::runtime_error("load_tokens: truncated header");
  if (v_out) *v_out = static_cast<int>(v);
  if (hash_out) *hash_out = hash;
  std::vector<SlotTokens> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    SlotTokens t;
    t.n = static_cast<int>(n);
    t.k = static_cast<int>(k);
    t.config_hash = hash;
    t.codes.resize(static_cast<std::size_t>(n) * k);
    for (auto& c : t.codes) c = read_pod<std::uint16_t>(f);
    if (!f) throw std::runtime_error("load_tokens: truncated data");
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace slottok::quantizer
