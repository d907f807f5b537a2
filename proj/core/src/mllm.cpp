#include "slottok/mllm.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "slottok/serialize.hpp"
#include "slottok/train.hpp"

namespace slottok::mllm {

using nlohmann::json;

SegmentTag VocabLayout::classify(int id) const {
  if (id == boi_id || id == eoi_id) return SegmentTag::special;
  if (id >= visual_offset && id < visual_offset + visual_size) return SegmentTag::visual;
  if (id >= 0 && id < text_size) return SegmentTag::text;
  throw std::out_of_range("VocabLayout: id " + std::to_string(id) + " outside vocabulary");
}

void VocabLayout::validate() const {
  if (text_size <= 0 || visual_size <= 0)
    throw std::invalid_argument("VocabLayout: empty text or visual block");
  if (visual_offset != text_size)
    throw std::invalid_argument("VocabLayout: visual block must follow text ids");
  if (boi_id != visual_offset + visual_size || eoi_id != boi_id + 1)
    throw std::invalid_argument("VocabLayout: special ids overlap another block");
}

VocabLayout build_vocab(int text_vocab_size, int codebook_size) {
  VocabLayout l;
  l.text_size = text_vocab_size;
  l.visual_offset = text_vocab_size;
  l.visual_size = codebook_size;
  l.boi_id = l.visual_offset + codebook_size;
  l.eoi_id = l.boi_id + 1;
  l.validate();
  return l;
}

void MixedSequence::append(int id, bool mask, SegmentTag tag) {
  ids.push_back(id);
  loss_mask.push_back(mask);
  segment_tags.push_back(tag);
}

void MixedSequence::extend(const MixedSequence& other) {
  ids.insert(ids.end(), other.ids.begin(), other.ids.end());
  loss_mask.insert(loss_mask.end(), other.loss_mask.begin(), other.loss_mask.end());
  segment_tags.insert(segment_tags.end(), other.segment_tags.begin(),
                      other.segment_tags.end());
}

std::vector<int> image_to_lm_tokens(const quantizer::SlotTokens& tokens,
                                    const VocabLayout& layout, FlattenOrder order) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(tokens.n) * tokens.k + 2);
  out.push_back(layout.boi_id);
  auto push_code = [&](int code) {
    if (code < 0 || code >= layout.visual_size)
      throw std::out_of_range("image_to_lm_tokens: code out of range");
    out.push_back(layout.visual_offset + code);
  };
  if (order == FlattenOrder::slot_major) {
    for (int s = 0; s < tokens.n; ++s)
      for (int d = 0; d < tokens.k; ++d) push_code(tokens.at(s, d));
  } else {
    for (int d = 0; d < tokens.k; ++d)
      for (int s = 0; s < tokens.n; ++s) push_code(tokens.at(s, d));
  }
  out.push_back(layout.eoi_id);
  return out;
}

quantizer::SlotTokens lm_tokens_to_image(const std::vector<int>& span,
                                         const VocabLayout& layout, int n, int k,
                                         FlattenOrder order) {
  if (static_cast<int>(span.size()) != n * k + 2)
    throw std::invalid_argument("lm_tokens_to_image: span length " +
                                std::to_string(span.size()) + ", expected " +
                                std::to_string(n * k + 2));
  if (span.front() != layout.boi_id || span.back() != layout.eoi_id)
    throw std::invalid_argument("lm_tokens_to_image: span not bracketed by <boi>/<eoi>");
  quantizer::SlotTokens t;
  t.n = n;
  t.k = k;
  t.codes.assign(static_cast<std::size_t>(n) * k, 0);
  for (int i = 0; i < n * k; ++i) {
    const int id = span[static_cast<std::size_t>(i) + 1];
    if (layout.classify(id) != SegmentTag::visual)
      throw std::invalid_argument("lm_tokens_to_image: non-visual id inside span");
    const int code = id - layout.visual_offset;
    const int s = order == FlattenOrder::slot_major ? i / k : i % n;
    const int d = order == FlattenOrder::slot_major ? i % k : i / n;
    t.codes[static_cast<std::size_t>(s) * k + d] = code;
  }
  return t;
}

namespace {

void append_span(MixedSequence& seq, const std::vector<int>& ids,
                 const VocabLayout& layout, bool mask) {
  for (int id : ids) seq.append(id, mask, layout.classify(id));
}

}  // namespace

MixedSequence assemble_pretrain(const std::vector<int>& image_span,
                                const std::vector<int>& caption_ids,
                                const VocabLayout& layout, Direction dir) {
  if (image_span.empty() || caption_ids.empty())
    throw std::invalid_argument("assemble_pretrain: empty part");
  MixedSequence seq;
  if (dir == Direction::t2i) {
    append_span(seq, caption_ids, layout, false);
    append_span(seq, image_span, layout, true);
  } else {
    append_span(seq, image_span, layout, false);
    append_span(seq, caption_ids, layout, true);
  }
  return seq;
}

MixedSequence assemble_interleaved(const std::vector<int>& image_span_a,
                                   const std::vector<int>& caption_a,
                                   const std::vector<int>& image_span_b,
                                   const std::vector<int>& caption_b,
                                   const VocabLayout& layout) {
  MixedSequence seq;
  append_span(seq, image_span_a, layout, false);
  append_span(seq, caption_a, layout, true);
  append_span(seq, image_span_b, layout, false);
  append_span(seq, caption_b, layout, true);
  return seq;
}

MixedSequence assemble_sft(const MixedSequence& instruction, const MixedSequence& answer,
                           const VocabLayout& layout, const synth::Vocabulary& vocab) {
  MixedSequence seq;
  seq.append(vocab.id("USER:"), false, SegmentTag::text);
  for (std::size_t i = 0; i < instruction.size(); ++i)
    seq.append(instruction.ids[i], false, instruction.segment_tags[i]);
  seq.append(vocab.id("ASSISTANT:"), false, SegmentTag::text);
  for (std::size_t i = 0; i < answer.size(); ++i)
    seq.append(answer.ids[i], true, answer.segment_tags[i]);
  (void)layout;
  return seq;
}

bool spans_well_formed(const std::vector<int>& ids, const VocabLayout& layout, int n,
                       int k) {
  bool inside = false;
  int count = 0;
  for (int id : ids) {
    if (id == layout.boi_id) {
      if (inside) return false;
      inside = true;
      count = 0;
    } else if (id == layout.eoi_id) {
      if (!inside || count != n * k) return false;
      inside = false;
    } else if (layout.classify(id) == SegmentTag::visual) {
      if (!inside) return false;
      ++count;
      if (count > n * k) return false;
    } else if (inside) {
      return false;  // text id inside an image span
    }
  }
  return !inside;
}

// ---------------------------------------------------------------------------
// LoRA

void LoraSpec::validate() const {
  if (rank < 1) throw std::invalid_argument("LoraSpec: rank >= 1 required");
  for (const auto& t : target)
    if (t != "q" && t != "k" && t != "v" && t != "o")
      throw std::invalid_argument("LoraSpec: unknown target projection: " + t);
}

LoraLinear::LoraLinear(const std::string& name, int in, int out, Rng& rng)
    : base(name, in, out, rng) {}

Var LoraLinear::operator()(Graph& g, Var x) {
  Var y = base(g, x);
  if (lora.has_value() && !merged) {
    auto* self = this;
    Var delta = g.matmul(g.matmul(x, g.param(self->lora->A)), g.param(self->lora->B));
    y = g.add(y, g.smul(delta, lora->scale));
  }
  return y;
}

void LoraLinear::attach(const std::string& name, int rank, double scale, Rng& rng) {
  LoraAdapter a;
  a.A = Tensor(name + ".lora_A",
               nn::gaussian_init(static_cast<int>(base.W.value.rows()), rank, 0.02, rng));
  a.B = Tensor(name + ".lora_B",
               Mat::Zero(rank, base.W.value.cols()));
  a.scale = scale;
  lora = std::move(a);
  base.W.trainable = false;
  base.b.trainable = false;
}

void LoraLinear::merge() {
  if (!lora.has_value() || merged) return;
  base.W.value += lora->scale * (lora->A.value * lora->B.value);
  merged = true;
}

void LoraLinear::unmerge() {
  if (!lora.has_value() || !merged) return;
  base.W.value -= lora->scale * (lora->A.value * lora->B.value);
  merged = false;
}

void LoraLinear::collect(std::vector<Tensor*>& out) { base.collect(out); }

void LoraLinear::collect_lora(std::vector<Tensor*>& out) {
  if (lora.has_value()) {
    out.push_back(&lora->A);
    out.push_back(&lora->B);
  }
}

// ---------------------------------------------------------------------------
// language model

json LmConfig::to_json() const {
  return json{{"vocab_total", vocab_total}, {"layers", layers}, {"width", width},
              {"heads", heads},             {"ff_hidden", ff_hidden},
              {"context", context}};
}

LmConfig LmConfig::from_json(const json& j) {
  LmConfig c;
  c.vocab_total = j.at("vocab_total");
  c.layers = j.at("layers");
  c.width = j.at("width");
  c.heads = j.at("heads");
  c.ff_hidden = j.at("ff_hidden");
  c.context = j.at("context");
  return c;
}

LmBlock::LmBlock(const std::string& name, int dim, int h, int ff_hidden, Rng& rng)
    : ln1(name + ".ln1", dim),
      ln2(name + ".ln2", dim),
      q(name + ".q", dim, dim, rng),
      k(name + ".k", dim, dim, rng),
      v(name + ".v", dim, dim, rng),
      o(name + ".o", dim, dim, rng),
      ff_in(name + ".ff_in", dim, ff_hidden, rng),
      ff_out(name + ".ff_out", ff_hidden, dim, rng),
      heads(h) {}

Var LmBlock::operator()(Graph& g, Var x, const Mat* mask) {
  const int dim = static_cast<int>(g.val(x).cols());
  const int dh = dim / heads;
  Var h = ln1(g, x);
  Var qv = q(g, h), kv = k(g, h), vv = v(g, h);
  std::vector<Var> outs;
  for (int hi = 0; hi < heads; ++hi) {
    Var qh = g.slice_cols(qv, hi * dh, dh);
    Var kh = g.slice_cols(kv, hi * dh, dh);
    Var vh = g.slice_cols(vv, hi * dh, dh);
    Var scores = g.smul(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(double(dh)));
    if (mask) scores = g.add(scores, g.input(*mask));
    outs.push_back(g.matmul(g.softmax_rows(scores), vh));
  }
  x = g.add(x, o(g, g.concat_cols(outs)));
  x = g.add(x, ff_out(g, g.silu(ff_in(g, ln2(g, x)))));
  return x;
}

void LmBlock::collect(std::vector<Tensor*>& out) {
  ln1.collect(out);
  ln2.collect(out);
  q.collect(out);
  k.collect(out);
  v.collect(out);
  o.collect(out);
  ff_in.collect(out);
  ff_out.collect(out);
}

LanguageModel::LanguageModel(const LmConfig& c, const VocabLayout& l, std::uint64_t seed)
    : cfg(c), layout(l) {
  l.validate();
  if (c.vocab_total != l.total())
    throw std::invalid_argument("LanguageModel: vocab_total != layout total");
  Rng rng(seed, /*stream=*/0x11a);
  tok_emb = Tensor("lm.tok_emb", nn::gaussian_init(c.vocab_total, c.width, 0.02, rng),
                   /*no_decay=*/true);
  pos_emb = Tensor("lm.pos_emb", nn::gaussian_init(c.context, c.width, 0.02, rng),
                   /*no_decay=*/true);
  for (int i = 0; i < c.layers; ++i)
    blocks.emplace_back("lm.block" + std::to_string(i), c.width, c.heads, c.ff_hidden,
                        rng);
  ln_f = nn::LayerNorm("lm.ln_f", c.width);
  head = nn::Linear("lm.head", c.width, c.vocab_total, rng);
}

Var LanguageModel::logits_g(Graph& g, const std::vector<int>& ids) {
  if (ids.empty()) throw std::invalid_argument("lm: empty sequence");
  if (static_cast<int>(ids.size()) > cfg.context)
    throw std::runtime_error("lm: sequence of " + std::to_string(ids.size()) +
                             " exceeds context length " + std::to_string(cfg.context));
  const int L = static_cast<int>(ids.size());
  Var x = g.embed_rows(g.param(tok_emb), ids);
  x = g.add(x, g.slice_rows(g.param(pos_emb), 0, L));
  const Mat mask = nn::causal_mask(L);
  for (auto& b : blocks) x = b(g, x, &mask);
  return head(g, ln_f(g, x));
}

Mat LanguageModel::logits(const std::vector<int>& ids) {
  Graph g;
  g.set_inference(true);
  return g.val(logits_g(g, ids));
}

std::pair<Var, int> LanguageModel::sequence_loss_g(Graph& g, const MixedSequence& seq) {
  if (seq.size() < 2) throw std::invalid_argument("lm: sequence too short for loss");
  Var lg = logits_g(g, seq.ids);
  const int L = static_cast<int>(seq.size());
  Var rows = g.slice_rows(lg, 0, L - 1);
  std::vector<int> targets(seq.ids.begin() + 1, seq.ids.end());
  std::vector<bool> active(seq.loss_mask.begin() + 1, seq.loss_mask.end());
  int count = 0;
  for (bool a : active) count += a ? 1 : 0;
  return {g.pick_nll_mean(g.log_softmax_rows(rows), targets, active), count};
}

MixedSequence LanguageModel::generate(const MixedSequence& prompt,
                                      const GenerateConfig& gcfg) {
  MixedSequence seq = prompt;
  Rng rng(gcfg.seed, /*stream=*/0x6e4);
  bool inside = false;
  int count = 0;
  for (int id : seq.ids) {
    if (id == layout.boi_id) { inside = true; count = 0; }
    else if (id == layout.eoi_id) inside = false;
    else if (inside) ++count;
  }
  const int span_len = gcfg.n_slots * gcfg.depth;

  for (int stepi = 0; stepi < gcfg.max_new; ++stepi) {
    if (static_cast<int>(seq.size()) + 1 > cfg.context)
      throw std::runtime_error("generate: context overflow, sequence truncated at " +
                               std::to_string(seq.size()));
    int next;
    if (inside && count == span_len) {
      next = layout.eoi_id;  // force-close the image span
    } else {
      Mat lg = logits(seq.ids);
      Eigen::RowVectorXd row = lg.row(lg.rows() - 1);
      Eigen::ArrayXd masked = Eigen::ArrayXd::Constant(layout.total(), -1e30);
      if (inside) {
        for (int c = 0; c < layout.visual_size; ++c)
          masked(layout.visual_offset + c) = row(layout.visual_offset + c);
      } else {
        for (int t = 0; t < layout.text_size; ++t) masked(t) = row(t);
        // A span only opens when the token budget and context can close it.
        const bool span_fits =
            (gcfg.max_new - stepi - 1) >= span_len + 1 &&
            static_cast<int>(seq.size()) + span_len + 2 <= cfg.context;
        if (span_fits) masked(layout.boi_id) = row(layout.boi_id);
      }
      Eigen::Index best;
      masked.maxCoeff(&best);
      next = static_cast<int>(best);
      if (gcfg.temperature > 0.0) {
        Eigen::ArrayXd p = ((masked - masked.maxCoeff()) / gcfg.temperature).exp();
        p /= p.sum();
        double u = rng.uniform();
        for (int i = 0; i < layout.total(); ++i) {
          u -= p(i);
          if (u <= 0.0 && p(i) > 0.0) {
            next = i;
            break;
          }
        }
      }
    }
    seq.append(next, false, layout.classify(next));
    if (next == layout.boi_id) { inside = true; count = 0; }
    else if (next == layout.eoi_id) inside = false;
    else if (inside) ++count;
  }
  return seq;
}

void LanguageModel::lora_apply(const LoraSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed, /*stream=*/0x10a);
  const double scale = spec.scaling / spec.rank;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& blk = blocks[i];
    auto want = [&](const char* n) {
      return std::find(spec.target.begin(), spec.target.end(), n) != spec.target.end();
    };
    const std::string prefix = "lm.block" + std::to_string(i);
    if (want("q")) blk.q.attach(prefix + ".q", spec.rank, scale, rng);
    if (want("k")) blk.k.attach(prefix + ".k", spec.rank, scale, rng);
    if (want("v")) blk.v.attach(prefix + ".v", spec.rank, scale, rng);
    if (want("o")) blk.o.attach(prefix + ".o", spec.rank, scale, rng);
  }
  // LoRA training leaves every base weight frozen.
  std::vector<Tensor*> base;
  collect(base);
  for (auto* t : base) t->trainable = false;
}

void LanguageModel::lora_merge() {
  for (auto& b : blocks) {
    b.q.merge();
    b.k.merge();
    b.v.merge();
    b.o.merge();
  }
}

void LanguageModel::lora_unmerge() {
  for (auto& b : blocks) {
    b.q.unmerge();
    b.k.unmerge();
    b.v.unmerge();
    b.o.unmerge();
  }
}

bool LanguageModel::lora_attached() const {
  for (const auto& b : blocks)
    if (b.q.lora || b.k.lora || b.v.lora || b.o.lora) return true;
  return false;
}

void LanguageModel::collect(std::vector<Tensor*>& out) {
  out.push_back(&tok_emb);
  out.push_back(&pos_emb);
  for (auto& b : blocks) b.collect(out);
  ln_f.collect(out);
  head.collect(out);
}

void LanguageModel::collect_trainable(std::vector<Tensor*>& out) {
  if (!lora_attached()) {
    collect(out);
    return;
  }
  for (auto& b : blocks) {
    b.q.collect_lora(out);
    b.k.collect_lora(out);
    b.v.collect_lora(out);
    b.o.collect_lora(out);
  }
}

std::uint64_t LanguageModel::base_weights_hash() {
  std::vector<Tensor*> base;
  collect(base);
  return weights_hash(base);
}

void LanguageModel::save(const std::string& path) const {
  auto* self = const_cast<LanguageModel*>(this);
  if (self->lora_attached()) {
    bool any_unmerged = false;
    for (auto& b : self->blocks)
      for (auto* l : {&b.q, &b.k, &b.v, &b.o})
        if (l->lora && !l->merged) any_unmerged = true;
    if (any_unmerged)
      throw std::logic_error("lm save: merge or drop LoRA adapters first");
  }
  std::vector<Tensor*> ts;
  self->collect(ts);
  json meta;
  meta["kind"] = "mllm";
  meta["lm_config"] = cfg.to_json();
  meta["layout"] = {{"text_size", layout.text_size},
                    {"visual_offset", layout.visual_offset},
                    {"visual_size", layout.visual_size},
                    {"boi_id", layout.boi_id},
                    {"eoi_id", layout.eoi_id}};
  save_checkpoint(path, meta, ts);
}

std::unique_ptr<LanguageModel> LanguageModel::load(const std::string& path) {
  json meta = peek_checkpoint(path);
  if (meta.value("kind", "") != "mllm")
    throw std::runtime_error("lm load: not an mllm checkpoint");
  LmConfig c = LmConfig::from_json(meta.at("lm_config"));
  VocabLayout l;
  const auto& lj = meta.at("layout");
  l.text_size = lj.at("text_size");
  l.visual_offset = lj.at("visual_offset");
  l.visual_size = lj.at("visual_size");
  l.boi_id = lj.at("boi_id");
  l.eoi_id = lj.at("eoi_id");
  auto lm = std::make_unique<LanguageModel>(c, l, /*seed=*/0);
  std::vector<Tensor*> ts;
  lm->collect(ts);
  load_checkpoint(path, ts);
  return lm;
}

// ---------------------------------------------------------------------------
// trainer

class TrainerState {
 public:
  explicit TrainerState(train::OptimConfig cfg) : opt(cfg) {}
  train::AdamW opt;
};

MllmTrainer::~MllmTrainer() = default;

MllmTrainer::MllmTrainer(LanguageModel& model, std::vector<MixedSequence> sequences,
                         MllmTrainConfig c)
    : lm(model), data(std::move(sequences)), cfg(c) {
  if (data.empty()) throw std::invalid_argument("MllmTrainer: empty dataset");
  if (cfg.lora.has_value()) lm.lora_apply(*cfg.lora, cfg.seed);
  lm.collect_trainable(trainable_);
  state_ = std::make_unique<TrainerState>(train::OptimConfig{});
}

double MllmTrainer::step(int step_index) {
  const auto idx =
      train::batch_indices(step_index, cfg.batch, static_cast<int>(data.size()), cfg.seed);
  double loss_sum = 0.0;
  int active_total = 0;
  struct Pending {
    std::unique_ptr<Graph> g;
    Var loss;
    int count;
  };
  std::vector<Pending> pend;
  for (int i : idx) {
    auto g = std::make_unique<Graph>();
    auto [loss, count] = lm.sequence_loss_g(*g, data[static_cast<std::size_t>(i)]);
    loss_sum += g->val(loss)(0, 0) * count;
    active_total += count;
    pend.push_back({std::move(g), loss, count});
  }
  const double mean_loss = active_total > 0 ? loss_sum / active_total : 0.0;
  train::abort_if_not_finite(mean_loss, "lm loss");
  for (auto& p : pend) {
    if (p.count == 0) continue;
    Mat seed(1, 1);
    seed(0, 0) = static_cast<double>(p.count) / active_total;
    p.g->backward({{p.loss, seed}});
    p.g->accumulate_param_grads();
  }
  train::TrainConfig lrc;
  lrc.max_lr = cfg.max_lr;
  lrc.warmup_steps = cfg.warmup_steps;
  lrc.total_steps = cfg.steps;
  const double lr = train::lr_at(step_index, lrc);
  train::AdamW::clip_grad_norm(trainable_, 1.0);
  state_->opt.step(trainable_, lr);
  train::AdamW::zero_grads(trainable_);
  return mean_loss;
}

std::vector<double> MllmTrainer::run(const std::string& metrics_path) {
  std::ofstream metrics;
  if (!metrics_path.empty()) metrics.open(metrics_path, std::ios::trunc);
  std::vector<double> trace;
  for (int s = 0; s < cfg.steps; ++s) {
    const double loss = step(s);
    trace.push_back(loss);
    if (metrics.is_open())
      metrics << json{{"step", s}, {"loss", loss}}.dump() << "\n";
  }
  return trace;
}

double teacher_forced_accuracy(LanguageModel& lm, const std::vector<MixedSequence>& data) {
  long correct = 0, total = 0;
  for (const auto& seq : data) {
    Mat lg = lm.logits(seq.ids);
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      if (!seq.loss_mask[i + 1]) continue;
      Eigen::Index best;
      lg.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
      correct += (static_cast<int>(best) == seq.ids[i + 1]) ? 1 : 0;
      ++total;
    }
  }
  return total > 0 ? static_cast<double>(correct) / total : 0.0;
}

}  // namespace slottok::mllm
