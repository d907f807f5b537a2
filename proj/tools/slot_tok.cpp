// slot-tok: command-line front end for the slot tokenizer pipeline.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "slottok/evalsuite.hpp"
#include "slottok/mllm.hpp"
#include "slottok/model.hpp"
#include "slottok/serialize.hpp"
#include "slottok/train.hpp"

using namespace slottok;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  return json::parse(f);
}

model::ModelConfig model_config_from(const std::string& config_path, int vocab_size) {
  auto cfg = model::ModelConfig::desk(vocab_size);
  if (config_path.empty()) return cfg;
  json j = load_json(config_path);
  if (j.contains("model")) cfg = model::ModelConfig::from_json(j.at("model"));
  return cfg;
}

train::TrainConfig train_config_from(const std::string& config_path) {
  if (config_path.empty()) return train::TrainConfig{};
  json j = load_json(config_path);
  return train::TrainConfig::from_json(j.contains("train") ? j.at("train") : j);
}

// Per-slot heatmap overlays of the chosen attention map.
void write_attention_overlays(model::TokenizerModel& m, const Image& img,
                              const std::string& out_dir, int map_index) {
  auto embs = m.encode_image(img);
  if (embs.attention_maps.empty()) throw std::runtime_error("no attention maps recorded");
  const std::size_t idx = map_index < 0 ? embs.attention_maps.size() - 1
                                        : static_cast<std::size_t>(map_index);
  const ad::Mat& attn = embs.attention_maps.at(idx);
  const int gs = m.cfg.enc.grid_side();
  fs::create_directories(out_dir);
  json index;
  index["map_index"] = idx;
  index["n_maps"] = embs.attention_maps.size();
  index["n_slots"] = attn.rows();
  json files = json::array();
  for (Eigen::Index s = 0; s < attn.rows(); ++s) {
    Image overlay = img;
    const double peak = std::max(1e-12, attn.row(s).maxCoeff());
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        const int gy = std::min(gs - 1, y * gs / img.h);
        const int gx = std::min(gs - 1, x * gs / img.w);
        const double a = attn(s, gy * gs + gx) / peak;
        overlay.at(0, y, x) = 0.35 * overlay.at(0, y, x) + 0.65 * a;
        overlay.at(1, y, x) = 0.35 * overlay.at(1, y, x);
        overlay.at(2, y, x) = 0.35 * overlay.at(2, y, x);
      }
    char name[32];
    std::snprintf(name, sizeof(name), "slot_%02d.png", static_cast<int>(s));
    write_png(out_dir + "/" + name, overlay);
    files.push_back(name);
  }
  index["files"] = files;
  std::ofstream jf(out_dir + "/index.json");
  jf << index.dump(2) << "\n";
}

std::vector<mllm::MixedSequence> build_pretrain_sequences(
    model::TokenizerModel& tok, const std::vector<synth::SceneSample>& data,
    const mllm::VocabLayout& layout, bool both_directions) {
  std::vector<mllm::MixedSequence> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto span = mllm::image_to_lm_tokens(tok.tokenize(data[i].image), layout);
    out.push_back(mllm::assemble_pretrain(span, data[i].caption_ids, layout,
                                          mllm::Direction::t2i));
    if (both_directions)
      out.push_back(mllm::assemble_pretrain(span, data[i].caption_ids, layout,
                                            mllm::Direction::i2t));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slot-tok: object-centric discrete visual tokenizer pipeline"};
  app.require_subcommand(1);

  try {
    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene dataset");
    std::string gen_out;
    int n_train = 64, n_val = 16, gen_canvas = 64;
    std::uint64_t gen_seed = 0;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--n-train", n_train);
    gen->add_option("--n-val", n_val);
    gen->add_option("--seed", gen_seed);
    gen->add_option("--canvas", gen_canvas);
    gen->callback([&] {
      auto vocab = synth::Vocabulary::standard();
      auto [train_specs, val_specs] = synth::make_splits(n_train, n_val, gen_seed);
      auto render = [&](std::vector<synth::SceneSpec> specs, const std::string& dir) {
        std::vector<synth::SceneSample> samples;
        for (auto& s : specs) {
          s.canvas_h = s.canvas_w = gen_canvas;
          samples.push_back(synth::generate_scene(s, vocab));
        }
        synth::save_dataset(dir, samples, vocab);
        std::cout << "wrote " << samples.size() << " samples to " << dir << "\n";
      };
      render(train_specs, gen_out + "/train");
      render(val_specs, gen_out + "/val");
    });

    // ---- pretrain-ref ----
    auto* pre = app.add_subcommand("pretrain-ref",
                                   "pretrain + freeze the reference embedder");
    std::string pre_data, pre_out, pre_config;
    int pre_steps = 400, pre_batch = 16;
    double pre_lr = 3e-3;
    std::uint64_t pre_seed = 7;
    pre->add_option("--data", pre_data, "dataset directory (train split)")->required();
    pre->add_option("--out", pre_out, "output checkpoint")->required();
    pre->add_option("--config", pre_config, "model config json");
    pre->add_option("--steps", pre_steps);
    pre->add_option("--batch", pre_batch);
    pre->add_option("--lr", pre_lr);
    pre->add_option("--seed", pre_seed);
    pre->callback([&] {
      synth::Vocabulary vocab;
      auto data = synth::load_dataset(pre_data, &vocab);
      auto mc = model_config_from(pre_config, vocab.size());
      model::TokenizerModel m(mc, pre_seed);
      train::Stage0Config c;
      c.steps = pre_steps;
      c.batch = pre_batch;
      c.lr = pre_lr;
      c.seed = pre_seed;
      train::pretrain_reference(m.ref, data, c, pre_out + ".metrics.jsonl");
      m.save(pre_out);
      std::cout << "reference frozen, hash " << m.ref.frozen_hash << "\n";
    });

    // ---- train-stage1 / train-stage2 ----
    for (int stage : {1, 2}) {
      auto* tr = app.add_subcommand("train-stage" + std::to_string(stage),
                                    stage == 1 ? "continuous slot embedding training"
                                               : "discrete slot token training");
      auto opts = std::make_shared<std::tuple<std::string, std::string, std::string,
                                              std::string>>();
      tr->add_option("--config", std::get<0>(*opts), "train config json")->required();
      tr->add_option("--data", std::get<1>(*opts), "dataset directory")->required();
      tr->add_option("--out", std::get<2>(*opts), "output checkpoint")->required();
      tr->add_option("--init", std::get<3>(*opts),
                     stage == 1 ? "checkpoint from pretrain-ref"
                                : "checkpoint from train-stage1")
          ->required();
      tr->callback([opts, stage] {
        const auto& [config_path, data_dir, out_path, init_path] = *opts;
        synth::Vocabulary vocab;
        auto data = synth::load_dataset(data_dir, &vocab);
        auto m = model::TokenizerModel::load(init_path);
        auto cfg = train_config_from(config_path);
        cfg.stage = stage;
        if (stage == 1) {
          train::Stage1Trainer trainer(*m, data, cfg);
          trainer.run(out_path + ".metrics.jsonl");
        } else {
          train::Stage2Trainer trainer(*m, data, cfg);
          trainer.run(out_path + ".metrics.jsonl");
        }
        m->save(out_path);
        std::cout << "saved " << out_path << "\n";
      });
    }

    // ---- tokenize ----
    auto* tok = app.add_subcommand("tokenize", "image -> token stream file");
    std::string tok_ckpt, tok_image, tok_out;
    tok->add_option("--ckpt", tok_ckpt)->required();
    tok->add_option("--image", tok_image)->required();
    tok->add_option("--out", tok_out)->required();
    tok->callback([&] {
      auto m = model::TokenizerModel::load(tok_ckpt);
      auto tokens = m->tokenize(read_png(tok_image));
      quantizer::save_tokens(tok_out, {tokens}, m->cfg.rvq.codebook_size,
                             m->cfg.hash());
      std::cout << "wrote " << tokens.codes.size() << " codes to " << tok_out << "\n";
    });

    // ---- reconstruct ----
    auto* rec = app.add_subcommand("reconstruct", "token stream -> image");
    std::string rec_ckpt, rec_tokens, rec_out;
    int rec_steps = 200;
    std::uint64_t rec_seed = 0;
    rec->add_option("--ckpt", rec_ckpt)->required();
    rec->add_option("--tokens", rec_tokens)->required();
    rec->add_option("--out", rec_out)->required();
    rec->add_option("--steps", rec_steps);
    rec->add_option("--seed", rec_seed);
    rec->callback([&] {
      auto m = model::TokenizerModel::load(rec_ckpt);
      auto tokens = quantizer::load_tokens(rec_tokens);
      if (tokens.empty()) throw std::runtime_error("empty token file");
      write_png(rec_out, m->reconstruct(tokens.front(), rec_steps, rec_seed));
      std::cout << "wrote " << rec_out << "\n";
    });

    // ---- attn-maps ----
    auto* am = app.add_subcommand("attn-maps", "per-slot attention heatmap overlays");
    std::string am_ckpt, am_image, am_out;
    int am_index = -1;
    am->add_option("--ckpt", am_ckpt)->required();
    am->add_option("--image", am_image)->required();
    am->add_option("--out", am_out)->required();
    am->add_option("--map-index", am_index, "which (layer,iteration) map; -1 = final");
    am->callback([&] {
      auto m = model::TokenizerModel::load(am_ckpt);
      write_attention_overlays(*m, read_png(am_image), am_out, am_index);
      std::cout << "wrote overlays to " << am_out << "\n";
    });

    // ---- train-mllm ----
    auto* tm = app.add_subcommand("train-mllm", "train the multimodal language model");
    std::string tm_tok, tm_config, tm_data, tm_out;
    tm->add_option("--tokenizer-ckpt", tm_tok)->required();
    tm->add_option("--config", tm_config, "mllm train config json");
    tm->add_option("--data", tm_data, "dataset directory")->required();
    tm->add_option("--out", tm_out, "output checkpoint")->required();
    tm->callback([&] {
      synth::Vocabulary vocab;
      auto data = synth::load_dataset(tm_data, &vocab);
      auto tokm = model::TokenizerModel::load(tm_tok);
      auto layout = mllm::build_vocab(vocab.size(), tokm->cfg.rvq.codebook_size);

      mllm::LmConfig lc;
      lc.vocab_total = layout.total();
      mllm::MllmTrainConfig mc;
      bool both_directions = true;
      if (!tm_config.empty()) {
        json j = load_json(tm_config);
        if (j.contains("lm")) {
          auto lj = j.at("lm");
          lc.layers = lj.value("layers", lc.layers);
          lc.width = lj.value("width", lc.width);
          lc.heads = lj.value("heads", lc.heads);
          lc.ff_hidden = lj.value("ff_hidden", lc.ff_hidden);
          lc.context = lj.value("context", lc.context);
        }
        mc.steps = j.value("steps", mc.steps);
        mc.batch = j.value("batch", mc.batch);
        mc.max_lr = j.value("max_lr", mc.max_lr);
        mc.warmup_steps = j.value("warmup_steps", mc.warmup_steps);
        mc.seed = j.value("seed", mc.seed);
        both_directions = j.value("both_directions", true);
        if (j.contains("lora") && !j.at("lora").is_null()) {
          mllm::LoraSpec spec;
          spec.rank = j.at("lora").value("rank", 8);
          spec.scaling = j.at("lora").value("scaling", 1.0);
          spec.target = j.at("lora").value("target", std::vector<std::string>{"q", "v"});
          mc.lora = spec;
        }
      }
      mllm::LanguageModel lm(lc, layout, mc.seed);
      auto sequences = build_pretrain_sequences(*tokm, data, layout, both_directions);
      mllm::MllmTrainer trainer(lm, sequences, mc);
      trainer.run(tm_out + ".metrics.jsonl");
      const double acc = mllm::teacher_forced_accuracy(lm, sequences);
      if (mc.lora.has_value()) lm.lora_merge();
      lm.save(tm_out);
      std::cout << "teacher-forced accuracy " << acc << ", saved " << tm_out << "\n";
    });

    // ---- chat ----
    auto* ch = app.add_subcommand("chat", "prompt the multimodal model");
    std::string ch_lm, ch_tok, ch_prompt, ch_image, ch_outdir = ".";
    int ch_steps = 200, ch_max_new = 64;
    double ch_temp = 0.0;
    std::uint64_t ch_seed = 0;
    ch->add_option("--lm", ch_lm, "mllm checkpoint")->required();
    ch->add_option("--tokenizer-ckpt", ch_tok)->required();
    ch->add_option("--prompt", ch_prompt)->required();
    ch->add_option("--image", ch_image, "optional input image");
    ch->add_option("--out-dir", ch_outdir, "directory for generated images");
    ch->add_option("--steps", ch_steps, "diffusion steps for generated images");
    ch->add_option("--max-new", ch_max_new);
    ch->add_option("--temperature", ch_temp);
    ch->add_option("--seed", ch_seed);
    ch->callback([&] {
      auto vocab = synth::Vocabulary::standard();
      auto tokm = model::TokenizerModel::load(ch_tok);
      auto lm = mllm::LanguageModel::load(ch_lm);
      const auto& layout = lm->layout;

      mllm::MixedSequence prompt;
      prompt.append(vocab.id("USER:"), false, mllm::SegmentTag::text);
      if (!ch_image.empty()) {
        auto span = mllm::image_to_lm_tokens(tokm->tokenize(read_png(ch_image)), layout);
        for (int id : span) prompt.append(id, false, layout.classify(id));
      }
      std::istringstream ss(ch_prompt);
      std::string word;
      while (ss >> word) prompt.append(vocab.id(word), false, mllm::SegmentTag::text);
      prompt.append(vocab.id("ASSISTANT:"), false, mllm::SegmentTag::text);

      mllm::GenerateConfig gc;
      gc.max_new = ch_max_new;
      gc.temperature = ch_temp;
      gc.seed = ch_seed;
      gc.n_slots = tokm->cfg.qf.n_slots;
      gc.depth = tokm->cfg.rvq.depth;
      auto out = lm->generate(prompt, gc);

      fs::create_directories(ch_outdir);
      int img_count = 0;
      std::string text_out;
      std::vector<int> span;
      bool inside = false;
      for (std::size_t i = prompt.size(); i < out.size(); ++i) {
        const int id = out.ids[i];
        if (id == layout.boi_id) {
          inside = true;
          span = {id};
        } else if (inside) {
          span.push_back(id);
          if (id == layout.eoi_id) {
            inside = false;
            auto tokens =
                mllm::lm_tokens_to_image(span, layout, gc.n_slots, gc.depth);
            const std::string path =
                ch_outdir + "/generated_" + std::to_string(img_count++) + ".png";
            write_png(path, tokm->reconstruct(tokens, ch_steps, ch_seed));
            text_out += "[image: " + path + "] ";
          }
        } else if (id < vocab.size()) {
          text_out += vocab.token(id) + " ";
        }
      }
      std::cout << text_out << "\n";
    });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "reconstruction + object-discovery metrics");
    std::string ev_ckpt, ev_data, ev_report;
    int ev_steps = 200, ev_max = -1;
    std::uint64_t ev_seed = 0;
    ev->add_option("--ckpt", ev_ckpt)->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--report", ev_report)->required();
    ev->add_option("--steps", ev_steps);
    ev->add_option("--seed", ev_seed);
    ev->add_option("--max-samples", ev_max);
    ev->callback([&] {
      synth::Vocabulary vocab;
      auto data = synth::load_dataset(ev_data, &vocab);
      auto m = model::TokenizerModel::load(ev_ckpt);
      eval::EvalOptions opt;
      opt.sample_steps = ev_steps;
      opt.seed = ev_seed;
      opt.max_samples = ev_max;
      auto rep = eval::evaluate_reconstruction(*m, data, opt);
      json out = rep.to_json();
      out["foreground_ari"] = eval::mean_foreground_ari(*m, data);
      std::ofstream f(ev_report);
      f << out.dump(2) << "\n";
      std::cout << "psnr " << rep.psnr << " ssim " << rep.ssim << " ari "
                << out["foreground_ari"] << "\n";
    });

    // ---- token-drop ----
    auto* td = app.add_subcommand("token-drop", "random token replacement study");
    std::string td_ckpt, td_data, td_report;
    double td_fraction = 0.5;
    std::uint64_t td_seed = 0;
    int td_steps = 200, td_max = -1;
    std::string td_granularity = "slot";
    td->add_option("--ckpt", td_ckpt)->required();
    td->add_option("--data", td_data)->required();
    td->add_option("--report", td_report)->required();
    td->add_option("--fraction", td_fraction);
    td->add_option("--seed", td_seed);
    td->add_option("--steps", td_steps);
    td->add_option("--max-samples", td_max);
    td->add_option("--granularity", td_granularity)
        ->check(CLI::IsMember({"slot", "token"}));
    td->callback([&] {
      synth::Vocabulary vocab;
      auto data = synth::load_dataset(td_data, &vocab);
      auto m = model::TokenizerModel::load(td_ckpt);
      eval::EvalOptions opt;
      opt.sample_steps = td_steps;
      opt.seed = td_seed;
      opt.max_samples = td_max;
      auto res = eval::token_drop_study(*m, data, td_fraction, td_seed, opt,
                                        td_granularity == "slot"
                                            ? eval::DropGranularity::slot
                                            : eval::DropGranularity::token);
      std::ofstream f(td_report);
      f << res.to_json().dump(2) << "\n";
      std::cout << "baseline psnr " << res.baseline.psnr << " dropped "
                << res.dropped.psnr << " rel delta " << res.psnr_rel_delta << "\n";
    });

    // ---- ablate ----
    auto* ab = app.add_subcommand("ablate", "metric table across ablation checkpoints");
    std::vector<std::string> ab_entries;
    std::string ab_recon, ab_ari, ab_report;
    int ab_steps = 100, ab_max = -1;
    std::uint64_t ab_seed = 0;
    double ab_fraction = 0.5;
    ab->add_option("--ckpt", ab_entries, "name=path, repeatable")->required();
    ab->add_option("--data", ab_recon, "reconstruction dataset")->required();
    ab->add_option("--ari-data", ab_ari, "object-discovery dataset (default: --data)");
    ab->add_option("--report", ab_report)->required();
    ab->add_option("--steps", ab_steps);
    ab->add_option("--seed", ab_seed);
    ab->add_option("--max-samples", ab_max);
    ab->add_option("--fraction", ab_fraction);
    ab->callback([&] {
      synth::Vocabulary vocab;
      auto recon_data = synth::load_dataset(ab_recon, &vocab);
      auto ari_data = ab_ari.empty() ? recon_data : synth::load_dataset(ab_ari);
      std::vector<eval::AblationEntry> entries;
      for (const auto& e : ab_entries) {
        const auto pos = e.find('=');
        if (pos == std::string::npos)
          throw std::runtime_error("--ckpt expects name=path, got " + e);
        entries.push_back({e.substr(0, pos), e.substr(pos + 1)});
      }
      eval::EvalOptions opt;
      opt.sample_steps = ab_steps;
      opt.seed = ab_seed;
      opt.max_samples = ab_max;
      auto matrix = eval::ablation_matrix(entries, recon_data, ari_data, opt, ab_fraction);
      std::ofstream f(ab_report);
      f << matrix.dump(2) << "\n";
      std::cout << eval::render_table(matrix);
    });

    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
