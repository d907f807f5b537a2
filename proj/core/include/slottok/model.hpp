#pragma once

#include <memory>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "slottok/decoder.hpp"
#include "slottok/encoder.hpp"
#include "slottok/qformer.hpp"
#include "slottok/quantizer.hpp"
#include "slottok/synthdata.hpp"

namespace slottok::model {

struct ModelConfig {
  encoder::EncoderConfig enc;
  qformer::SlotConfig qf;
  quantizer::QuantizerConfig rvq;
  decoder::DecoderConfig dec;
  encoder::ReferenceConfig ref;

  static ModelConfig desk(int text_vocab);
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

// The full tokenizer: vision encoder, slot Q-Former, residual quantizer and
// diffusion decoder, plus the frozen reference embedder used in training.
struct TokenizerModel {
  ModelConfig cfg;
  encoder::VisionEncoder enc;
  qformer::SlotQFormer qf;
  quantizer::ResidualQuantizer rvq;
  decoder::VisualDecoder dec;
  encoder::ReferenceModel ref;
  std::string stage = "init";  // init | stage1 | stage2

  TokenizerModel(const ModelConfig& c, std::uint64_t seed);

  qformer::SlotEmbeddings encode_image(const Image& img);
  quantizer::SlotTokens tokenize(const Image& img);
  Image reconstruct(const quantizer::SlotTokens& tokens, int steps, std::uint64_t seed);
  // Continuous-path reconstruction (stage-1 checkpoint, bypasses the RVQ).
  Image reconstruct_continuous(const Image& img, int steps, std::uint64_t seed);

  decoder::DecoderConditioning conditioning_from_tokens(const quantizer::SlotTokens& t);
  decoder::DecoderConditioning conditioning_from_image(const Image& img);

  void collect_all(std::vector<ad::Tensor*>& out);
  void save(const std::string& path) const;
  static std::unique_ptr<TokenizerModel> load(const std::string& path);
};

}  // namespace slottok::model
