#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <span>
#include <vector>

#include <json.hpp>

#include "sslab/rng.hpp"
#include "sslab/selection.hpp"
#include "sslab/tensor.hpp"
#include "sslab/tokens.hpp"

namespace sslab {

struct ModelConfig {
  std::size_t vocab_size_src = 32;
  std::size_t vocab_size_tgt = 32;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_encoder_layers = 2;
  std::size_t n_decoder_layers = 2;
  std::size_t d_ff = 256;
  double dropout_rate = 0.1;
  // Longest sequence either side accepts, BOS included on the decoder side.
  std::size_t max_len = 32;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayerParams {
  LayerNormParams ln_attn;
  AttentionParams self_attn;
  LayerNormParams ln_ffn;
  FeedForwardParams ffn;
};

struct DecoderLayerParams {
  LayerNormParams ln_self;
  AttentionParams self_attn;
  LayerNormParams ln_cross;
  AttentionParams cross_attn;
  LayerNormParams ln_ffn;
  FeedForwardParams ffn;
};

// The single parameter store. Both decoding passes read these tensors.
struct ModelParams {
  Tensor src_embedding;  // [V_src, d]
  Tensor tgt_embedding;  // [V_tgt, d]
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  LayerNormParams encoder_norm;
  LayerNormParams decoder_norm;
  Tensor out_w;  // [d, V_tgt]
  Tensor out_b;  // [V_tgt]

  static ModelParams initialize(const ModelConfig& config, Rng& rng);

  // Stable, checkpoint-facing names in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::size_t parameter_count() const;
};

struct ForwardOptions {
  bool train = false;
  double dropout_rate = 0;
  Rng* rng = nullptr;

  static ForwardOptions inference() { return {}; }
  static ForwardOptions training(double rate, Rng& rng) { return {true, rate, &rng}; }
  bool dropout_active() const { return train && dropout_rate > 0; }
};

struct EncoderMemory {
  Tensor states;  // [B, S, d]
  std::vector<std::size_t> lengths;

  std::size_t batch() const { return lengths.size(); }
  // Rows gathered (repeats allowed) into a new memory without history.
  EncoderMemory select(const std::vector<std::size_t>& rows) const;
  EncoderMemory detach() const { return {states.detach(), lengths}; }
};

struct DecoderOutput {
  Tensor logits;     // [B, T, V]
  Tensor probs;      // softmax(logits)
  Tensor gold_prob;  // [B, T], probs[b, t, target[b, t]]
};

// Decoder inputs for the second pass: one embedding per position together
// with where each came from.
struct MixedInput {
  Tensor embeddings;  // [B, T, d]
  TokenSelection provenance;
};

// probs [B, T, V] times the target embedding table [V, d].
Tensor soft_prediction_embeddings(const Tensor& probs, const Tensor& embedding_table);

class Transformer {
 public:
  Transformer(ModelConfig config, Rng& init_rng);
  Transformer(ModelConfig config, ModelParams params);

  const ModelConfig& config() const { return config_; }
  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }

  EncoderMemory encode(const TokenMatrix& src, const ForwardOptions& opts) const;

  // Teacher-forced decoder run on gold inputs (BOS-shifted), probabilities
  // scored against the unshifted targets.
  DecoderOutput decode_pass1(const EncoderMemory& memory, const TokenMatrix& gold_inputs,
                             const TokenMatrix& gold_targets, const ForwardOptions& opts) const;

  // Same decoder, same parameters, fed with mixed input embeddings.
  DecoderOutput decode_pass2(const EncoderMemory& memory, const MixedInput& mixed,
                             const TokenMatrix& gold_targets, const ForwardOptions& opts) const;

  // Decoder over already-embedded inputs [B, T, d] (pre scaling and
  // positional encoding). Returns logits [B, T, V].
  Tensor decode_embedded(const EncoderMemory& memory, const Tensor& input_embeddings,
                         const std::vector<std::size_t>& lengths, const ForwardOptions& opts) const;

  Tensor embed_target(const TokenMatrix& tokens) const;

  // Sinusoidal table [max_len, d_model].
  std::span<const Scalar> positional() const { return positional_; }

 private:
  Tensor positional_add(const Tensor& scaled) const;
  DecoderOutput finish(Tensor logits, const TokenMatrix& gold_targets) const;

  ModelConfig config_;
  ModelParams params_;
  std::vector<Scalar> positional_;  // [max_len, d]
};

}  // namespace sslab
