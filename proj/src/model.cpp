#include "sslab/model.hpp"

#include <cmath>

#include "sslab/errors.hpp"
#include "sslab/ops.hpp"

namespace sslab {

namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<Scalar> v(fan_in * fan_out);
  for (auto& x : v) {
    x = static_cast<Scalar>((2 * rng.uniform() - 1) * limit);
  }
  return Tensor::from({fan_in, fan_out}, std::move(v), true);
}

Tensor normal_table(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::vector<Scalar> v(rows * cols);
  for (auto& x : v) {
    x = static_cast<Scalar>(rng.normal() * stddev);
  }
  return Tensor::from({rows, cols}, std::move(v), true);
}

Tensor zeros_param(std::size_t n) { return Tensor::zeros({n}, true); }

LayerNormParams init_ln(std::size_t d) { return {Tensor::full({d}, 1, true), zeros_param(d)}; }

AttentionParams init_attention(std::size_t d, Rng& rng) {
  AttentionParams p;
  p.wq = xavier(d, d, rng);
  p.bq = zeros_param(d);
  p.wk = xavier(d, d, rng);
  p.bk = zeros_param(d);
  p.wv = xavier(d, d, rng);
  p.bv = zeros_param(d);
  p.wo = xavier(d, d, rng);
  p.bo = zeros_param(d);
  return p;
}

FeedForwardParams init_ffn(std::size_t d, std::size_t d_ff, Rng& rng) {
  return {xavier(d, d_ff, rng), zeros_param(d_ff), xavier(d_ff, d, rng), zeros_param(d)};
}

void add_named(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
               const LayerNormParams& p) {
  out.emplace_back(prefix + ".gamma", p.gamma);
  out.emplace_back(prefix + ".beta", p.beta);
}

void add_named(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
               const AttentionParams& p) {
  out.emplace_back(prefix + ".wq", p.wq);
  out.emplace_back(prefix + ".bq", p.bq);
  out.emplace_back(prefix + ".wk", p.wk);
  out.emplace_back(prefix + ".bk", p.bk);
  out.emplace_back(prefix + ".wv", p.wv);
  out.emplace_back(prefix + ".bv", p.bv);
  out.emplace_back(prefix + ".wo", p.wo);
  out.emplace_back(prefix + ".bo", p.bo);
}

void add_named(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
               const FeedForwardParams& p) {
  out.emplace_back(prefix + ".w1", p.w1);
  out.emplace_back(prefix + ".b1", p.b1);
  out.emplace_back(prefix + ".w2", p.w2);
  out.emplace_back(prefix + ".b2", p.b2);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return ops::linear(x, w, b); }

Tensor maybe_dropout(const Tensor& x, const ForwardOptions& opts) {
  if (!opts.dropout_active()) {
    return x;
  }
  return ops::dropout(x, static_cast<Scalar>(opts.dropout_rate), *opts.rng);
}

// Multi-head attention. `allowed` is [B, Tq, Tk].
Tensor attention(const AttentionParams& p, const Tensor& queries, const Tensor& keys_values,
                 const std::vector<std::uint8_t>& allowed, std::size_t heads) {
  const auto ctx = ops::multi_head_attention(linear(queries, p.wq, p.bq), linear(keys_values, p.wk, p.bk),
                                             linear(keys_values, p.wv, p.bv), allowed, heads);
  return linear(ctx, p.wo, p.bo);
}

Tensor feed_forward(const FeedForwardParams& p, const Tensor& x) {
  return linear(ops::relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

Tensor norm(const LayerNormParams& p, const Tensor& x) { return ops::layer_norm(x, p.gamma, p.beta); }

std::vector<std::uint8_t> padding_mask(const std::vector<std::size_t>& key_lengths, std::size_t tq,
                                       std::size_t tk) {
  std::vector<std::uint8_t> allowed(key_lengths.size() * tq * tk);
  for (std::size_t b = 0; b < key_lengths.size(); ++b) {
    for (std::size_t i = 0; i < tq; ++i) {
      for (std::size_t j = 0; j < tk; ++j) {
        allowed[(b * tq + i) * tk + j] = j < key_lengths[b];
      }
    }
  }
  return allowed;
}

std::vector<std::uint8_t> causal_mask(std::size_t batch, std::size_t t) {
  std::vector<std::uint8_t> allowed(batch * t * t);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < t; ++j) {
        allowed[(b * t + i) * t + j] = j <= i;
      }
    }
  }
  return allowed;
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("model." + field + ": " + why);
  };
  if (vocab_size_src <= static_cast<std::size_t>(kNumReserved)) {
    fail("vocab_size_src", "must exceed the 3 reserved tokens");
  }
  if (vocab_size_tgt <= static_cast<std::size_t>(kNumReserved)) {
    fail("vocab_size_tgt", "must exceed the 3 reserved tokens");
  }
  if (d_model == 0) {
    fail("d_model", "must be positive");
  }
  if (n_heads == 0 || d_model % n_heads != 0) {
    fail("n_heads", "must be positive and divide d_model");
  }
  if (d_ff == 0) {
    fail("d_ff", "must be positive");
  }
  if (!(dropout_rate >= 0 && dropout_rate < 1)) {
    fail("dropout", "must be in [0,1)");
  }
  if (max_len < 2) {
    fail("max_len", "must be at least 2");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size_src", c.vocab_size_src},
                     {"vocab_size_tgt", c.vocab_size_tgt},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"n_encoder_layers", c.n_encoder_layers},
                     {"n_decoder_layers", c.n_decoder_layers},
                     {"d_ff", c.d_ff},
                     {"dropout", c.dropout_rate},
                     {"max_len", c.max_len}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size_src = j.value("vocab_size_src", c.vocab_size_src);
  c.vocab_size_tgt = j.value("vocab_size_tgt", c.vocab_size_tgt);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_encoder_layers = j.value("n_encoder_layers", c.n_encoder_layers);
  c.n_decoder_layers = j.value("n_decoder_layers", c.n_decoder_layers);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.dropout_rate = j.value("dropout", c.dropout_rate);
  c.max_len = j.value("max_len", c.max_len);
}

ModelParams ModelParams::initialize(const ModelConfig& config, Rng& rng) {
  config.validate();
  const auto d = config.d_model;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  ModelParams p;
  p.src_embedding = normal_table(config.vocab_size_src, d, emb_std, rng);
  p.tgt_embedding = normal_table(config.vocab_size_tgt, d, emb_std, rng);
  for (std::size_t i = 0; i < config.n_encoder_layers; ++i) {
    EncoderLayerParams layer;
    layer.ln_attn = init_ln(d);
    layer.self_attn = init_attention(d, rng);
    layer.ln_ffn = init_ln(d);
    layer.ffn = init_ffn(d, config.d_ff, rng);
    p.encoder.push_back(std::move(layer));
  }
  for (std::size_t i = 0; i < config.n_decoder_layers; ++i) {
    DecoderLayerParams layer;
    layer.ln_self = init_ln(d);
    layer.self_attn = init_attention(d, rng);
    layer.ln_cross = init_ln(d);
    layer.cross_attn = init_attention(d, rng);
    layer.ln_ffn = init_ln(d);
    layer.ffn = init_ffn(d, config.d_ff, rng);
    p.decoder.push_back(std::move(layer));
  }
  p.encoder_norm = init_ln(d);
  p.decoder_norm = init_ln(d);
  p.out_w = normal_table(d, config.vocab_size_tgt, 0.02, rng);
  p.out_b = zeros_param(config.vocab_size_tgt);
  return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("src_embedding", src_embedding);
  out.emplace_back("tgt_embedding", tgt_embedding);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const auto prefix = "encoder." + std::to_string(i);
    add_named(out, prefix + ".ln_attn", encoder[i].ln_attn);
    add_named(out, prefix + ".self_attn", encoder[i].self_attn);
    add_named(out, prefix + ".ln_ffn", encoder[i].ln_ffn);
    add_named(out, prefix + ".ffn", encoder[i].ffn);
  }
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    const auto prefix = "decoder." + std::to_string(i);
    add_named(out, prefix + ".ln_self", decoder[i].ln_self);
    add_named(out, prefix + ".self_attn", decoder[i].self_attn);
    add_named(out, prefix + ".ln_cross", decoder[i].ln_cross);
    add_named(out, prefix + ".cross_attn", decoder[i].cross_attn);
    add_named(out, prefix + ".ln_ffn", decoder[i].ln_ffn);
    add_named(out, prefix + ".ffn", decoder[i].ffn);
  }
  add_named(out, "encoder_norm", encoder_norm);
  add_named(out, "decoder_norm", decoder_norm);
  out.emplace_back("out_w", out_w);
  out.emplace_back("out_b", out_b);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) {
    n += t.numel();
  }
  return n;
}

EncoderMemory EncoderMemory::select(const std::vector<std::size_t>& rows) const {
  const auto s = states.dim(1);
  const auto d = states.dim(2);
  const auto src = states.data();
  std::vector<Scalar> out(rows.size() * s * d);
  EncoderMemory m;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(src.data() + rows[i] * s * d, s * d, out.data() + i * s * d);
    m.lengths.push_back(lengths.at(rows[i]));
  }
  m.states = Tensor::from({rows.size(), s, d}, std::move(out));
  return m;
}

Tensor soft_prediction_embeddings(const Tensor& probs, const Tensor& embedding_table) {
  return ops::matmul(probs, embedding_table);
}

Transformer::Transformer(ModelConfig config, Rng& init_rng)
    : Transformer(config, ModelParams::initialize(config, init_rng)) {}

Transformer::Transformer(ModelConfig config, ModelParams params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  const auto d = config_.d_model;
  positional_.resize(config_.max_len * d);
  for (std::size_t pos = 0; pos < config_.max_len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      positional_[pos * d + i] = static_cast<Scalar>(std::sin(static_cast<double>(pos) * freq));
      if (i + 1 < d) {
        positional_[pos * d + i + 1] = static_cast<Scalar>(std::cos(static_cast<double>(pos) * freq));
      }
    }
  }
}

Tensor Transformer::positional_add(const Tensor& scaled) const {
  const auto t = scaled.dim(1);
  const auto d = scaled.dim(2);
  std::vector<Scalar> pe(positional_.begin(), positional_.begin() + static_cast<std::ptrdiff_t>(t * d));
  return ops::add(scaled, Tensor::from({t, d}, std::move(pe)));
}

EncoderMemory Transformer::encode(const TokenMatrix& src, const ForwardOptions& opts) const {
  if (src.cols > config_.max_len) {
    throw InputError("encode: source length " + std::to_string(src.cols) + " exceeds max_len " +
                     std::to_string(config_.max_len));
  }
  if (src.rows == 0 || src.cols == 0) {
    throw InputError("encode: empty source batch");
  }
  for (const auto id : src.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size_src) {
      throw InputError("encode: source token " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(config_.vocab_size_src));
    }
  }
  const auto scale = static_cast<Scalar>(std::sqrt(static_cast<double>(config_.d_model)));
  auto x = ops::embedding_lookup(params_.src_embedding, src.ids, {src.rows, src.cols});
  x = maybe_dropout(positional_add(ops::scale(x, scale)), opts);
  const auto allowed = padding_mask(src.lengths, src.cols, src.cols);
  for (const auto& layer : params_.encoder) {
    const auto h = norm(layer.ln_attn, x);
    x = ops::add(x, maybe_dropout(attention(layer.self_attn, h, h, allowed, config_.n_heads), opts));
    x = ops::add(x, maybe_dropout(feed_forward(layer.ffn, norm(layer.ln_ffn, x)), opts));
  }
  return {norm(params_.encoder_norm, x), src.lengths};
}

Tensor Transformer::embed_target(const TokenMatrix& tokens) const {
  return ops::embedding_lookup(params_.tgt_embedding, tokens.ids, {tokens.rows, tokens.cols});
}

Tensor Transformer::decode_embedded(const EncoderMemory& memory, const Tensor& input_embeddings,
                                    const std::vector<std::size_t>& lengths,
                                    const ForwardOptions& opts) const {
  const auto batch = input_embeddings.dim(0);
  const auto t = input_embeddings.dim(1);
  if (input_embeddings.rank() != 3 || input_embeddings.dim(2) != config_.d_model) {
    throw ShapeError("decode: input embeddings " + shape_str(input_embeddings.shape()) +
                     " are not [B, T, d_model]");
  }
  if (batch != memory.batch() || lengths.size() != batch) {
    throw ContractError("decode: batch size mismatch between inputs and encoder memory");
  }
  if (t > config_.max_len) {
    throw InputError("decode: target length " + std::to_string(t) + " exceeds max_len " +
                     std::to_string(config_.max_len));
  }
  const auto scale = static_cast<Scalar>(std::sqrt(static_cast<double>(config_.d_model)));
  auto y = maybe_dropout(positional_add(ops::scale(input_embeddings, scale)), opts);
  const auto self_allowed = causal_mask(batch, t);
  const auto cross_allowed = padding_mask(memory.lengths, t, memory.states.dim(1));
  for (const auto& layer : params_.decoder) {
    const auto h = norm(layer.ln_self, y);
    y = ops::add(y, maybe_dropout(attention(layer.self_attn, h, h, self_allowed, config_.n_heads), opts));
    y = ops::add(y, maybe_dropout(attention(layer.cross_attn, norm(layer.ln_cross, y), memory.states,
                                            cross_allowed, config_.n_heads),
                                  opts));
    y = ops::add(y, maybe_dropout(feed_forward(layer.ffn, norm(layer.ln_ffn, y)), opts));
  }
  return linear(norm(params_.decoder_norm, y), params_.out_w, params_.out_b);
}

DecoderOutput Transformer::finish(Tensor logits, const TokenMatrix& gold_targets) const {
  DecoderOutput out;
  out.probs = ops::softmax(logits, -1);
  out.logits = std::move(logits);
  const auto vocab = config_.vocab_size_tgt;
  const auto pv = out.probs.data();
  std::vector<Scalar> gold(gold_targets.rows * gold_targets.cols);
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const int tok = gold_targets.ids[i];
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab) {
      throw InputError("decode: target token " + std::to_string(tok) + " outside vocabulary");
    }
    gold[i] = pv[i * vocab + static_cast<std::size_t>(tok)];
  }
  out.gold_prob = Tensor::from({gold_targets.rows, gold_targets.cols}, std::move(gold));
  return out;
}

DecoderOutput Transformer::decode_pass1(const EncoderMemory& memory, const TokenMatrix& gold_inputs,
                                        const TokenMatrix& gold_targets,
                                        const ForwardOptions& opts) const {
  if (gold_inputs.rows != gold_targets.rows || gold_inputs.cols != gold_targets.cols ||
      gold_inputs.lengths != gold_targets.lengths) {
    throw ContractError("decode_pass1: decoder inputs and targets differ in shape or lengths");
  }
  for (std::size_t r = 0; r < gold_inputs.rows; ++r) {
    if (gold_inputs.lengths[r] > 0 && gold_inputs.at(r, 0) != kBos) {
      throw ContractError("decode_pass1: decoder input row " + std::to_string(r) + " does not start with BOS");
    }
  }
  auto logits = decode_embedded(memory, embed_target(gold_inputs), gold_inputs.lengths, opts);
  return finish(std::move(logits), gold_targets);
}

DecoderOutput Transformer::decode_pass2(const EncoderMemory& memory, const MixedInput& mixed,
                                        const TokenMatrix& gold_targets,
                                        const ForwardOptions& opts) const {
  const auto& sel = mixed.provenance;
  if (sel.rows != gold_targets.rows || sel.cols != gold_targets.cols || sel.lengths != gold_targets.lengths ||
      mixed.embeddings.dim(0) != sel.rows || mixed.embeddings.dim(1) != sel.cols) {
    throw ContractError("decode_pass2: mixed input and targets differ in shape or lengths");
  }
  auto logits = decode_embedded(memory, mixed.embeddings, sel.lengths, opts);
  return finish(std::move(logits), gold_targets);
}

}  // namespace sslab
