#include "sslab/infer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sslab/errors.hpp"

namespace sslab {

namespace {

// out[r] = x[r] W + b, one row at a time.
void affine(const Scalar* x, std::size_t rows, std::size_t in, const Tensor& w, const Tensor& b, Scalar* out) {
  const auto out_dim = w.dim(1);
  const auto* wv = w.data().data();
  const auto* bv = b.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    Scalar* o = out + r * out_dim;
    std::copy_n(bv, out_dim, o);
    const Scalar* xr = x + r * in;
    for (std::size_t k = 0; k < in; ++k) {
      const Scalar a = xr[k];
      const Scalar* wr = wv + k * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) {
        o[j] += a * wr[j];
      }
    }
  }
}

std::vector<Scalar> affine(const std::vector<Scalar>& x, std::size_t rows, const Tensor& w, const Tensor& b) {
  std::vector<Scalar> out(rows * w.dim(1));
  affine(x.data(), rows, w.dim(0), w, b, out.data());
  return out;
}

std::vector<Scalar> layer_norm(const std::vector<Scalar>& x, std::size_t d, const LayerNormParams& p) {
  constexpr Scalar eps = 1e-5;
  const auto* g = p.gamma.data().data();
  const auto* b = p.beta.data().data();
  std::vector<Scalar> out(x.size());
  for (std::size_t r = 0; r < x.size() / d; ++r) {
    const Scalar* row = x.data() + r * d;
    Scalar mu = 0;
    for (std::size_t j = 0; j < d; ++j) {
      mu += row[j];
    }
    mu /= static_cast<Scalar>(d);
    Scalar var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      var += (row[j] - mu) * (row[j] - mu);
    }
    var /= static_cast<Scalar>(d);
    const Scalar rstd = Scalar{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      out[r * d + j] = g[j] * ((row[j] - mu) * rstd) + b[j];
    }
  }
  return out;
}

// Single-query attention for one head over `n` keys.
void attend(const Scalar* q, const Scalar* keys, const Scalar* values, std::size_t n, std::size_t stride,
            std::size_t dh, Scalar scale, Scalar* out, std::vector<Scalar>& w) {
  w.resize(n);
  Scalar mx = -std::numeric_limits<Scalar>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    Scalar s = 0;
    for (std::size_t c = 0; c < dh; ++c) {
      s += q[c] * keys[j * stride + c];
    }
    w[j] = s * scale;
    mx = std::max(mx, w[j]);
  }
  Scalar z = 0;
  for (std::size_t j = 0; j < n; ++j) {
    w[j] = std::exp(w[j] - mx);
    z += w[j];
  }
  std::fill_n(out, dh, Scalar{0});
  for (std::size_t j = 0; j < n; ++j) {
    const Scalar a = w[j] / z;
    for (std::size_t c = 0; c < dh; ++c) {
      out[c] += a * values[j * stride + c];
    }
  }
}

}  // namespace

IncrementalDecoder::IncrementalDecoder(const Transformer& model, const EncoderMemory& memory)
    : model_(model),
      d_(model.config().d_model),
      heads_(model.config().n_heads),
      vocab_(model.config().vocab_size_tgt),
      src_len_(memory.states.dim(1)),
      src_lengths_(memory.lengths) {
  const auto states = memory.states.data();
  const std::vector<Scalar> mem(states.begin(), states.end());
  const auto rows = memory.batch() * src_len_;
  for (const auto& layer : model.params().decoder) {
    cross_keys_.push_back(affine(mem, rows, layer.cross_attn.wk, layer.cross_attn.bk));
    cross_values_.push_back(affine(mem, rows, layer.cross_attn.wv, layer.cross_attn.bv));
  }
}

IncrementalDecoder::State IncrementalDecoder::start(std::size_t memory_row) const {
  if (memory_row >= src_lengths_.size()) {
    throw ContractError("IncrementalDecoder::start: memory row out of range");
  }
  State s;
  s.memory_row = memory_row;
  s.keys.resize(model_.params().decoder.size());
  s.values.resize(model_.params().decoder.size());
  return s;
}

std::vector<Scalar> IncrementalDecoder::step(const std::vector<State*>& states, const std::vector<int>& tokens) const {
  const auto n = states.size();
  if (tokens.size() != n) {
    throw ContractError("IncrementalDecoder::step: one token per state required");
  }
  const auto& params = model_.params();
  const auto d = d_;
  const auto dh = d / heads_;
  const auto scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));
  const auto emb_scale = static_cast<Scalar>(std::sqrt(static_cast<double>(d)));
  const auto table = params.tgt_embedding.data();
  const auto pe = model_.positional();

  std::vector<Scalar> y(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto pos = states[i]->length;
    if (pos >= model_.config().max_len) {
      throw InputError("decode: target length exceeds max_len " + std::to_string(model_.config().max_len));
    }
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab_) {
      throw InputError("decode: target token " + std::to_string(tokens[i]) + " outside vocabulary");
    }
    for (std::size_t j = 0; j < d; ++j) {
      y[i * d + j] = table[static_cast<std::size_t>(tokens[i]) * d + j] * emb_scale + pe[pos * d + j];
    }
  }

  std::vector<Scalar> ctx(n * d);
  std::vector<Scalar> scratch;
  for (std::size_t l = 0; l < params.decoder.size(); ++l) {
    const auto& layer = params.decoder[l];
    // Self-attention over the cached prefix plus this position.
    auto h = layer_norm(y, d, layer.ln_self);
    const auto q = affine(h, n, layer.self_attn.wq, layer.self_attn.bq);
    const auto k = affine(h, n, layer.self_attn.wk, layer.self_attn.bk);
    const auto v = affine(h, n, layer.self_attn.wv, layer.self_attn.bv);
    for (std::size_t i = 0; i < n; ++i) {
      auto& keys = states[i]->keys[l];
      auto& values = states[i]->values[l];
      keys.insert(keys.end(), k.begin() + static_cast<std::ptrdiff_t>(i * d),
                  k.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      values.insert(values.end(), v.begin() + static_cast<std::ptrdiff_t>(i * d),
                    v.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      const auto len = keys.size() / d;
      for (std::size_t hd = 0; hd < heads_; ++hd) {
        attend(q.data() + i * d + hd * dh, keys.data() + hd * dh, values.data() + hd * dh, len, d, dh, scale,
               ctx.data() + i * d + hd * dh, scratch);
      }
    }
    auto o = affine(ctx, n, layer.self_attn.wo, layer.self_attn.bo);
    for (std::size_t j = 0; j < y.size(); ++j) {
      y[j] += o[j];
    }
    // Cross-attention over the valid encoder positions.
    h = layer_norm(y, d, layer.ln_cross);
    const auto qc = affine(h, n, layer.cross_attn.wq, layer.cross_attn.bq);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = states[i]->memory_row;
      const auto* keys = cross_keys_[l].data() + row * src_len_ * d;
      const auto* values = cross_values_[l].data() + row * src_len_ * d;
      // A fully masked row attends uniformly everywhere, as the graph does.
      const auto valid = src_lengths_[row] == 0 ? src_len_ : std::min(src_lengths_[row], src_len_);
      for (std::size_t hd = 0; hd < heads_; ++hd) {
        attend(qc.data() + i * d + hd * dh, keys + hd * dh, values + hd * dh, valid, d, dh, scale,
               ctx.data() + i * d + hd * dh, scratch);
      }
    }
    o = affine(ctx, n, layer.cross_attn.wo, layer.cross_attn.bo);
    for (std::size_t j = 0; j < y.size(); ++j) {
      y[j] += o[j];
    }
    // Feed-forward.
    h = layer_norm(y, d, layer.ln_ffn);
    auto f = affine(h, n, layer.ffn.w1, layer.ffn.b1);
    for (auto& x : f) {
      x = std::max(x, Scalar{0});
    }
    o = affine(f, n, layer.ffn.w2, layer.ffn.b2);
    for (std::size_t j = 0; j < y.size(); ++j) {
      y[j] += o[j];
    }
  }
  for (auto* s : states) {
    ++s->length;
  }
  return affine(layer_norm(y, d, params.decoder_norm), n, params.out_w, params.out_b);
}

}  // namespace sslab
