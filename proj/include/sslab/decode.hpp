#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "sslab/model.hpp"
#include "sslab/tokens.hpp"

namespace sslab {

// Log-softmax of one row of logits, accumulated in double.
std::vector<double> log_softmax_row(std::span<const Scalar> logits);

// Tokens the decoder may never emit (BOS and PAD).
bool is_banned_output(int token);

// GNMT length penalty ((5 + len) / 6)^alpha; `len` counts emitted tokens
// including the terminating EOS.
double length_penalty(std::size_t len, double alpha);

// Autoregressive argmax until EOS or `max_len` tokens, whichever comes first.
// Returned sentences exclude BOS/EOS. Ties go to the lowest token id.
std::vector<Sentence> greedy_decode(const Transformer& model, const EncoderMemory& memory,
                                    std::size_t max_len);

// Log-probabilities of the next token for each prefix (prefixes exclude BOS).
using NextTokenScorer =
    std::function<std::vector<std::vector<double>>(const std::vector<Sentence>& prefixes)>;

struct BeamOptions {
  std::size_t beam_size = 4;
  double length_penalty_alpha = 0.6;
  std::size_t max_len = 20;
};

struct BeamResult {
  Sentence tokens;  // without EOS
  double log_prob = 0;
  double score = 0;  // log_prob / length_penalty
  bool finished = false;
};

// Model-agnostic beam search. Each step ranks all expansions by raw
// log-probability; an EOS expansion ranked within the top `beam_size` retires
// with a length-normalized score, and the `beam_size` best other expansions
// stay alive. Search stops when no alive hypothesis can still beat the best
// retired score, nothing is alive, or `max_len` tokens were emitted
// (surviving hypotheses then compete unterminated). Exact search is not
// guaranteed.
BeamResult beam_search(const NextTokenScorer& scorer, std::size_t vocab, const BeamOptions& options);

// Beam search per source sentence in `memory`. Throws ConfigError when
// beam_size == 0.
std::vector<Sentence> beam_decode(const Transformer& model, const EncoderMemory& memory,
                                  const BeamOptions& options);

}  // namespace sslab
