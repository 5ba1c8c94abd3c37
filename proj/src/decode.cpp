#include "sslab/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "sslab/errors.hpp"
#include "sslab/infer.hpp"

namespace sslab {

namespace {

std::size_t output_limit(const Transformer& model, std::size_t max_len) {
  // The decoder input is BOS plus everything emitted so far.
  return std::min(max_len, model.config().max_len - 1);
}

}  // namespace

std::vector<double> log_softmax_row(std::span<const Scalar> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto v : logits) {
    mx = std::max(mx, static_cast<double>(v));
  }
  double z = 0;
  for (const auto v : logits) {
    z += std::exp(static_cast<double>(v) - mx);
  }
  const double log_z = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = static_cast<double>(logits[i]) - log_z;
  }
  return out;
}

bool is_banned_output(int token) { return token == kBos || token == kPad; }

double length_penalty(std::size_t len, double alpha) {
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

std::vector<Sentence> greedy_decode(const Transformer& model, const EncoderMemory& memory,
                                    std::size_t max_len) {
  const auto limit = output_limit(model, max_len);
  const auto batch = memory.batch();
  const IncrementalDecoder decoder(model, memory);
  const auto vocab = decoder.vocab();
  std::vector<Sentence> out(batch);
  std::vector<IncrementalDecoder::State> states;
  std::vector<std::size_t> active(batch);
  std::vector<int> last(batch, kBos);
  for (std::size_t r = 0; r < batch; ++r) {
    states.push_back(decoder.start(r));
    active[r] = r;
  }
  for (std::size_t step = 0; step < limit && !active.empty(); ++step) {
    std::vector<IncrementalDecoder::State*> ptrs;
    std::vector<int> tokens;
    for (const auto r : active) {
      ptrs.push_back(&states[r]);
      tokens.push_back(last[r]);
    }
    const auto logits = decoder.step(ptrs, tokens);
    std::vector<std::size_t> still_active;
    for (std::size_t i = 0; i < active.size(); ++i) {
      const auto log_probs = log_softmax_row(std::span<const Scalar>(logits).subspan(i * vocab, vocab));
      int best = -1;
      for (std::size_t v = 0; v < vocab; ++v) {
        const int tok = static_cast<int>(v);
        if (!is_banned_output(tok) && (best < 0 || log_probs[v] > log_probs[static_cast<std::size_t>(best)])) {
          best = tok;
        }
      }
      if (best == kEos) {
        continue;
      }
      out[active[i]].push_back(best);
      last[active[i]] = best;
      still_active.push_back(active[i]);
    }
    active = std::move(still_active);
  }
  return out;
}

BeamResult beam_search(const NextTokenScorer& scorer, std::size_t vocab, const BeamOptions& options) {
  if (options.beam_size == 0) {
    throw ConfigError("beam_size must be >= 1");
  }
  struct Hyp {
    Sentence tokens;
    double log_prob;
  };
  struct Candidate {
    std::size_t parent;
    int token;
    double log_prob;
  };
  std::vector<Hyp> alive{{{}, 0.0}};
  std::vector<BeamResult> finished;
  for (std::size_t step = 0; step < options.max_len && !alive.empty(); ++step) {
    std::vector<Sentence> prefixes;
    prefixes.reserve(alive.size());
    for (const auto& h : alive) {
      prefixes.push_back(h.tokens);
    }
    const auto log_probs = scorer(prefixes);
    std::vector<Candidate> candidates;
    candidates.reserve(alive.size() * vocab);
    for (std::size_t h = 0; h < alive.size(); ++h) {
      for (std::size_t v = 0; v < vocab; ++v) {
        if (!is_banned_output(static_cast<int>(v))) {
          candidates.push_back({h, static_cast<int>(v), alive[h].log_prob + log_probs[h][v]});
        }
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.log_prob > b.log_prob; });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < candidates.size() && next.size() < options.beam_size; ++i) {
      const auto& c = candidates[i];
      if (c.token == kEos) {
        if (i < options.beam_size) {
          const auto len = alive[c.parent].tokens.size() + 1;
          finished.push_back({alive[c.parent].tokens, c.log_prob,
                              c.log_prob / length_penalty(len, options.length_penalty_alpha), true});
        }
        continue;
      }
      auto tokens = alive[c.parent].tokens;
      tokens.push_back(c.token);
      next.push_back({std::move(tokens), c.log_prob});
    }
    alive = std::move(next);
    if (finished.empty() || alive.empty()) {
      continue;
    }
    // Log-probabilities only fall as a hypothesis grows, so an alive one can
    // at best reach log_prob / penalty(max_len).
    double best_done = -std::numeric_limits<double>::infinity();
    for (const auto& f : finished) {
      best_done = std::max(best_done, f.score);
    }
    const double widest = length_penalty(options.max_len, options.length_penalty_alpha);
    double best_alive = -std::numeric_limits<double>::infinity();
    for (const auto& h : alive) {
      best_alive = std::max(best_alive, h.log_prob / widest);
    }
    if (best_done >= best_alive) {
      alive.clear();
    }
  }
  for (auto& h : alive) {
    const auto len = h.tokens.size();
    finished.push_back({std::move(h.tokens), h.log_prob,
                        h.log_prob / length_penalty(len, options.length_penalty_alpha), false});
  }
  if (finished.empty()) {
    return {};
  }
  const auto best = std::max_element(finished.begin(), finished.end(),
                                     [](const BeamResult& a, const BeamResult& b) { return a.score < b.score; });
  return *best;
}

std::vector<Sentence> beam_decode(const Transformer& model, const EncoderMemory& memory,
                                  const BeamOptions& options) {
  if (options.beam_size == 0) {
    throw ConfigError("beam_size must be >= 1");
  }
  BeamOptions opts = options;
  opts.max_len = output_limit(model, options.max_len);
  std::vector<Sentence> out;
  out.reserve(memory.batch());
  const IncrementalDecoder decoder(model, memory);
  const auto vocab = decoder.vocab();
  for (std::size_t b = 0; b < memory.batch(); ++b) {
    // States of the previous step's prefixes, extended by one token per call.
    std::map<Sentence, IncrementalDecoder::State> cache;
    const NextTokenScorer scorer = [&](const std::vector<Sentence>& prefixes) {
      std::vector<IncrementalDecoder::State> states;
      std::vector<int> tokens;
      states.reserve(prefixes.size());
      for (const auto& p : prefixes) {
        if (p.empty()) {
          states.push_back(decoder.start(b));
          tokens.push_back(kBos);
          continue;
        }
        const auto parent = cache.find(Sentence(p.begin(), p.end() - 1));
        if (parent == cache.end()) {
          throw ContractError("beam_decode: prefix extends an unknown hypothesis");
        }
        states.push_back(parent->second);
        tokens.push_back(p.back());
      }
      std::vector<IncrementalDecoder::State*> ptrs;
      for (auto& s : states) {
        ptrs.push_back(&s);
      }
      const auto logits = decoder.step(ptrs, tokens);
      std::map<Sentence, IncrementalDecoder::State> next;
      std::vector<std::vector<double>> out_lp;
      for (std::size_t i = 0; i < prefixes.size(); ++i) {
        out_lp.push_back(log_softmax_row(std::span<const Scalar>(logits).subspan(i * vocab, vocab)));
        next.emplace(prefixes[i], std::move(states[i]));
      }
      cache = std::move(next);
      return out_lp;
    };
    out.push_back(beam_search(scorer, vocab, opts).tokens);
  }
  return out;
}

}  // namespace sslab
