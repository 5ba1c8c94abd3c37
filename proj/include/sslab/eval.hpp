#pragma once

#include <cstddef>
#include <vector>

#include <json.hpp>

#include "sslab/decode.hpp"
#include "sslab/model.hpp"
#include "sslab/tasks.hpp"

namespace sslab {

enum class DecodeMode { Greedy, Beam };

struct DecodeSettings {
  DecodeMode mode = DecodeMode::Greedy;
  BeamOptions beam{4, 0.6, 0};
  // Output length cap; 0 means the model's limit (max_len - 1).
  std::size_t max_len = 0;
  std::size_t batch_size = 100;
};

struct BucketMetrics {
  std::size_t min_len = 0;
  std::size_t max_len = 0;
  std::size_t count = 0;
  double token_accuracy = 0;
  double sequence_accuracy = 0;
  double bleu = 0;  // in [0, 1]
};

struct EvalReport {
  std::size_t count = 0;
  double token_accuracy = 0;
  double sequence_accuracy = 0;
  double bleu = 0;  // in [0, 1]; to_json reports it x100
  std::vector<BucketMetrics> buckets;

  nlohmann::json to_json() const;
};

// Position-wise matches over max(|candidate|, |reference|); 1 for two empty
// sentences.
double sentence_token_accuracy(const Sentence& candidate, const Sentence& reference);

// Bucket edges over [min_len, max_len] with width ceil((max_len - min_len) / 4)
// (at least 1). Lengths outside the range are clamped to the end buckets.
std::vector<BucketMetrics> make_buckets(std::size_t min_len, std::size_t max_len);

// Metrics of decoded candidates against references, bucketed by reference
// length. Token accuracy is the per-sentence mean, so it is never below the
// exact-match rate.
EvalReport score_corpus(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references,
                        std::size_t min_len, std::size_t max_len);

std::vector<Sentence> decode_sources(const Transformer& model, const std::vector<SentencePair>& pairs,
                                     const DecodeSettings& settings);

// Decodes every source with the frozen model and scores against targets.
EvalReport evaluate(const Transformer& model, const std::vector<SentencePair>& pairs,
                    const DecodeSettings& settings, std::size_t min_len, std::size_t max_len);

}  // namespace sslab
