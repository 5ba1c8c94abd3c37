#pragma once

#include <cstddef>
#include <vector>

#include "sslab/tokens.hpp"

namespace sslab {

// Corpus-level sufficient statistics: clipped n-gram matches and candidate
// n-gram totals per order, plus total candidate/reference lengths.
struct BleuStats {
  std::vector<std::size_t> matches;
  std::vector<std::size_t> totals;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;

  explicit BleuStats(std::size_t max_ngram = 4) : matches(max_ngram, 0), totals(max_ngram, 0) {}

  void add(const Sentence& candidate, const Sentence& reference);
  // Geometric mean of modified precisions times the brevity penalty, in
  // [0, 1]. Unsmoothed: any order with candidate n-grams but zero matches
  // gives 0.
  double score() const;
};

// Token-id BLEU over a single-reference corpus. Throws InputError on an
// empty corpus and ContractError on a count mismatch.
double corpus_bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references,
                   std::size_t max_ngram = 4);

}  // namespace sslab
