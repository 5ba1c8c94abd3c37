#include "sslab/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "sslab/errors.hpp"

namespace sslab {

namespace {

std::map<Sentence, std::size_t> ngram_counts(const Sentence& s, std::size_t n) {
  std::map<Sentence, std::size_t> counts;
  if (s.size() < n) {
    return counts;
  }
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    ++counts[Sentence(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

void BleuStats::add(const Sentence& candidate, const Sentence& reference) {
  candidate_length += candidate.size();
  reference_length += reference.size();
  for (std::size_t n = 1; n <= matches.size(); ++n) {
    const auto cand = ngram_counts(candidate, n);
    const auto ref = ngram_counts(reference, n);
    for (const auto& [gram, count] : cand) {
      totals[n - 1] += count;
      const auto it = ref.find(gram);
      if (it != ref.end()) {
        matches[n - 1] += std::min(count, it->second);
      }
    }
  }
}

double BleuStats::score() const {
  if (candidate_length == 0) {
    return reference_length == 0 ? 1.0 : 0.0;
  }
  // Orders longer than every candidate contribute no n-grams and are left
  // out of the mean, so a corpus of short sentences can still score 1.
  double log_sum = 0;
  std::size_t orders = 0;
  for (std::size_t n = 0; n < matches.size(); ++n) {
    if (totals[n] == 0) {
      continue;
    }
    if (matches[n] == 0) {
      return 0.0;
    }
    log_sum += std::log(static_cast<double>(matches[n]) / static_cast<double>(totals[n]));
    ++orders;
  }
  const double log_bp =
      candidate_length < reference_length
          ? 1.0 - static_cast<double>(reference_length) / static_cast<double>(candidate_length)
          : 0.0;
  return std::exp(log_bp + log_sum / static_cast<double>(orders));
}

double corpus_bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references,
                   std::size_t max_ngram) {
  if (candidates.size() != references.size()) {
    throw ContractError("corpus_bleu: " + std::to_string(candidates.size()) + " candidates vs " +
                        std::to_string(references.size()) + " references");
  }
  if (candidates.empty()) {
    throw InputError("corpus_bleu: empty corpus");
  }
  if (max_ngram == 0) {
    throw ConfigError("corpus_bleu: max_ngram must be >= 1");
  }
  BleuStats stats(max_ngram);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    stats.add(candidates[i], references[i]);
  }
  return stats.score();
}

}  // namespace sslab
