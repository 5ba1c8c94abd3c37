#include "sslab/eval.hpp"

#include <algorithm>

#include "sslab/bleu.hpp"
#include "sslab/errors.hpp"

namespace sslab {

double sentence_token_accuracy(const Sentence& candidate, const Sentence& reference) {
  const auto denom = std::max(candidate.size(), reference.size());
  if (denom == 0) {
    return 1.0;
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(candidate.size(), reference.size()); ++i) {
    hits += candidate[i] == reference[i];
  }
  return static_cast<double>(hits) / static_cast<double>(denom);
}

std::vector<BucketMetrics> make_buckets(std::size_t min_len, std::size_t max_len) {
  if (max_len < min_len) {
    throw ConfigError("bucket range: max_len < min_len");
  }
  const auto width = std::max<std::size_t>(1, (max_len - min_len + 3) / 4);
  std::vector<BucketMetrics> buckets;
  for (std::size_t lo = min_len; lo <= max_len; lo += width) {
    BucketMetrics b;
    b.min_len = lo;
    b.max_len = std::min(max_len, lo + width - 1);
    buckets.push_back(b);
  }
  return buckets;
}

EvalReport score_corpus(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references,
                        std::size_t min_len, std::size_t max_len) {
  if (candidates.size() != references.size()) {
    throw ContractError("score_corpus: candidate and reference counts differ");
  }
  if (candidates.empty()) {
    throw InputError("score_corpus: empty corpus");
  }
  EvalReport report;
  report.count = candidates.size();
  report.buckets = make_buckets(min_len, max_len);
  std::vector<std::vector<std::size_t>> members(report.buckets.size());
  double token_sum = 0;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    token_sum += sentence_token_accuracy(candidates[i], references[i]);
    exact += candidates[i] == references[i];
    const auto len = std::clamp(references[i].size(), min_len, max_len);
    const auto width = report.buckets.front().max_len - report.buckets.front().min_len + 1;
    members[(len - min_len) / width].push_back(i);
  }
  const auto n = static_cast<double>(report.count);
  report.token_accuracy = token_sum / n;
  report.sequence_accuracy = static_cast<double>(exact) / n;
  report.bleu = corpus_bleu(candidates, references);
  for (std::size_t b = 0; b < report.buckets.size(); ++b) {
    auto& bucket = report.buckets[b];
    bucket.count = members[b].size();
    if (bucket.count == 0) {
      continue;
    }
    std::vector<Sentence> cands;
    std::vector<Sentence> refs;
    double tok = 0;
    std::size_t ex = 0;
    for (const auto i : members[b]) {
      cands.push_back(candidates[i]);
      refs.push_back(references[i]);
      tok += sentence_token_accuracy(candidates[i], references[i]);
      ex += candidates[i] == references[i];
    }
    bucket.token_accuracy = tok / static_cast<double>(bucket.count);
    bucket.sequence_accuracy = static_cast<double>(ex) / static_cast<double>(bucket.count);
    bucket.bleu = corpus_bleu(cands, refs);
  }
  return report;
}

std::vector<Sentence> decode_sources(const Transformer& model, const std::vector<SentencePair>& pairs,
                                     const DecodeSettings& settings) {
  const auto max_len = settings.max_len ? settings.max_len : model.config().max_len - 1;
  const auto chunk = std::max<std::size_t>(1, settings.batch_size);
  std::vector<Sentence> out;
  out.reserve(pairs.size());
  NoGradGuard no_grad;
  for (std::size_t start = 0; start < pairs.size(); start += chunk) {
    std::vector<Sentence> sources;
    for (std::size_t i = start; i < std::min(pairs.size(), start + chunk); ++i) {
      sources.push_back(pairs[i].source);
    }
    const auto memory = model.encode(TokenMatrix::from_rows(sources), ForwardOptions::inference());
    std::vector<Sentence> decoded;
    if (settings.mode == DecodeMode::Greedy) {
      decoded = greedy_decode(model, memory, max_len);
    } else {
      auto beam = settings.beam;
      beam.max_len = max_len;
      decoded = beam_decode(model, memory, beam);
    }
    for (auto& s : decoded) {
      out.push_back(std::move(s));
    }
  }
  return out;
}

EvalReport evaluate(const Transformer& model, const std::vector<SentencePair>& pairs,
                    const DecodeSettings& settings, std::size_t min_len, std::size_t max_len) {
  std::vector<Sentence> refs;
  refs.reserve(pairs.size());
  for (const auto& p : pairs) {
    refs.push_back(p.target);
  }
  return score_corpus(decode_sources(model, pairs, settings), refs, min_len, max_len);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json buckets_json = nlohmann::json::array();
  for (const auto& b : buckets) {
    buckets_json.push_back({{"min_len", b.min_len},
                            {"max_len", b.max_len},
                            {"count", b.count},
                            {"token_acc", b.token_accuracy},
                            {"seq_acc", b.sequence_accuracy},
                            {"bleu", b.bleu * 100}});
  }
  return {{"count", count},
          {"token_acc", token_accuracy},
          {"seq_acc", sequence_accuracy},
          {"bleu", bleu * 100},
          {"buckets", buckets_json}};
}

}  // namespace sslab
