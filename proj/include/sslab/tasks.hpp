#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sslab/tokens.hpp"

namespace sslab {

enum class TaskVariant { Copy, Reverse, LexiconMap };

std::string to_string(TaskVariant v);
TaskVariant task_variant_from_string(const std::string& s);

struct SentencePair {
  Sentence source;
  Sentence target;

  bool operator==(const SentencePair&) const = default;
};

// Synthetic translation task. Content tokens are [3, vocab_size); the three
// reserved ids are never generated.
struct SyntheticTask {
  TaskVariant variant = TaskVariant::Reverse;
  std::size_t vocab_size = 32;
  std::size_t min_len = 5;
  std::size_t max_len = 20;
  std::size_t train_size = 10000;
  std::size_t valid_size = 1000;
  std::size_t test_size = 1000;
  std::uint64_t train_seed = 101;
  std::uint64_t valid_seed = 202;
  std::uint64_t test_seed = 303;
  std::uint64_t permutation_seed = 404;

  void validate() const;

  // LexiconMap token table: entry t is the image of token t. Reserved ids map
  // to themselves. Identity for the other variants.
  std::vector<int> permutation() const;
  Sentence target_for(const Sentence& source) const;
  Sentence target_for(const Sentence& source, const std::vector<int>& permutation) const;
};

void to_json(nlohmann::json& j, const SyntheticTask& t);
void from_json(const nlohmann::json& j, SyntheticTask& t);

struct DatasetSplits {
  std::vector<SentencePair> train;
  std::vector<SentencePair> valid;
  std::vector<SentencePair> test;
};

// Deterministic given the task seeds. Sources never repeat within or across
// splits (test is drawn first, then valid, then train).
DatasetSplits generate_task(const SyntheticTask& task);

// Model-ready view of a set of pairs.
struct Batch {
  TokenMatrix source;
  TokenMatrix target_input;   // BOS + target
  TokenMatrix target_output;  // target + EOS
};

Batch make_batch(const std::vector<SentencePair>& pairs);
Batch make_batch(const std::vector<SentencePair>& pairs, std::span<const std::size_t> indices);

// One pair per line: space-separated ids, `src ||| tgt`.
void write_dataset(const std::filesystem::path& path, const std::vector<SentencePair>& pairs);
std::vector<SentencePair> read_dataset(const std::filesystem::path& path);
std::string format_pair(const SentencePair& pair);
SentencePair parse_pair(const std::string& line);

}  // namespace sslab
