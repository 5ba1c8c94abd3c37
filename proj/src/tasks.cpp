#include "sslab/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "sslab/errors.hpp"
#include "sslab/rng.hpp"

namespace sslab {

std::string to_string(TaskVariant v) {
  switch (v) {
    case TaskVariant::Copy:
      return "copy";
    case TaskVariant::Reverse:
      return "reverse";
    case TaskVariant::LexiconMap:
      return "lexicon_map";
  }
  return "?";
}

TaskVariant task_variant_from_string(const std::string& s) {
  for (const auto v : {TaskVariant::Copy, TaskVariant::Reverse, TaskVariant::LexiconMap}) {
    if (to_string(v) == s) {
      return v;
    }
  }
  throw ConfigError("task.variant: unknown task '" + s + "' (copy, reverse, lexicon_map)");
}

void SyntheticTask::validate() const {
  if (vocab_size <= static_cast<std::size_t>(kNumReserved)) {
    throw ConfigError("task.vocab_size: must exceed the 3 reserved tokens");
  }
  if (min_len < 1) {
    throw ConfigError("task.min_len: must be >= 1");
  }
  if (max_len < min_len) {
    throw ConfigError("task.max_len: must be >= task.min_len");
  }
  if (train_size == 0) {
    throw ConfigError("task.train_size: must be positive");
  }
}

std::vector<int> SyntheticTask::permutation() const {
  std::vector<int> table(vocab_size);
  for (std::size_t i = 0; i < vocab_size; ++i) {
    table[i] = static_cast<int>(i);
  }
  if (variant != TaskVariant::LexiconMap) {
    return table;
  }
  Rng rng(permutation_seed);
  // Fisher-Yates over the content range only.
  for (std::size_t i = vocab_size - 1; i > static_cast<std::size_t>(kNumReserved); --i) {
    const auto span = i - static_cast<std::size_t>(kNumReserved) + 1;
    const auto j = static_cast<std::size_t>(kNumReserved) + rng.uniform_int(span);
    std::swap(table[i], table[j]);
  }
  return table;
}

Sentence SyntheticTask::target_for(const Sentence& source) const { return target_for(source, permutation()); }

Sentence SyntheticTask::target_for(const Sentence& source, const std::vector<int>& perm) const {
  switch (variant) {
    case TaskVariant::Copy:
      return source;
    case TaskVariant::Reverse:
      return Sentence(source.rbegin(), source.rend());
    case TaskVariant::LexiconMap: {
      Sentence out(source.size());
      std::transform(source.begin(), source.end(), out.begin(),
                     [&](int t) { return perm.at(static_cast<std::size_t>(t)); });
      return out;
    }
  }
  return source;
}

void to_json(nlohmann::json& j, const SyntheticTask& t) {
  j = nlohmann::json{{"variant", to_string(t.variant)},
                     {"vocab_size", t.vocab_size},
                     {"min_len", t.min_len},
                     {"max_len", t.max_len},
                     {"train_size", t.train_size},
                     {"valid_size", t.valid_size},
                     {"test_size", t.test_size},
                     {"train_seed", t.train_seed},
                     {"valid_seed", t.valid_seed},
                     {"test_seed", t.test_seed},
                     {"permutation_seed", t.permutation_seed}};
}

void from_json(const nlohmann::json& j, SyntheticTask& t) {
  t.variant = task_variant_from_string(j.value("variant", to_string(t.variant)));
  t.vocab_size = j.value("vocab_size", t.vocab_size);
  t.min_len = j.value("min_len", t.min_len);
  t.max_len = j.value("max_len", t.max_len);
  t.train_size = j.value("train_size", t.train_size);
  t.valid_size = j.value("valid_size", t.valid_size);
  t.test_size = j.value("test_size", t.test_size);
  t.train_seed = j.value("train_seed", t.train_seed);
  t.valid_seed = j.value("valid_seed", t.valid_seed);
  t.test_seed = j.value("test_seed", t.test_seed);
  t.permutation_seed = j.value("permutation_seed", t.permutation_seed);
}

DatasetSplits generate_task(const SyntheticTask& task) {
  task.validate();
  const auto perm = task.permutation();
  const auto content = task.vocab_size - static_cast<std::size_t>(kNumReserved);
  std::set<Sentence> seen;
  auto draw = [&](std::size_t count, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<SentencePair> out;
    out.reserve(count);
    std::size_t attempts = 0;
    while (out.size() < count) {
      if (++attempts > 100 * count + 1000) {
        throw ConfigError("task: cannot draw " + std::to_string(count) +
                          " distinct sentences; enlarge vocab_size or the length range");
      }
      const auto len = task.min_len + rng.uniform_int(task.max_len - task.min_len + 1);
      Sentence src(len);
      for (auto& t : src) {
        t = kNumReserved + static_cast<int>(rng.uniform_int(content));
      }
      if (!seen.insert(src).second) {
        continue;
      }
      auto tgt = task.target_for(src, perm);
      out.push_back({std::move(src), std::move(tgt)});
    }
    return out;
  };
  DatasetSplits splits;
  splits.test = draw(task.test_size, task.test_seed);
  splits.valid = draw(task.valid_size, task.valid_seed);
  splits.train = draw(task.train_size, task.train_seed);
  return splits;
}

Batch make_batch(const std::vector<SentencePair>& pairs) {
  std::vector<std::size_t> all(pairs.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    all[i] = i;
  }
  return make_batch(pairs, all);
}

Batch make_batch(const std::vector<SentencePair>& pairs, std::span<const std::size_t> indices) {
  std::vector<Sentence> src;
  std::vector<Sentence> tin;
  std::vector<Sentence> tout;
  for (const auto i : indices) {
    const auto& p = pairs.at(i);
    src.push_back(p.source);
    Sentence in{kBos};
    in.insert(in.end(), p.target.begin(), p.target.end());
    tin.push_back(std::move(in));
    Sentence out = p.target;
    out.push_back(kEos);
    tout.push_back(std::move(out));
  }
  return {TokenMatrix::from_rows(src), TokenMatrix::from_rows(tin), TokenMatrix::from_rows(tout)};
}

std::string format_pair(const SentencePair& pair) {
  std::ostringstream out;
  for (std::size_t i = 0; i < pair.source.size(); ++i) {
    out << (i ? " " : "") << pair.source[i];
  }
  out << " |||";
  for (const auto t : pair.target) {
    out << ' ' << t;
  }
  return out.str();
}

SentencePair parse_pair(const std::string& line) {
  const auto sep = line.find("|||");
  if (sep == std::string::npos) {
    throw InputError("missing '|||' separator");
  }
  auto parse = [](const std::string& part) {
    std::istringstream in(part);
    Sentence s;
    std::string tok;
    while (in >> tok) {
      std::size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || v < 0) {
        throw InputError("invalid token id '" + tok + "'");
      }
      s.push_back(v);
    }
    return s;
  };
  return {parse(line.substr(0, sep)), parse(line.substr(sep + 3))};
}

void write_dataset(const std::filesystem::path& path, const std::vector<SentencePair>& pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw InputError("cannot write dataset " + path.string());
  }
  for (const auto& p : pairs) {
    out << format_pair(p) << '\n';
  }
}

std::vector<SentencePair> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw InputError("cannot open dataset " + path.string());
  }
  std::vector<SentencePair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    try {
      pairs.push_back(parse_pair(line));
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return pairs;
}

}  // namespace sslab
