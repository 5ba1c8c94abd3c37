#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace sslab {

struct MetricsRun {
  std::string name;
  std::vector<nlohmann::json> records;  // step records only; event records dropped
};

// Parses JSONL text. Only newline-terminated lines are read, so a file being
// appended to is safe. Blank lines are skipped. Malformed lines throw
// InputError naming `name:line`.
MetricsRun parse_metrics(const std::string& text, const std::string& name);
MetricsRun read_metrics(const std::filesystem::path& path);

// (step, value) pairs for records where `metric` is a number.
std::vector<std::pair<std::uint64_t, double>> metric_series(const MetricsRun& run, const std::string& metric);

struct CompareRow {
  std::string name;
  std::optional<double> final_value;
  std::optional<double> final_token_acc;
  std::optional<double> final_seq_acc;
  std::optional<double> final_bleu;
  std::optional<std::uint64_t> steps_to_threshold;
  std::optional<double> speedup;  // first run's steps / this run's steps
};

struct Comparison {
  std::string metric;
  double threshold = 0;
  std::vector<CompareRow> rows;

  nlohmann::ordered_json to_json() const;
  std::string table() const;
};

// Threshold defaults to the first run's final value of `metric`.
Comparison compare_runs(const std::vector<MetricsRun>& runs, const std::string& metric,
                        std::optional<double> threshold = std::nullopt);

}  // namespace sslab
