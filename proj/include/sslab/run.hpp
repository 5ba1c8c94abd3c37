#pragma once

#include <filesystem>
#include <optional>
#include <ostream>

#include <json.hpp>

#include "sslab/config.hpp"
#include "sslab/eval.hpp"

namespace sslab {

struct RunResult {
  std::filesystem::path output_dir;
  std::uint64_t steps = 0;
  std::optional<EvalReport> test_report;
};

// Full training run into `output_dir`:
//   resolved_config.json   written before training starts
//   data/{train,valid,test}.txt
//   metrics.jsonl          one record per logged step, plus the phase marker
//   checkpoints/step_<n>.ckpt every checkpoint_every steps, final.ckpt at the end
//   test_report.json       unless train.final_decode is "none"
// With `resume`, training continues from that checkpoint and metrics.jsonl is
// rewritten from its history first. `stop_at` ends early (for resumption).
// A non-finite step writes diagnostics.txt and rethrows the NumericError.
RunResult run_experiment(const RunConfig& config, const std::filesystem::path& output_dir,
                         const std::optional<std::filesystem::path>& resume = std::nullopt,
                         std::uint64_t stop_at = 0, std::ostream* log = nullptr);

}  // namespace sslab
