#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sslab/model.hpp"
#include "sslab/schedule.hpp"
#include "sslab/tasks.hpp"

namespace sslab {

struct TrainConfig {
  std::uint64_t phase1_steps = 2000;  // teacher forcing
  std::uint64_t phase2_steps = 8000;  // configured schedule
  std::size_t batch_size = 64;
  std::size_t warmup = 4000;
  double lr_scale = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  double label_smoothing = 0.1;
  double clip_norm = 1.0;  // 0 disables clipping
  std::uint64_t log_every = 50;
  std::uint64_t val_every = 200;
  std::uint64_t checkpoint_every = 0;  // 0: only the final checkpoint
  bool detach_pass1 = true;
  bool pass1_dropout = true;
  bool record_wallclock = false;
  std::string final_decode = "beam";  // test-split report after training: beam, greedy or none

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Everything a run depends on. `resolved()` fills derived fields so that the
// echoed config reproduces the run on its own.
struct RunConfig {
  SyntheticTask task;
  ModelConfig model;
  ScheduleConfig schedule;
  TrainConfig train;
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";

  void validate() const;
  nlohmann::json to_json() const;
};

// Parses a config document. Missing fields take defaults; model vocab sizes
// default to the task vocabulary and model.max_len to task.max_len + 1.
// Errors are ConfigError with the dotted field path.
RunConfig run_config_from_json(const nlohmann::json& j);

// Applies `--a.b.c value` style overrides to a config document. Values are
// parsed as JSON when possible, otherwise taken as strings.
void apply_override(nlohmann::json& doc, const std::string& dotted_path, const std::string& value);

// Parses `--key value` pairs (also `--key=value`).
std::vector<std::pair<std::string, std::string>> parse_override_args(const std::vector<std::string>& args);

nlohmann::json load_json_file(const std::filesystem::path& path);

// Seed derivation, echoed into the resolved config.
nlohmann::json rng_stream_description(std::uint64_t master_seed);

// Output root override: relative output_dir values resolve against this
// variable when it is set.
inline constexpr const char* kOutputRootEnv = "SSLAB_OUTPUT_ROOT";
std::filesystem::path resolve_output_dir(const std::string& output_dir);

}  // namespace sslab
