#include "sslab/run.hpp"

#include <fstream>

#include "sslab/checkpoint.hpp"
#include "sslab/errors.hpp"
#include "sslab/train.hpp"

namespace sslab {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw InputError("cannot write " + path.string());
  }
  out << text;
}

}  // namespace

RunResult run_experiment(const RunConfig& config, const std::filesystem::path& output_dir,
                         const std::optional<std::filesystem::path>& resume, std::uint64_t stop_at,
                         std::ostream* log) {
  config.validate();
  namespace fs = std::filesystem;
  fs::create_directories(output_dir / "data");
  fs::create_directories(output_dir / "checkpoints");
  write_text(output_dir / "resolved_config.json", config.to_json().dump(2) + "\n");

  const auto data = generate_task(config.task);
  write_dataset(output_dir / "data" / "train.txt", data.train);
  write_dataset(output_dir / "data" / "valid.txt", data.valid);
  write_dataset(output_dir / "data" / "test.txt", data.test);

  std::optional<TrainState> restored;
  if (resume) {
    const auto ckpt = read_checkpoint(*resume);
    restored.emplace(restore_train_state(ckpt));
    auto saved = run_config_from_json(ckpt.header.at("run"));
    saved.output_dir = config.output_dir;
    if (saved.to_json() != config.to_json()) {
      throw ConfigError("resume checkpoint " + resume->string() + " was written by a different config");
    }
  }
  TrainState state = restored ? std::move(*restored) : init_train_state(config);

  const auto metrics_path = output_dir / "metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
  if (!metrics) {
    throw InputError("cannot write " + metrics_path.string());
  }
  for (const auto& rec : state.history) {
    metrics << rec.dump() << '\n';
  }
  metrics.flush();

  RunHooks hooks;
  hooks.on_record = [&](const nlohmann::ordered_json& rec) {
    metrics << rec.dump() << '\n';
    metrics.flush();
    if (log != nullptr) {
      *log << rec.dump() << '\n';
    }
  };
  hooks.on_checkpoint = [&](const TrainState& s) {
    write_checkpoint(output_dir / "checkpoints" / ("step_" + std::to_string(s.step) + ".ckpt"),
                     train_checkpoint(s, config));
  };

  try {
    pretrain_then_schedule(state, config, data, hooks, stop_at);
  } catch (const NumericError& e) {
    write_text(output_dir / "diagnostics.txt", std::string(e.what()) + "\n");
    throw;
  }
  write_checkpoint(output_dir / "checkpoints" / "final.ckpt", train_checkpoint(state, config));

  RunResult result{output_dir, state.step, std::nullopt};
  const bool finished = state.step == config.train.phase1_steps + config.train.phase2_steps;
  if (finished && config.train.final_decode != "none" && !data.test.empty()) {
    DecodeSettings settings;
    settings.mode = config.train.final_decode == "beam" ? DecodeMode::Beam : DecodeMode::Greedy;
    result.test_report = evaluate(state.model, data.test, settings, config.task.min_len, config.task.max_len);
    auto j = result.test_report->to_json();
    j["decode"] = config.train.final_decode;
    write_text(output_dir / "test_report.json", j.dump(2) + "\n");
  }
  return result;
}

}  // namespace sslab
