// sslab: train / eval / compare.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sslab/checkpoint.hpp"
#include "sslab/compare.hpp"
#include "sslab/config.hpp"
#include "sslab/errors.hpp"
#include "sslab/eval.hpp"
#include "sslab/platform.hpp"
#include "sslab/run.hpp"

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

int cmd_train(const std::string& config_path, const std::vector<std::string>& extras, bool quiet) {
  std::optional<std::filesystem::path> resume;
  std::uint64_t stop_at = 0;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& a = extras[i];
    if (a == "--resume" && i + 1 < extras.size()) {
      resume = extras[++i];
    } else if (a == "--stop_at" && i + 1 < extras.size()) {
      stop_at = std::stoull(extras[++i]);
    } else if (a.rfind("--resume=", 0) == 0) {
      resume = a.substr(9);
    } else if (a.rfind("--stop_at=", 0) == 0) {
      stop_at = std::stoull(a.substr(10));
    } else {
      rest.push_back(a);
    }
  }
  auto doc = sslab::load_json_file(config_path);
  for (const auto& [key, value] : sslab::parse_override_args(rest)) {
    sslab::apply_override(doc, key, value);
  }
  const auto config = sslab::run_config_from_json(doc);
  const auto out = sslab::resolve_output_dir(config.output_dir);
  const auto result = sslab::run_experiment(config, out, resume, stop_at, quiet ? nullptr : &std::cerr);
  std::cout << "trained " << result.steps << " steps into " << out.string() << '\n';
  if (result.test_report) {
    std::cout << result.test_report->to_json().dump(2) << '\n';
  }
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& dataset_path, const std::string& decode,
             std::size_t beam_size, double length_penalty, std::size_t max_len) {
  const auto ckpt = sslab::read_checkpoint(ckpt_path);
  const auto model = sslab::model_from_checkpoint(ckpt);
  const auto pairs = sslab::read_dataset(dataset_path);
  if (pairs.empty()) {
    throw sslab::InputError(dataset_path + ": empty dataset");
  }
  std::size_t lo = 0;
  std::size_t hi = 0;
  if (ckpt.header.contains("run")) {
    const auto& task = ckpt.header.at("run").at("task");
    lo = task.at("min_len").get<std::size_t>();
    hi = task.at("max_len").get<std::size_t>();
  } else {
    lo = pairs.front().target.size();
    hi = lo;
    for (const auto& p : pairs) {
      lo = std::min(lo, p.target.size());
      hi = std::max(hi, p.target.size());
    }
  }
  sslab::DecodeSettings settings;
  settings.mode = decode == "beam" ? sslab::DecodeMode::Beam : sslab::DecodeMode::Greedy;
  settings.beam.beam_size = beam_size;
  settings.beam.length_penalty_alpha = length_penalty;
  settings.max_len = max_len;
  const auto report = sslab::evaluate(model, pairs, settings, lo, hi);
  std::cout << report.to_json().dump(2) << '\n';
  return 0;
}

int cmd_compare(const std::vector<std::string>& files, const std::string& metric, std::optional<double> threshold,
                const std::string& format, const std::string& json_path) {
  std::vector<sslab::MetricsRun> runs;
  for (const auto& f : files) {
    runs.push_back(sslab::read_metrics(f));
  }
  const auto cmp = sslab::compare_runs(runs, metric, threshold);
  const auto j = cmp.to_json();
  if (!json_path.empty()) {
    std::ofstream out(json_path);
    if (!out) {
      throw sslab::InputError("cannot write " + json_path);
    }
    out << j.dump(2) << '\n';
  }
  if (format == "json") {
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << cmp.table();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  sslab::tune_allocator();
  CLI::App app{"scheduled sampling lab: train, evaluate and compare seq2seq runs"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train from a JSON config; extra --a.b value pairs override fields");
  std::string config_path;
  bool quiet = false;
  train->add_option("config", config_path, "config file (JSON)")->required();
  train->add_flag("-q,--quiet", quiet, "do not echo metric records to stderr");
  train->allow_extras();
  train->footer("Also: --resume <checkpoint>, --stop_at <step>. Env " + std::string(sslab::kOutputRootEnv) +
                " prefixes relative output_dir values.");

  auto* eval = app.add_subcommand("eval", "decode a dataset with a checkpoint and print metrics as JSON");
  std::string ckpt_path;
  std::string dataset_path;
  std::string decode = "greedy";
  std::size_t beam_size = 4;
  double length_penalty = 0.6;
  std::size_t max_len = 0;
  eval->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
  eval->add_option("dataset", dataset_path, "dataset file, one `src ||| tgt` pair per line")->required();
  eval->add_option("--decode", decode, "greedy or beam")->check(CLI::IsMember({"greedy", "beam"}));
  eval->add_option("--beam_size", beam_size, "beam width")->check(CLI::PositiveNumber);
  eval->add_option("--length_penalty", length_penalty, "length penalty alpha");
  eval->add_option("--max_len", max_len, "output length cap (0: model limit)");

  auto* compare = app.add_subcommand("compare", "tabulate final metrics and steps-to-threshold across runs");
  std::vector<std::string> files;
  std::string metric = "val_seq_acc";
  std::optional<double> threshold;
  std::string format = "table";
  std::string json_path;
  compare->add_option("files", files, "metrics.jsonl files; the first is the baseline")->required();
  compare->add_option("--metric", metric, "metric key");
  compare->add_option("--threshold", threshold, "target value (default: baseline's final value)");
  compare->add_option("--format", format, "table or json")->check(CLI::IsMember({"table", "json"}));
  compare->add_option("--json", json_path, "also write the JSON comparison here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      return cmd_train(config_path, train->remaining(), quiet);
    }
    if (eval->parsed()) {
      return cmd_eval(ckpt_path, dataset_path, decode, beam_size, length_penalty, max_len);
    }
    return cmd_compare(files, metric, threshold, format, json_path);
  } catch (const sslab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const sslab::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}
