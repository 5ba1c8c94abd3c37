#include "sslab/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "sslab/errors.hpp"
#include "sslab/rng.hpp"

namespace sslab {

namespace {

template <typename T>
T field(const nlohmann::json& j, const std::string& section, const char* key, T fallback) {
  if (!j.contains(key)) {
    return fallback;
  }
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(section + "." + key + ": wrong type (" + j.at(key).dump() + ")");
  }
}

void reject_unknown(const nlohmann::json& j, const std::string& section, std::initializer_list<const char*> known) {
  if (!j.is_object()) {
    throw ConfigError(section + ": expected an object");
  }
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const auto* k : known) {
      ok = ok || key == k;
    }
    if (!ok) {
      throw ConfigError((section.empty() ? "" : section + ".") + key + ": unknown field");
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) {
    throw ConfigError("train.batch_size: must be positive");
  }
  if (warmup == 0) {
    throw ConfigError("train.warmup: must be positive");
  }
  if (!(lr_scale > 0)) {
    throw ConfigError("train.lr_scale: must be positive");
  }
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1) || !(adam_eps > 0)) {
    throw ConfigError("train.adam_*: betas must be in [0,1) and eps positive");
  }
  if (!(label_smoothing >= 0 && label_smoothing < 1)) {
    throw ConfigError("train.label_smoothing: must be in [0,1)");
  }
  if (!(clip_norm >= 0)) {
    throw ConfigError("train.clip_norm: must be >= 0");
  }
  if (final_decode != "beam" && final_decode != "greedy" && final_decode != "none") {
    throw ConfigError("train.final_decode: expected beam, greedy or none, got '" + final_decode + "'");
  }
  if (log_every == 0 || val_every == 0) {
    throw ConfigError("train.log_every/val_every: must be positive");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"phase1_steps", c.phase1_steps},
                     {"phase2_steps", c.phase2_steps},
                     {"batch_size", c.batch_size},
                     {"warmup", c.warmup},
                     {"lr_scale", c.lr_scale},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"label_smoothing", c.label_smoothing},
                     {"clip_norm", c.clip_norm},
                     {"log_every", c.log_every},
                     {"val_every", c.val_every},
                     {"checkpoint_every", c.checkpoint_every},
                     {"detach_pass1", c.detach_pass1},
                     {"pass1_dropout", c.pass1_dropout},
                     {"record_wallclock", c.record_wallclock},
                     {"final_decode", c.final_decode}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const std::string s = "train";
  reject_unknown(j, s,
                 {"phase1_steps", "phase2_steps", "batch_size", "warmup", "lr_scale", "adam_beta1", "adam_beta2",
                  "adam_eps", "label_smoothing", "clip_norm", "log_every", "val_every", "checkpoint_every",
                  "detach_pass1", "pass1_dropout", "record_wallclock", "final_decode"});
  c.phase1_steps = field(j, s, "phase1_steps", c.phase1_steps);
  c.phase2_steps = field(j, s, "phase2_steps", c.phase2_steps);
  c.batch_size = field(j, s, "batch_size", c.batch_size);
  c.warmup = field(j, s, "warmup", c.warmup);
  c.lr_scale = field(j, s, "lr_scale", c.lr_scale);
  c.adam_beta1 = field(j, s, "adam_beta1", c.adam_beta1);
  c.adam_beta2 = field(j, s, "adam_beta2", c.adam_beta2);
  c.adam_eps = field(j, s, "adam_eps", c.adam_eps);
  c.label_smoothing = field(j, s, "label_smoothing", c.label_smoothing);
  c.clip_norm = field(j, s, "clip_norm", c.clip_norm);
  c.log_every = field(j, s, "log_every", c.log_every);
  c.val_every = field(j, s, "val_every", c.val_every);
  c.checkpoint_every = field(j, s, "checkpoint_every", c.checkpoint_every);
  c.detach_pass1 = field(j, s, "detach_pass1", c.detach_pass1);
  c.pass1_dropout = field(j, s, "pass1_dropout", c.pass1_dropout);
  c.record_wallclock = field(j, s, "record_wallclock", c.record_wallclock);
  c.final_decode = field(j, s, "final_decode", c.final_decode);
}

void RunConfig::validate() const {
  task.validate();
  model.validate();
  schedule.validate();
  train.validate();
  if (model.vocab_size_src < task.vocab_size || model.vocab_size_tgt < task.vocab_size) {
    throw ConfigError("model.vocab_size_src/tgt: smaller than task.vocab_size");
  }
  if (model.max_len < task.max_len + 1) {
    throw ConfigError("model.max_len: must be at least task.max_len + 1 (BOS/EOS)");
  }
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["task"] = task;
  j["model"] = model;
  j["schedule"] = schedule;
  j["train"] = train;
  j["seed"] = seed;
  j["output_dir"] = output_dir;
  j["rng_streams"] = rng_stream_description(seed);
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  reject_unknown(j, "", {"task", "model", "schedule", "train", "seed", "output_dir", "rng_streams"});
  RunConfig c;
  try {
    if (j.contains("task")) {
      reject_unknown(j.at("task"), "task",
                     {"variant", "vocab_size", "min_len", "max_len", "train_size", "valid_size", "test_size",
                      "train_seed", "valid_seed", "test_seed", "permutation_seed"});
      c.task = j.at("task").get<SyntheticTask>();
    }
    const auto model_j = j.value("model", nlohmann::json::object());
    reject_unknown(model_j, "model",
                   {"vocab_size_src", "vocab_size_tgt", "d_model", "n_heads", "n_encoder_layers",
                    "n_decoder_layers", "d_ff", "dropout", "max_len"});
    c.model.vocab_size_src = c.task.vocab_size;
    c.model.vocab_size_tgt = c.task.vocab_size;
    c.model.max_len = c.task.max_len + 1;
    from_json(model_j, c.model);
    if (j.contains("schedule")) {
      reject_unknown(j.at("schedule"), "schedule",
                     {"mode", "strategy", "epsilon", "k", "b", "estimator", "K", "mc_dropout", "variance",
                      "t_golden", "t_rand", "gate_index", "prediction"});
      c.schedule = schedule_from_json(j.at("schedule"));
    }
    if (j.contains("train")) {
      c.train = j.at("train").get<TrainConfig>();
    }
    c.seed = field(j, "", "seed", c.seed);
    c.output_dir = field(j, "", "output_dir", c.output_dir);
  } catch (const ConfigError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

void apply_override(nlohmann::json& doc, const std::string& dotted_path, const std::string& value) {
  if (dotted_path.empty()) {
    throw ConfigError("empty override key");
  }
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted_path.find('.', start);
    const auto key = dotted_path.substr(start, dot - start);
    if (key.empty()) {
      throw ConfigError("malformed override key '" + dotted_path + "'");
    }
    if (!node->is_object()) {
      *node = nlohmann::json::object();
    }
    if (dot == std::string::npos) {
      nlohmann::json parsed;
      try {
        parsed = nlohmann::json::parse(value);
      } catch (const nlohmann::json::parse_error&) {
        parsed = value;
      }
      (*node)[key] = parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

std::vector<std::pair<std::string, std::string>> parse_override_args(const std::vector<std::string>& args) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const auto& a = args[i];
    if (a.rfind("--", 0) != 0) {
      throw ConfigError("unexpected argument '" + a + "' (overrides look like --section.field value)");
    }
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
      continue;
    }
    if (i + 1 >= args.size()) {
      throw ConfigError("override '" + a + "' is missing a value");
    }
    out.emplace_back(a.substr(2), args[++i]);
  }
  return out;
}

nlohmann::json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file " + path.string());
  }
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

nlohmann::json rng_stream_description(std::uint64_t master_seed) {
  nlohmann::json streams = nlohmann::json::object();
  for (const auto name : {RngStreams::kInit, RngStreams::kDropoutPass1, RngStreams::kDropoutPass2,
                          RngStreams::kData, RngStreams::kSampling, RngStreams::kMonteCarlo}) {
    streams[std::string(name)] = derive_seed(master_seed, name);
  }
  return {{"scheme", "mt19937_64 seeded with splitmix64(seed + fnv1a64(stream_name))"}, {"streams", streams}};
}

std::filesystem::path resolve_output_dir(const std::string& output_dir) {
  std::filesystem::path p(output_dir);
  const char* root = std::getenv(kOutputRootEnv);
  if (root != nullptr && *root != '\0' && p.is_relative()) {
    return std::filesystem::path(root) / p;
  }
  return p;
}

}  // namespace sslab
