#include "sslab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "sslab/errors.hpp"
#include "sslab/eval.hpp"
#include "sslab/ops.hpp"

namespace sslab {

double lr_at(std::uint64_t step, std::size_t d_model, std::size_t warmup, double scale) {
  const auto s = static_cast<double>(std::max<std::uint64_t>(step, 1));
  const auto w = static_cast<double>(warmup);
  return scale * std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

Adam::Adam(AdamConfig config, const std::vector<Tensor>& params) : config_(config) {
  for (const auto& p : params) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(const std::vector<Tensor>& params, double lr) {
  if (params.size() != m_.size()) {
    throw ContractError("Adam::step: parameter list changed size");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    if (!p.has_grad()) {
      continue;
    }
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[j] = config_.beta1 * m[j] + (1 - config_.beta1) * gj;
      v[j] = config_.beta2 * v[j] + (1 - config_.beta2) * gj * gj;
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      w[j] -= static_cast<Scalar>(lr * m_hat / (std::sqrt(v_hat) + config_.eps));
    }
    p.zero_grad();
  }
}

double global_grad_norm(const std::vector<Tensor>& params) {
  double sq = 0;
  for (const auto& p : params) {
    if (!p.has_grad()) {
      continue;
    }
    for (const auto g : p.grad()) {
      sq += static_cast<double>(g) * g;
    }
  }
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const auto factor = static_cast<Scalar>(max_norm / norm);
    for (auto p : params) {
      if (p.has_grad()) {
        for (auto& g : p.mutable_grad()) {
          g *= factor;
        }
      }
    }
  }
  return norm;
}

std::vector<Tensor> TrainState::parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : model.params().named()) {
    out.push_back(t);
  }
  return out;
}

namespace {

std::vector<Tensor> param_list(const Transformer& model) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : model.params().named()) {
    out.push_back(t);
  }
  return out;
}

AdamConfig adam_config(const TrainConfig& t) { return {t.adam_beta1, t.adam_beta2, t.adam_eps}; }

std::string diagnostics(const TrainState& state, double lr, double loss, const std::vector<Tensor>& params) {
  std::ostringstream out;
  out << "non-finite training signal at step " << state.step + 1 << ": loss=" << loss << " lr=" << lr
      << " global_grad_norm=" << global_grad_norm(params) << "; per-parameter grad norms:";
  const auto named = state.model.params().named();
  for (const auto& [name, t] : named) {
    double sq = 0;
    if (t.has_grad()) {
      for (const auto g : t.grad()) {
        sq += static_cast<double>(g) * g;
      }
    }
    out << ' ' << name << '=' << std::sqrt(sq);
  }
  return out.str();
}

}  // namespace

TrainState init_train_state(const RunConfig& config) {
  config.validate();
  RngStreams rngs(config.seed);
  Transformer model(config.model, rngs.init);
  Adam optimizer(adam_config(config.train), param_list(model));
  return TrainState{std::move(model), std::move(optimizer), 0, std::move(rngs), {}, 0};
}

StepMetrics train_step(TrainState& state, const Batch& batch, const ScheduleConfig& schedule,
                       const TrainConfig& train) {
  const auto& model = state.model;
  const auto& cfg = model.config();
  const auto params = state.parameters();
  const auto& tin = batch.target_input;
  const auto& tout = batch.target_output;
  const auto main_opts = ForwardOptions::training(cfg.dropout_rate, state.rngs.dropout_pass2);

  const auto memory = model.encode(batch.source, main_opts);
  MixedInput mixed;
  if (schedule.mode == ScheduleMode::TeacherForcing) {
    mixed = {model.embed_target(tin), TokenSelection::all_golden(tin)};
  } else {
    const auto pass1_opts = train.pass1_dropout ? ForwardOptions::training(cfg.dropout_rate, state.rngs.dropout_pass1)
                                                : ForwardOptions::inference();
    DecoderOutput pass1;
    if (train.detach_pass1) {
      NoGradGuard no_grad;
      pass1 = model.decode_pass1(memory, tin, tout, pass1_opts);
    } else {
      pass1 = model.decode_pass1(memory, tin, tout, pass1_opts);
    }
    TokenSelection selection;
    if (schedule.mode == ScheduleMode::VanillaSS) {
      selection = vanilla_sample_mask(decay_probability(schedule.strategy, state.step), tin, state.rngs.sampling);
    } else {
      const auto conf = schedule.estimator.kind == EstimatorKind::Ptp
                            ? confidence_ptp(pass1)
                            : confidence_mc(schedule.estimator, model, batch.source, tin, tout,
                                            state.rngs.monte_carlo);
      selection = select_tokens(conf, schedule, tin, tout, state.rngs.sampling);
    }
    mixed = build_mixed_input(selection, tin, pass1.probs, model.params().tgt_embedding, schedule.prediction);
  }

  const auto logits = model.decode_embedded(memory, mixed.embeddings, tin.lengths, main_opts);
  const auto loss = ops::cross_entropy(logits, tout.ids, tout.mask(), static_cast<Scalar>(train.label_smoothing));
  const double lr = lr_at(state.step + 1, cfg.d_model, train.warmup, train.lr_scale);
  const double loss_value = loss.item();
  backward(loss);
  const double norm = global_grad_norm(params);
  if (!std::isfinite(loss_value) || !std::isfinite(norm)) {
    throw NumericError(diagnostics(state, lr, loss_value, params));
  }
  clip_grad_norm(params, train.clip_norm);
  state.optimizer.step(params, lr);
  ++state.step;
  return {state.step, loss_value, lr, norm, mixed.provenance.fractions()};
}

Batch sample_batch(const std::vector<SentencePair>& train, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) {
    i = rng.uniform_int(train.size());
  }
  return make_batch(train, idx);
}

void pretrain_then_schedule(TrainState& state, const RunConfig& config, const DatasetSplits& data,
                            const RunHooks& hooks, std::uint64_t stop_at) {
  const auto& tc = config.train;
  const auto total = tc.phase1_steps + tc.phase2_steps;
  auto teacher = config.schedule;
  teacher.mode = ScheduleMode::TeacherForcing;
  const auto started = std::chrono::steady_clock::now();
  auto emit = [&](nlohmann::ordered_json record) {
    state.history.push_back(record);
    if (hooks.on_record) {
      hooks.on_record(record);
    }
  };

  while (state.step < total && (stop_at == 0 || state.step < stop_at)) {
    const bool phase2 = state.step >= tc.phase1_steps;
    if (phase2 && state.step == tc.phase1_steps) {
      nlohmann::ordered_json marker;
      marker["step"] = state.step;
      marker["event"] = "phase_switch";
      marker["from"] = to_string(ScheduleMode::TeacherForcing);
      marker["to"] = to_string(config.schedule.mode);
      emit(marker);
    }
    const auto batch = sample_batch(data.train, tc.batch_size, state.rngs.data);
    const auto m = train_step(state, batch, phase2 ? config.schedule : teacher, tc);

    const bool validate = m.step % tc.val_every == 0 || m.step == total;
    if (!(validate || m.step % tc.log_every == 0)) {
      continue;
    }
    nlohmann::ordered_json rec;
    rec["step"] = m.step;
    rec["phase"] = phase2 ? 2 : 1;
    rec["loss"] = m.loss;
    rec["lr"] = m.lr;
    if (validate && !data.valid.empty()) {
      const auto report =
          evaluate(state.model, data.valid, DecodeSettings{}, config.task.min_len, config.task.max_len);
      rec["val_token_acc"] = report.token_accuracy;
      rec["val_seq_acc"] = report.sequence_accuracy;
      rec["val_bleu"] = report.bleu * 100;
    } else {
      rec["val_token_acc"] = nullptr;
      rec["val_seq_acc"] = nullptr;
      rec["val_bleu"] = nullptr;
    }
    rec["frac_golden"] = m.fractions.golden;
    rec["frac_predicted"] = m.fractions.predicted;
    rec["frac_random"] = m.fractions.random;
    if (tc.record_wallclock) {
      rec["wallclock_s"] =
          state.wallclock_offset + std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    } else {
      rec["wallclock_s"] = nullptr;
    }
    emit(rec);
    if (tc.checkpoint_every > 0 && m.step % tc.checkpoint_every == 0 && hooks.on_checkpoint) {
      hooks.on_checkpoint(state);
    }
  }
  state.wallclock_offset += std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
}

TrainState pretrain_then_schedule(const RunConfig& config, const DatasetSplits& data, const RunHooks& hooks) {
  auto state = init_train_state(config);
  pretrain_then_schedule(state, config, data, hooks);
  return state;
}

Checkpoint train_checkpoint(const TrainState& state, const RunConfig& config) {
  Checkpoint ckpt;
  ckpt.header["run"] = config.to_json();
  add_model(ckpt, state.model);
  nlohmann::json ts;
  ts["step"] = state.step;
  ts["adam_steps"] = state.optimizer.steps();
  ts["wallclock_offset"] = state.wallclock_offset;
  ts["rng"] = {{"init", state.rngs.init.state()},
               {"dropout_pass1", state.rngs.dropout_pass1.state()},
               {"dropout_pass2", state.rngs.dropout_pass2.state()},
               {"data", state.rngs.data.state()},
               {"sampling", state.rngs.sampling.state()},
               {"monte_carlo", state.rngs.monte_carlo.state()}};
  ts["history"] = nlohmann::json::array();
  for (const auto& rec : state.history) {
    ts["history"].push_back(rec.dump());
  }
  ckpt.header["train_state"] = ts;
  const auto named = state.model.params().named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& shape = named[i].second.shape();
    ckpt.arrays.push_back({"adam_m/" + named[i].first, shape, state.optimizer.first_moments()[i]});
    ckpt.arrays.push_back({"adam_v/" + named[i].first, shape, state.optimizer.second_moments()[i]});
  }
  return ckpt;
}

TrainState restore_train_state(const Checkpoint& ckpt) {
  if (!ckpt.header.contains("run") || !ckpt.header.contains("train_state")) {
    throw FormatError("checkpoint does not carry training state");
  }
  const auto config = run_config_from_json(ckpt.header.at("run"));
  auto model = model_from_checkpoint(ckpt);
  Adam optimizer(adam_config(config.train), param_list(model));
  const auto& ts = ckpt.header.at("train_state");
  const auto named = model.params().named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto* m = ckpt.find("adam_m/" + named[i].first);
    const auto* v = ckpt.find("adam_v/" + named[i].first);
    if (m == nullptr || v == nullptr || m->values.size() != named[i].second.numel() ||
        v->values.size() != named[i].second.numel()) {
      throw FormatError("checkpoint optimizer moments missing or mis-shaped for '" + named[i].first + "'");
    }
    optimizer.first_moments()[i] = m->values;
    optimizer.second_moments()[i] = v->values;
  }
  optimizer.set_steps(ts.at("adam_steps").get<std::uint64_t>());
  RngStreams rngs(config.seed);
  const auto& rng = ts.at("rng");
  rngs.init.set_state(rng.at("init").get<std::string>());
  rngs.dropout_pass1.set_state(rng.at("dropout_pass1").get<std::string>());
  rngs.dropout_pass2.set_state(rng.at("dropout_pass2").get<std::string>());
  rngs.data.set_state(rng.at("data").get<std::string>());
  rngs.sampling.set_state(rng.at("sampling").get<std::string>());
  rngs.monte_carlo.set_state(rng.at("monte_carlo").get<std::string>());
  std::vector<nlohmann::ordered_json> history;
  for (const auto& line : ts.at("history")) {
    history.push_back(nlohmann::ordered_json::parse(line.get<std::string>()));
  }
  return TrainState{std::move(model), std::move(optimizer), ts.at("step").get<std::uint64_t>(), std::move(rngs),
                    std::move(history), ts.value("wallclock_offset", 0.0)};
}

std::optional<std::uint64_t> steps_to_threshold(const std::vector<std::pair<std::uint64_t, double>>& history,
                                                double target) {
  for (const auto& [step, value] : history) {
    if (value >= target) {
      return step;
    }
  }
  return std::nullopt;
}

}  // namespace sslab
