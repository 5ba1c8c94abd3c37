#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sslab/checkpoint.hpp"
#include "sslab/config.hpp"
#include "sslab/model.hpp"
#include "sslab/rng.hpp"
#include "sslab/schedule.hpp"
#include "sslab/tasks.hpp"

namespace sslab {

// Inverse-square-root schedule with linear warmup:
// scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), step >= 1.
double lr_at(std::uint64_t step, std::size_t d_model, std::size_t warmup, double scale = 1.0);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// Bias-corrected Adam over a fixed parameter list.
class Adam {
 public:
  Adam(AdamConfig config, const std::vector<Tensor>& params);

  // Applies one update from the params' current grads, then clears them.
  void step(const std::vector<Tensor>& params, double lr);

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t t_ = 0;
};

// L2 norm over all parameter grads (params without grads count as zero).
double global_grad_norm(const std::vector<Tensor>& params);
// Scales grads so the global norm is at most max_norm. Returns the norm
// measured before scaling.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

struct StepMetrics {
  std::uint64_t step = 0;  // completed steps after this update
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;
  TokenSelection::Fractions fractions;
};

struct TrainState {
  Transformer model;
  Adam optimizer;
  std::uint64_t step = 0;  // completed updates; the decay step index i
  RngStreams rngs;
  std::vector<nlohmann::ordered_json> history;
  double wallclock_offset = 0;

  std::vector<Tensor> parameters() const;
};

TrainState init_train_state(const RunConfig& config);

// One update: encode, first pass (skipped under teacher forcing), confidence
// or decay, token selection, mixed inputs, second pass, loss, backward, clip,
// Adam. Throws NumericError with step, lr and gradient norms when the loss or
// gradients are not finite.
StepMetrics train_step(TrainState& state, const Batch& batch, const ScheduleConfig& schedule,
                       const TrainConfig& train);

// Batch of `batch_size` training pairs drawn uniformly with replacement from
// the data stream.
Batch sample_batch(const std::vector<SentencePair>& train, std::size_t batch_size, Rng& rng);

struct RunHooks {
  std::function<void(const nlohmann::ordered_json&)> on_record;
  std::function<void(const TrainState&)> on_checkpoint;  // every checkpoint_every steps
};

// Teacher forcing for phase1_steps, then the configured schedule for
// phase2_steps. Continues from state.step, so a restored state resumes where
// it stopped. `stop_at` (if nonzero) ends the loop early at that step.
// A {"event": "phase_switch"} record marks the start of phase 2.
void pretrain_then_schedule(TrainState& state, const RunConfig& config, const DatasetSplits& data,
                            const RunHooks& hooks = {}, std::uint64_t stop_at = 0);
TrainState pretrain_then_schedule(const RunConfig& config, const DatasetSplits& data, const RunHooks& hooks = {});

// Model, optimizer moments, step, RNG states and metric history.
Checkpoint train_checkpoint(const TrainState& state, const RunConfig& config);
TrainState restore_train_state(const Checkpoint& ckpt);

// First step whose value reaches `target` (>=), or nullopt.
std::optional<std::uint64_t> steps_to_threshold(const std::vector<std::pair<std::uint64_t, double>>& history,
                                                double target);

}  // namespace sslab
