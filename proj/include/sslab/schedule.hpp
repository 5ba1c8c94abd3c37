#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "sslab/model.hpp"
#include "sslab/rng.hpp"
#include "sslab/selection.hpp"
#include "sslab/tokens.hpp"

namespace sslab {

// f(i) = max(epsilon, k * i + b)
struct LinearDecay {
  double epsilon = 0.2;
  double k = -5e-5;
  double b = 1.0;
};

// f(i) = k^i
struct ExponentialDecay {
  double k = 0.99999;
};

// f(i) = k / (k + exp(i / k))
struct InverseSigmoidDecay {
  double k = 20000;
};

// Probability of feeding the gold token at training step i. Construction
// validates the hyperparameters; evaluation never throws.
class DecayStrategy {
 public:
  using Variant = std::variant<LinearDecay, ExponentialDecay, InverseSigmoidDecay>;

  explicit DecayStrategy(Variant v);

  double operator()(std::uint64_t step) const;
  const Variant& variant() const { return v_; }
  std::string name() const;

 private:
  Variant v_;
};

enum class EstimatorKind { Ptp, McExpectation, McVariance };

struct ConfidenceEstimator {
  EstimatorKind kind = EstimatorKind::Ptp;
  std::size_t samples = 5;    // K
  double dropout_rate = 0.1;  // for the Monte Carlo passes
  bool sample_variance = false;  // divide by K-1 instead of K

  void validate() const;
};

enum class ScheduleMode { TeacherForcing, VanillaSS, ConfidenceAware, ConfidenceAwareDenoising };

// Which confidence gates decoder input position p (holding y_{p}). `Printed`
// uses conf of output position p (the token that input helps predict);
// `Previous` uses conf of output position p - 1 (the token itself).
enum class GateIndex { Printed, Previous };

enum class PredictionKind { Soft, HardArgmax };

struct ScheduleConfig {
  ScheduleMode mode = ScheduleMode::ConfidenceAwareDenoising;
  DecayStrategy strategy{LinearDecay{}};
  ConfidenceEstimator estimator;
  double t_golden = 0.9;
  double t_rand = 0.95;
  GateIndex gate_index = GateIndex::Printed;
  PredictionKind prediction = PredictionKind::Soft;

  void validate() const;
};

std::string to_string(ScheduleMode mode);
ScheduleMode schedule_mode_from_string(const std::string& s);
std::string to_string(EstimatorKind kind);
EstimatorKind estimator_from_string(const std::string& s);

// Field names: mode, strategy, epsilon, k, b, estimator, K, mc_dropout,
// variance, t_golden, t_rand, gate_index, prediction.
void to_json(nlohmann::json& j, const ScheduleConfig& c);
// Missing fields keep their defaults; a missing `k` takes the default of the
// chosen strategy. Validates.
ScheduleConfig schedule_from_json(const nlohmann::json& j);

double decay_probability(const DecayStrategy& strategy, std::uint64_t step);

// Every non-pad position except BOS (position 0) is independently GOLDEN
// with probability f_i, else PREDICTED.
TokenSelection vanilla_sample_mask(double f_i, const TokenMatrix& decoder_inputs, Rng& rng);

// Per-position confidence [B*T] laid out like the target matrix.
using Confidence = std::vector<double>;

// The first-pass gold-token probability, read off directly.
Confidence confidence_ptp(const DecoderOutput& pass1);

// K stochastic forward passes (encoder and decoder, dropout at the
// estimator's rate). Expectation: mean of the K gold probabilities.
// Variance: 1 - variance of the K gold probabilities.
Confidence confidence_mc(const ConfidenceEstimator& estimator, const Transformer& model,
                         const TokenMatrix& src, const TokenMatrix& gold_inputs,
                         const TokenMatrix& gold_targets, Rng& rng);

// Combines per-position samples [K][B*T] the same way confidence_mc does.
Confidence combine_mc_samples(const ConfidenceEstimator& estimator, const std::vector<std::vector<double>>& samples);

// Threshold rule over decoder input positions. Position 0 (BOS) is always
// GOLDEN; input p >= 1 is gated by conf at output p (GateIndex::Printed) or
// p - 1. conf <= t_golden keeps gold; (t_golden, t_rand] takes the
// prediction; > t_rand (denoising mode only) takes a uniform draw from the
// sentence's non-reserved tokens, falling back to GOLDEN when there are none.
TokenSelection select_tokens(const Confidence& conf, const ScheduleConfig& config,
                             const TokenMatrix& decoder_inputs, const TokenMatrix& gold_targets, Rng& rng);

// Assembles second-pass decoder inputs. GOLDEN rows are the gold token
// embeddings; PREDICTED rows are the soft prediction (or the argmax token's
// embedding) of the first pass at output position p - 1; RANDOM rows are the
// replacement token's embedding. `pass1_probs` is used as given: detach it
// beforehand to stop gradients into the first pass.
MixedInput build_mixed_input(const TokenSelection& selection, const TokenMatrix& gold_inputs,
                             const Tensor& pass1_probs, const Tensor& embedding_table,
                             PredictionKind prediction = PredictionKind::Soft);

}  // namespace sslab
