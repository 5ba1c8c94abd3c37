#include "sslab/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "sslab/errors.hpp"
#include "sslab/ops.hpp"

namespace sslab {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void check_probability(double v, const std::string& field) {
  if (!(v >= 0 && v <= 1)) {
    throw ConfigError("schedule." + field + ": must be in [0,1], got " + std::to_string(v));
  }
}

}  // namespace

DecayStrategy::DecayStrategy(Variant v) : v_(v) {
  std::visit(Overloaded{
                 [](const LinearDecay& d) {
                   if (!(d.k < 0)) {
                     throw ConfigError("schedule.k: linear decay needs k < 0");
                   }
                   check_probability(d.epsilon, "epsilon");
                   check_probability(d.b, "b");
                 },
                 [](const ExponentialDecay& d) {
                   if (!(d.k > 0 && d.k < 1)) {
                     throw ConfigError("schedule.k: exponential decay needs 0 < k < 1");
                   }
                 },
                 [](const InverseSigmoidDecay& d) {
                   if (!(d.k >= 1) || !std::isfinite(d.k)) {
                     throw ConfigError("schedule.k: inverse sigmoid decay needs k >= 1");
                   }
                 },
             },
             v_);
}

double DecayStrategy::operator()(std::uint64_t step) const {
  const auto i = static_cast<double>(step);
  return std::visit(Overloaded{
                        [i](const LinearDecay& d) { return std::max(d.epsilon, d.k * i + d.b); },
                        [i](const ExponentialDecay& d) { return std::pow(d.k, i); },
                        [i](const InverseSigmoidDecay& d) {
                          // exp overflows to inf for huge i, giving 0 as intended.
                          return d.k / (d.k + std::exp(i / d.k));
                        },
                    },
                    v_);
}

std::string DecayStrategy::name() const {
  return std::visit(Overloaded{
                        [](const LinearDecay&) { return std::string("linear"); },
                        [](const ExponentialDecay&) { return std::string("exponential"); },
                        [](const InverseSigmoidDecay&) { return std::string("inverse_sigmoid"); },
                    },
                    v_);
}

double decay_probability(const DecayStrategy& strategy, std::uint64_t step) { return strategy(step); }

void ConfidenceEstimator::validate() const {
  if (kind != EstimatorKind::Ptp && samples == 0) {
    throw ConfigError("schedule.K: Monte Carlo estimators need K >= 1");
  }
  if (!(dropout_rate >= 0 && dropout_rate < 1)) {
    throw ConfigError("schedule.mc_dropout: must be in [0,1)");
  }
}

void ScheduleConfig::validate() const {
  estimator.validate();
  check_probability(t_golden, "t_golden");
  check_probability(t_rand, "t_rand");
  if (mode == ScheduleMode::ConfidenceAwareDenoising && t_golden > t_rand) {
    throw ConfigError("schedule.t_golden: must not exceed t_rand (" + std::to_string(t_golden) + " > " +
                      std::to_string(t_rand) + ")");
  }
}

std::string to_string(ScheduleMode mode) {
  switch (mode) {
    case ScheduleMode::TeacherForcing:
      return "teacher_forcing";
    case ScheduleMode::VanillaSS:
      return "vanilla_ss";
    case ScheduleMode::ConfidenceAware:
      return "confidence_aware";
    case ScheduleMode::ConfidenceAwareDenoising:
      return "confidence_aware_denoising";
  }
  return "?";
}

ScheduleMode schedule_mode_from_string(const std::string& s) {
  for (const auto m : {ScheduleMode::TeacherForcing, ScheduleMode::VanillaSS, ScheduleMode::ConfidenceAware,
                       ScheduleMode::ConfidenceAwareDenoising}) {
    if (to_string(m) == s) {
      return m;
    }
  }
  throw ConfigError("schedule.mode: unknown mode '" + s +
                    "' (teacher_forcing, vanilla_ss, confidence_aware, confidence_aware_denoising)");
}

std::string to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::Ptp:
      return "ptp";
    case EstimatorKind::McExpectation:
      return "mc_expectation";
    case EstimatorKind::McVariance:
      return "mc_variance";
  }
  return "?";
}

EstimatorKind estimator_from_string(const std::string& s) {
  for (const auto k : {EstimatorKind::Ptp, EstimatorKind::McExpectation, EstimatorKind::McVariance}) {
    if (to_string(k) == s) {
      return k;
    }
  }
  throw ConfigError("schedule.estimator: unknown estimator '" + s + "' (ptp, mc_expectation, mc_variance)");
}

void to_json(nlohmann::json& j, const ScheduleConfig& c) {
  j = nlohmann::json::object();
  j["mode"] = to_string(c.mode);
  j["strategy"] = c.strategy.name();
  std::visit(Overloaded{
                 [&](const LinearDecay& d) {
                   j["epsilon"] = d.epsilon;
                   j["k"] = d.k;
                   j["b"] = d.b;
                 },
                 [&](const ExponentialDecay& d) { j["k"] = d.k; },
                 [&](const InverseSigmoidDecay& d) { j["k"] = d.k; },
             },
             c.strategy.variant());
  j["estimator"] = to_string(c.estimator.kind);
  j["K"] = c.estimator.samples;
  j["mc_dropout"] = c.estimator.dropout_rate;
  j["variance"] = c.estimator.sample_variance ? "sample" : "population";
  j["t_golden"] = c.t_golden;
  j["t_rand"] = c.t_rand;
  j["gate_index"] = c.gate_index == GateIndex::Printed ? "t" : "t-1";
  j["prediction"] = c.prediction == PredictionKind::Soft ? "soft" : "hard";
}

ScheduleConfig schedule_from_json(const nlohmann::json& j) {
  ScheduleConfig c;
  try {
    c.mode = schedule_mode_from_string(j.value("mode", to_string(c.mode)));
    const auto strategy = j.value("strategy", std::string("linear"));
    if (strategy == "linear") {
      LinearDecay d;
      d.epsilon = j.value("epsilon", d.epsilon);
      d.k = j.value("k", d.k);
      d.b = j.value("b", d.b);
      c.strategy = DecayStrategy(d);
    } else if (strategy == "exponential") {
      ExponentialDecay d;
      d.k = j.value("k", d.k);
      c.strategy = DecayStrategy(d);
    } else if (strategy == "inverse_sigmoid") {
      InverseSigmoidDecay d;
      d.k = j.value("k", d.k);
      c.strategy = DecayStrategy(d);
    } else {
      throw ConfigError("schedule.strategy: unknown strategy '" + strategy +
                        "' (linear, exponential, inverse_sigmoid)");
    }
    c.estimator.kind = estimator_from_string(j.value("estimator", to_string(c.estimator.kind)));
    c.estimator.samples = j.value("K", c.estimator.samples);
    c.estimator.dropout_rate = j.value("mc_dropout", c.estimator.dropout_rate);
    const auto variance = j.value("variance", std::string("population"));
    if (variance != "population" && variance != "sample") {
      throw ConfigError("schedule.variance: expected 'population' or 'sample'");
    }
    c.estimator.sample_variance = variance == "sample";
    c.t_golden = j.value("t_golden", c.t_golden);
    c.t_rand = j.value("t_rand", c.t_rand);
    const auto gate = j.value("gate_index", std::string("t"));
    if (gate != "t" && gate != "t-1") {
      throw ConfigError("schedule.gate_index: expected 't' or 't-1'");
    }
    c.gate_index = gate == "t" ? GateIndex::Printed : GateIndex::Previous;
    const auto prediction = j.value("prediction", std::string("soft"));
    if (prediction != "soft" && prediction != "hard") {
      throw ConfigError("schedule.prediction: expected 'soft' or 'hard'");
    }
    c.prediction = prediction == "soft" ? PredictionKind::Soft : PredictionKind::HardArgmax;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
  c.validate();
  return c;
}

TokenSelection vanilla_sample_mask(double f_i, const TokenMatrix& decoder_inputs, Rng& rng) {
  auto sel = TokenSelection::all_golden(decoder_inputs);
  for (std::size_t r = 0; r < sel.rows; ++r) {
    for (std::size_t c = 1; c < sel.lengths[r]; ++c) {
      if (!rng.bernoulli(f_i)) {
        sel.classes[r * sel.cols + c] = TokenClass::Predicted;
      }
    }
  }
  return sel;
}

Confidence confidence_ptp(const DecoderOutput& pass1) {
  const auto g = pass1.gold_prob.data();
  return Confidence(g.begin(), g.end());
}

Confidence combine_mc_samples(const ConfidenceEstimator& estimator,
                              const std::vector<std::vector<double>>& samples) {
  if (samples.empty()) {
    throw ConfigError("schedule.K: Monte Carlo estimators need K >= 1");
  }
  const auto n = samples.front().size();
  std::vector<double> mean(n, 0.0);
  std::vector<double> m2(n, 0.0);
  // Welford updates: identical samples leave the mean exactly unchanged and
  // the spread exactly zero.
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const auto& s = samples[k];
    for (std::size_t i = 0; i < n; ++i) {
      const double delta = s[i] - mean[i];
      mean[i] += delta / static_cast<double>(k + 1);
      m2[i] += delta * (s[i] - mean[i]);
    }
  }
  if (estimator.kind == EstimatorKind::McExpectation) {
    return mean;
  }
  const auto count = static_cast<double>(samples.size());
  const double denom = estimator.sample_variance ? std::max(1.0, count - 1) : count;
  Confidence conf(n);
  for (std::size_t i = 0; i < n; ++i) {
    conf[i] = 1.0 - m2[i] / denom;
  }
  return conf;
}

Confidence confidence_mc(const ConfidenceEstimator& estimator, const Transformer& model,
                         const TokenMatrix& src, const TokenMatrix& gold_inputs,
                         const TokenMatrix& gold_targets, Rng& rng) {
  estimator.validate();
  if (estimator.kind == EstimatorKind::Ptp) {
    throw ContractError("confidence_mc: estimator is PTP; use confidence_ptp");
  }
  NoGradGuard no_grad;
  const auto opts = ForwardOptions::training(estimator.dropout_rate, rng);
  std::vector<std::vector<double>> samples;
  samples.reserve(estimator.samples);
  for (std::size_t k = 0; k < estimator.samples; ++k) {
    const auto memory = model.encode(src, opts);
    const auto out = model.decode_pass1(memory, gold_inputs, gold_targets, opts);
    samples.push_back(confidence_ptp(out));
  }
  return combine_mc_samples(estimator, samples);
}

TokenSelection select_tokens(const Confidence& conf, const ScheduleConfig& config,
                             const TokenMatrix& decoder_inputs, const TokenMatrix& gold_targets, Rng& rng) {
  config.validate();
  auto sel = TokenSelection::all_golden(decoder_inputs);
  if (config.mode == ScheduleMode::TeacherForcing) {
    return sel;
  }
  if (config.mode == ScheduleMode::VanillaSS) {
    throw ContractError("select_tokens: vanilla scheduled sampling uses vanilla_sample_mask");
  }
  if (conf.size() != gold_targets.rows * gold_targets.cols || decoder_inputs.rows != gold_targets.rows ||
      decoder_inputs.cols != gold_targets.cols) {
    throw ShapeError("select_tokens: confidence of size " + std::to_string(conf.size()) +
                     " does not match targets [" + std::to_string(gold_targets.rows) + "x" +
                     std::to_string(gold_targets.cols) + "]");
  }
  const bool denoise = config.mode == ScheduleMode::ConfidenceAwareDenoising;
  for (std::size_t r = 0; r < sel.rows; ++r) {
    std::vector<int> pool;
    if (denoise) {
      for (std::size_t c = 0; c < gold_targets.lengths[r]; ++c) {
        if (!is_reserved(gold_targets.at(r, c))) {
          pool.push_back(gold_targets.at(r, c));
        }
      }
    }
    for (std::size_t p = 1; p < sel.lengths[r]; ++p) {
      const auto gate = config.gate_index == GateIndex::Printed ? p : p - 1;
      const double c = conf[r * gold_targets.cols + gate];
      const auto idx = r * sel.cols + p;
      if (c <= config.t_golden) {
        continue;
      }
      if (denoise && c > config.t_rand) {
        if (!pool.empty()) {
          sel.classes[idx] = TokenClass::Random;
          sel.replacement[idx] = pool[rng.uniform_int(pool.size())];
        }
        continue;
      }
      sel.classes[idx] = TokenClass::Predicted;
    }
  }
  return sel;
}

MixedInput build_mixed_input(const TokenSelection& selection, const TokenMatrix& gold_inputs,
                             const Tensor& pass1_probs, const Tensor& embedding_table, PredictionKind prediction) {
  const auto rows = selection.rows;
  const auto cols = selection.cols;
  if (gold_inputs.rows != rows || gold_inputs.cols != cols) {
    throw ShapeError("build_mixed_input: selection and decoder inputs differ in shape");
  }
  const Shape lead{rows, cols};
  const auto gold = ops::embedding_lookup(embedding_table, gold_inputs.ids, lead);

  // Input position p takes the first-pass prediction made at output p - 1.
  std::vector<std::size_t> shifted(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t p = 0; p < cols; ++p) {
      shifted[r * cols + p] = r * cols + (p == 0 ? 0 : p - 1);
    }
  }
  Tensor predicted;
  if (prediction == PredictionKind::Soft) {
    predicted = ops::gather_rows(soft_prediction_embeddings(pass1_probs, embedding_table), shifted, lead);
  } else {
    const auto vocab = pass1_probs.dim(-1);
    const auto pv = pass1_probs.data();
    std::vector<int> argmax(rows * cols);
    for (std::size_t i = 0; i < argmax.size(); ++i) {
      const auto* row = pv.data() + shifted[i] * vocab;
      argmax[i] = static_cast<int>(std::max_element(row, row + vocab) - row);
    }
    predicted = ops::embedding_lookup(embedding_table, argmax, lead);
  }

  std::vector<int> random_ids = gold_inputs.ids;
  std::vector<std::uint8_t> choice(rows * cols);
  for (std::size_t i = 0; i < choice.size(); ++i) {
    choice[i] = static_cast<std::uint8_t>(selection.classes[i]);
    if (selection.classes[i] == TokenClass::Random) {
      random_ids[i] = selection.replacement[i];
    }
  }
  const auto random = ops::embedding_lookup(embedding_table, random_ids, lead);
  return {ops::select_rows({gold, predicted, random}, choice), selection};
}

}  // namespace sslab
