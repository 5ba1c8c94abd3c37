#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sslab/errors.hpp"
#include "sslab/model.hpp"
#include "sslab/ops.hpp"
#include "sslab/schedule.hpp"
#include "sslab/tasks.hpp"
#include "support.hpp"

using namespace sslab;

namespace {

// Direct formula evaluation in extended precision.
long double linear_ref(long double eps, long double k, long double b, long double i) {
  return std::max(eps, k * i + b);
}
long double exponential_ref(long double k, long double i) { return std::exp(i * std::log(k)); }
long double inverse_sigmoid_ref(long double k, long double i) { return k / (k + std::exp(i / k)); }

ScheduleConfig thresholds(ScheduleMode mode, double tg, double tr) {
  ScheduleConfig c;
  c.mode = mode;
  c.t_golden = tg;
  c.t_rand = tr;
  return c;
}

}  // namespace

TEST_CASE("decay curves at the reference points") {
  const DecayStrategy linear(LinearDecay{0.2, -5e-5, 1.0});
  const DecayStrategy expo(ExponentialDecay{0.99999});
  const DecayStrategy sig(InverseSigmoidDecay{20000});

  CHECK(std::abs(decay_probability(linear, 0) - 1.0) < 1e-9);
  CHECK(std::abs(decay_probability(linear, 16000) - 0.2) < 1e-9);
  CHECK(std::abs(decay_probability(expo, 0) - 1.0) < 1e-9);

  const double e200k = decay_probability(expo, 200000);
  CHECK(std::abs(e200k - static_cast<double>(exponential_ref(0.99999L, 200000))) < 1e-9);
  CHECK(std::abs(e200k - 0.13533) < 1e-4);

  CHECK(std::abs(decay_probability(sig, 0) - 20000.0 / 20001.0) < 1e-9);
  // k ln k = 198069.75...; the nearest step sits a few 1e-6 above the midpoint crossing
  const auto mid = static_cast<std::uint64_t>(std::llround(20000.0 * std::log(20000.0)));
  CHECK(mid == 198070);
  const double s_mid = decay_probability(sig, mid);
  CHECK(std::abs(s_mid - static_cast<double>(inverse_sigmoid_ref(20000, mid))) < 1e-9);
  CHECK(std::abs(s_mid - 0.5) < 5e-6);
}

TEST_CASE("decay curves agree with the formulas across the range") {
  Rng rng(1);
  const std::vector<std::pair<LinearDecay, int>> lin{{{0.2, -5e-5, 1.0}, 0}, {{0.0, -1e-3, 0.5}, 0}};
  for (int n = 0; n < 2000; ++n) {
    const auto i = rng.uniform_int(400000);
    for (const auto& [p, unused] : lin) {
      CHECK(std::abs(DecayStrategy(p)(i) - static_cast<double>(linear_ref(p.epsilon, p.k, p.b, i))) < 1e-9);
    }
    CHECK(std::abs(DecayStrategy(ExponentialDecay{0.9999})(i) - static_cast<double>(exponential_ref(0.9999L, i))) < 1e-9);
    CHECK(std::abs(DecayStrategy(InverseSigmoidDecay{500})(i) - static_cast<double>(inverse_sigmoid_ref(500, i))) <
          1e-9);
  }
  // clamp region
  const DecayStrategy linear(LinearDecay{0.2, -5e-5, 1.0});
  for (std::uint64_t i : {16000ULL, 16001ULL, 100000ULL, 10000000000ULL}) {
    CHECK(linear(i) == 0.2);
  }
  CHECK(DecayStrategy(ExponentialDecay{0.99999})(100000000ULL) < 1e-300);
  CHECK(DecayStrategy(InverseSigmoidDecay{20000})(10000000000ULL) == 0.0);
}

TEST_CASE("decay curves never increase") {
  Rng rng(2);
  const std::vector<DecayStrategy> strategies{DecayStrategy(LinearDecay{0.2, -5e-5, 1.0}),
                                              DecayStrategy(ExponentialDecay{0.99999}),
                                              DecayStrategy(InverseSigmoidDecay{20000})};
  for (const auto& s : strategies) {
    for (int n = 0; n < 10000; ++n) {
      auto a = rng.uniform_int(1000000);
      auto b = rng.uniform_int(1000000);
      if (a > b) {
        std::swap(a, b);
      }
      const double fa = s(a), fb = s(b);
      CHECK(fb <= fa);
      CHECK(fb >= 0);
      CHECK(fa <= 1);
    }
  }
}

TEST_CASE("invalid decay hyperparameters fail at construction") {
  CHECK_THROWS_AS(DecayStrategy(LinearDecay{0.2, 1e-5, 1.0}), ConfigError);
  CHECK_THROWS_AS(DecayStrategy(LinearDecay{1.2, -1e-5, 1.0}), ConfigError);
  CHECK_THROWS_AS(DecayStrategy(LinearDecay{0.2, -1e-5, 1.5}), ConfigError);
  CHECK_THROWS_AS(DecayStrategy(ExponentialDecay{1.0}), ConfigError);
  CHECK_THROWS_AS(DecayStrategy(ExponentialDecay{0.0}), ConfigError);
  CHECK_THROWS_AS(DecayStrategy(InverseSigmoidDecay{0.5}), ConfigError);
}

TEST_CASE("vanilla sampling mask") {
  std::vector<Sentence> rows(200, Sentence{3, 4, 5, 6, 7, 8, 9});
  rows.push_back({3});
  const auto inputs = TokenMatrix::from_rows(rows);
  Rng rng(3);
  const auto all_gold = vanilla_sample_mask(1.0, inputs, rng);
  CHECK(all_gold.count(TokenClass::Golden) == all_gold.fractions().positions);
  const auto none = vanilla_sample_mask(0.0, inputs, rng);
  for (std::size_t r = 0; r < inputs.rows; ++r) {
    for (std::size_t c = 0; c < inputs.cols; ++c) {
      const bool predicted = c > 0 && c < inputs.lengths[r];
      CHECK((none.at(r, c) == TokenClass::Predicted) == predicted);
    }
  }
  CHECK(none.count(TokenClass::Random) == 0);

  // 10^5 sampled positions
  const auto wide = TokenMatrix::from_rows(std::vector<Sentence>(10000, Sentence(11, 5)));
  const auto s = vanilla_sample_mask(0.7, wide, rng);
  std::size_t golden = 0, total = 0;
  for (std::size_t r = 0; r < wide.rows; ++r) {
    for (std::size_t c = 1; c < wide.lengths[r]; ++c) {
      golden += s.at(r, c) == TokenClass::Golden;
      ++total;
    }
  }
  CHECK(total == 100000);
  CHECK(std::abs(static_cast<double>(golden) / static_cast<double>(total) - 0.7) < 0.01);
}

TEST_CASE("PTP confidence") {
  DecoderOutput half;
  half.gold_prob = ops::softmax(Tensor::from({1, 2}, {0, 0}), -1);
  // gold_prob read straight off; two-class symmetric case
  CHECK(confidence_ptp(half)[0] == 0.5);

  Rng rng(4);
  const auto logits = testing::random_tensor({2, 3, 6}, rng, false, 3.0);
  const std::vector<int> targets{0, 5, 2, 2, 1, 4};
  DecoderOutput out;
  out.logits = logits;
  out.probs = ops::softmax(logits, -1);
  std::vector<Scalar> gp(6);
  for (std::size_t i = 0; i < 6; ++i) {
    gp[i] = out.probs.data()[i * 6 + static_cast<std::size_t>(targets[i])];
  }
  out.gold_prob = Tensor::from({2, 3}, gp);
  const auto conf = confidence_ptp(out);
  for (std::size_t i = 0; i < 6; ++i) {
    double z = 0;
    for (std::size_t v = 0; v < 6; ++v) {
      z += std::exp(static_cast<double>(logits.data()[i * 6 + v]));
    }
    const double expected = std::exp(static_cast<double>(logits.data()[i * 6 + static_cast<std::size_t>(targets[i])])) / z;
    CHECK(std::abs(conf[i] - expected) < 1e-12);
  }
}

TEST_CASE("PTP confidence from a model tends to one when the gold logit dominates") {
  ModelConfig c;
  c.vocab_size_src = c.vocab_size_tgt = 8;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.n_encoder_layers = c.n_decoder_layers = 1;
  c.dropout_rate = 0;
  c.max_len = 6;
  Rng rng(5);
  Transformer model(c, rng);
  // Push every output toward token 4 through the bias.
  model.params().out_b.mutable_data()[4] = 60;
  const auto batch = make_batch({{{3, 5}, {4, 4}}});
  const auto opts = ForwardOptions::inference();
  const auto out = model.decode_pass1(model.encode(batch.source, opts), batch.target_input, batch.target_output, opts);
  const auto conf = confidence_ptp(out);
  CHECK(conf[0] > 0.999999);
  CHECK(conf[1] > 0.999999);
  CHECK(conf[2] < 1e-6);  // EOS slot
}

TEST_CASE("Monte Carlo estimators") {
  const std::vector<std::vector<double>> hand{{0.2}, {0.4}, {0.6}, {0.8}, {1.0}};
  ConfidenceEstimator mean_est{EstimatorKind::McExpectation, 5, 0.1};
  ConfidenceEstimator var_est{EstimatorKind::McVariance, 5, 0.1};
  CHECK(std::abs(combine_mc_samples(mean_est, hand)[0] - 0.6) < 1e-12);
  CHECK(std::abs(combine_mc_samples(var_est, hand)[0] - 0.92) < 1e-12);
  var_est.sample_variance = true;
  CHECK(std::abs(combine_mc_samples(var_est, hand)[0] - 0.9) < 1e-12);
  var_est.sample_variance = false;

  Rng rng(6);
  for (int n = 0; n < 1000; ++n) {
    std::vector<std::vector<double>> s(5, std::vector<double>(1));
    for (auto& v : s) {
      v[0] = rng.bernoulli(0.5) ? 1.0 : rng.uniform() * 0.01;
    }
    CHECK(combine_mc_samples(var_est, s)[0] >= 0.75);
  }
  CHECK_THROWS_AS(combine_mc_samples(mean_est, {}), ConfigError);
  CHECK_THROWS_AS((ConfidenceEstimator{EstimatorKind::McExpectation, 0, 0.1}.validate()), ConfigError);
}

TEST_CASE("Monte Carlo confidence without dropout equals PTP") {
  ModelConfig c;
  c.vocab_size_src = c.vocab_size_tgt = 10;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.n_encoder_layers = c.n_decoder_layers = 1;
  c.dropout_rate = 0;
  c.max_len = 8;
  Rng rng(7);
  Transformer model(c, rng);
  const auto batch = make_batch({{{3, 5, 7}, {7, 5, 3}}, {{4, 9}, {9, 4}}});
  const auto opts = ForwardOptions::inference();
  const auto ptp = confidence_ptp(
      model.decode_pass1(model.encode(batch.source, opts), batch.target_input, batch.target_output, opts));
  Rng mc(8);
  const auto e = confidence_mc({EstimatorKind::McExpectation, 5, 0.0}, model, batch.source, batch.target_input,
                               batch.target_output, mc);
  const auto v = confidence_mc({EstimatorKind::McVariance, 5, 0.0}, model, batch.source, batch.target_input,
                               batch.target_output, mc);
  CHECK(e == ptp);
  for (const auto x : v) {
    CHECK(x == 1.0);
  }
  // with dropout the samples differ
  const auto noisy = confidence_mc({EstimatorKind::McExpectation, 5, 0.3}, model, batch.source, batch.target_input,
                                   batch.target_output, mc);
  CHECK(noisy != ptp);
}

TEST_CASE("threshold rule branches and boundaries") {
  const auto inputs = TokenMatrix::from_rows({{kBos, 5, 6, 7, 8}});
  const auto targets = TokenMatrix::from_rows({{5, 6, 7, 8, kEos}});
  Rng rng(9);
  const auto cfg = thresholds(ScheduleMode::ConfidenceAwareDenoising, 0.9, 0.95);
  // gate of input p is conf at output p
  const Confidence conf{0.99, 0.5, 0.92, 0.97, 0.9};
  const auto sel = select_tokens(conf, cfg, inputs, targets, rng);
  CHECK(sel.at(0, 0) == TokenClass::Golden);
  CHECK(sel.at(0, 1) == TokenClass::Golden);
  CHECK(sel.at(0, 2) == TokenClass::Predicted);
  CHECK(sel.at(0, 3) == TokenClass::Random);
  CHECK(sel.at(0, 4) == TokenClass::Golden);
  const Sentence pool{5, 6, 7, 8};
  CHECK(std::find(pool.begin(), pool.end(), sel.replacement[3]) != pool.end());

  const Confidence at_rand{0.0, 0.0, 0.95, 0.950000001, 0.0};
  const auto edge = select_tokens(at_rand, cfg, inputs, targets, rng);
  CHECK(edge.at(0, 2) == TokenClass::Predicted);
  CHECK(edge.at(0, 3) == TokenClass::Random);

  const auto two = select_tokens(conf, thresholds(ScheduleMode::ConfidenceAware, 0.9, 0.95), inputs, targets, rng);
  CHECK(two.at(0, 3) == TokenClass::Predicted);
  CHECK(two.count(TokenClass::Random) == 0);

  auto prev = cfg;
  prev.gate_index = GateIndex::Previous;
  const auto shifted = select_tokens(conf, prev, inputs, targets, rng);
  CHECK(shifted.at(0, 1) == TokenClass::Random);
  CHECK(shifted.at(0, 2) == TokenClass::Golden);
  CHECK(shifted.at(0, 3) == TokenClass::Predicted);
  CHECK(shifted.at(0, 4) == TokenClass::Random);

  // no eligible replacement tokens: fall back to gold
  const auto only_reserved = select_tokens({1.0, 1.0}, cfg, TokenMatrix::from_rows({{kBos, kEos}}),
                                           TokenMatrix::from_rows({{kEos, kEos}}), rng);
  CHECK(only_reserved.at(0, 1) == TokenClass::Golden);

  CHECK_THROWS_AS(thresholds(ScheduleMode::ConfidenceAwareDenoising, 0.96, 0.95).validate(), ConfigError);
  CHECK_THROWS_AS(thresholds(ScheduleMode::ConfidenceAware, 1.1, 1.2).validate(), ConfigError);
  CHECK_THROWS_AS(select_tokens({0.5}, cfg, inputs, targets, rng), ShapeError);
}

TEST_CASE("threshold rule partitions positions and is monotone in the thresholds") {
  Rng rng(10);
  for (int n = 0; n < 10000; ++n) {
    const auto rows = 1 + rng.uniform_int(4);
    std::vector<Sentence> in, out;
    for (std::size_t r = 0; r < rows; ++r) {
      const auto len = 1 + rng.uniform_int(6);
      Sentence y;
      for (std::size_t i = 0; i < len; ++i) {
        y.push_back(static_cast<int>(3 + rng.uniform_int(10)));
      }
      Sentence a{kBos};
      a.insert(a.end(), y.begin(), y.end());
      y.push_back(kEos);
      in.push_back(a);
      out.push_back(y);
    }
    const auto inputs = TokenMatrix::from_rows(in);
    const auto targets = TokenMatrix::from_rows(out);
    Confidence conf(targets.rows * targets.cols);
    for (auto& c : conf) {
      c = rng.uniform();
    }
    double tg = rng.uniform(), tr = rng.uniform();
    if (tg > tr) {
      std::swap(tg, tr);
    }
    Rng draw(n);
    const auto mode = n % 2 ? ScheduleMode::ConfidenceAware : ScheduleMode::ConfidenceAwareDenoising;
    const auto sel = select_tokens(conf, thresholds(mode, tg, tr), inputs, targets, draw);
    const auto f = sel.fractions();
    CHECK(sel.count(TokenClass::Golden) + sel.count(TokenClass::Predicted) + sel.count(TokenClass::Random) ==
          f.positions);
    CHECK(std::abs(f.golden + f.predicted + f.random - 1.0) < 1e-12);
    for (std::size_t r = 0; r < inputs.rows; ++r) {
      CHECK(sel.at(r, 0) == TokenClass::Golden);
      for (std::size_t c = inputs.lengths[r]; c < inputs.cols; ++c) {
        CHECK(sel.at(r, c) == TokenClass::Golden);
      }
    }
    // counts do not depend on the draw stream
    Rng other(n + 1000000);
    const auto again = select_tokens(conf, thresholds(mode, tg, tr), inputs, targets, other);
    CHECK(again.classes == sel.classes);

    const double tg_up = tg + (tr - tg) * rng.uniform();
    Rng d2(n);
    const auto raised_g = select_tokens(conf, thresholds(mode, tg_up, tr), inputs, targets, d2);
    CHECK(raised_g.count(TokenClass::Golden) >= sel.count(TokenClass::Golden));
    const double tr_up = tr + (1 - tr) * rng.uniform();
    Rng d3(n);
    const auto raised_r = select_tokens(conf, thresholds(mode, tg, tr_up), inputs, targets, d3);
    CHECK(raised_r.count(TokenClass::Random) <= sel.count(TokenClass::Random));
  }
}

TEST_CASE("t_golden = 1 selects only gold") {
  const auto inputs = TokenMatrix::from_rows({{kBos, 5, 6}, {kBos, 7}});
  const auto targets = TokenMatrix::from_rows({{5, 6, kEos}, {7, kEos}});
  Rng rng(11);
  const auto sel = select_tokens({1, 1, 1, 1, 1, 1}, thresholds(ScheduleMode::ConfidenceAware, 1.0, 1.0), inputs,
                                 targets, rng);
  CHECK(sel.count(TokenClass::Golden) == sel.fractions().positions);
}

TEST_CASE("mixed inputs against per-position assembly") {
  Rng rng(12);
  const std::size_t vocab = 9, d = 4;
  const auto table = testing::random_tensor({vocab, d}, rng, false);
  const auto inputs = TokenMatrix::from_rows({{kBos, 5, 6, 7}, {kBos, 8, 3}});
  const auto probs = ops::softmax(testing::random_tensor({2, 4, vocab}, rng, false, 2.0), -1);

  auto sel = TokenSelection::all_golden(inputs);
  const auto all_gold = build_mixed_input(sel, inputs, probs, table);
  const auto tf = ops::embedding_lookup(table, inputs.ids, {2, 4});
  CHECK(std::equal(all_gold.embeddings.data().begin(), all_gold.embeddings.data().end(), tf.data().begin()));

  sel.classes[0 * 4 + 1] = TokenClass::Predicted;
  sel.classes[0 * 4 + 3] = TokenClass::Random;
  sel.replacement[0 * 4 + 3] = 6;
  sel.classes[1 * 4 + 2] = TokenClass::Predicted;
  for (const auto kind : {PredictionKind::Soft, PredictionKind::HardArgmax}) {
    const auto mixed = build_mixed_input(sel, inputs, probs, table, kind);
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t p = 0; p < 4; ++p) {
        const auto cls = sel.at(r, p);
        for (std::size_t j = 0; j < d; ++j) {
          double expected = 0;
          if (cls == TokenClass::Golden) {
            expected = table.data()[static_cast<std::size_t>(inputs.at(r, p)) * d + j];
          } else if (cls == TokenClass::Random) {
            expected = table.data()[static_cast<std::size_t>(sel.replacement[r * 4 + p]) * d + j];
          } else {
            const auto* row = probs.data().data() + (r * 4 + p - 1) * vocab;
            if (kind == PredictionKind::Soft) {
              for (std::size_t v = 0; v < vocab; ++v) {
                expected += static_cast<double>(row[v]) * table.data()[v * d + j];
              }
            } else {
              const auto best = static_cast<std::size_t>(std::max_element(row, row + vocab) - row);
              expected = table.data()[best * d + j];
            }
          }
          CHECK(std::abs(mixed.embeddings.data()[(r * 4 + p) * d + j] - expected) < 1e-12);
        }
      }
    }
  }

  // one-hot prediction picks the predicted token's embedding
  std::vector<Scalar> onehot(2 * 4 * vocab, 0);
  for (std::size_t i = 0; i < 8; ++i) {
    onehot[i * vocab + 7] = 1;
  }
  const auto hot = build_mixed_input(sel, inputs, Tensor::from({2, 4, vocab}, onehot), table);
  for (std::size_t j = 0; j < d; ++j) {
    CHECK(hot.embeddings.data()[(0 * 4 + 1) * d + j] == table.data()[7 * d + j]);
  }
}

TEST_CASE("schedule config round-trips through JSON with the documented field names") {
  ScheduleConfig c;
  c.mode = ScheduleMode::VanillaSS;
  c.strategy = DecayStrategy(ExponentialDecay{0.999});
  c.estimator = {EstimatorKind::McVariance, 7, 0.2};
  c.t_golden = 0.8;
  c.t_rand = 0.85;
  nlohmann::json j;
  to_json(j, c);
  for (const char* key : {"mode", "strategy", "k", "estimator", "K", "t_golden", "t_rand"}) {
    CHECK(j.contains(key));
  }
  const auto back = schedule_from_json(j);
  nlohmann::json j2;
  to_json(j2, back);
  CHECK(j == j2);
  auto bad = j;
  bad["mode"] = "confidence_aware_denoising";
  bad["t_golden"] = 0.99;
  CHECK_THROWS_AS(schedule_from_json(bad), ConfigError);
}
