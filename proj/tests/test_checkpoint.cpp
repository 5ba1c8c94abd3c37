#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "sslab/checkpoint.hpp"
#include "sslab/compare.hpp"
#include "sslab/errors.hpp"

using namespace sslab;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.vocab_size_src = c.vocab_size_tgt = 9;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.n_encoder_layers = c.n_decoder_layers = 1;
  c.max_len = 6;
  return c;
}

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.header["kind"] = "test";
  c.header["step"] = 7;
  c.arrays.push_back({"a", {2, 3}, {1.0, -2.5, 0.1, 1e-300, -0.0, std::numeric_limits<double>::max()}});
  c.arrays.push_back({"empty", {0}, {}});
  c.arrays.push_back({"scalar", {1}, {std::nextafter(1.0, 2.0)}});
  return c;
}

std::string record(std::uint64_t step, double acc) {
  return nlohmann::json{{"step", step}, {"val_token_acc", acc}}.dump() + "\n";
}

}  // namespace

TEST_CASE("checkpoint bytes round trip exactly") {
  const auto c = sample_checkpoint();
  const auto bytes = encode_checkpoint(c);
  const auto back = decode_checkpoint(bytes);
  CHECK(back.header == c.header);
  REQUIRE(back.arrays.size() == c.arrays.size());
  for (std::size_t i = 0; i < c.arrays.size(); ++i) {
    CHECK(back.arrays[i].name == c.arrays[i].name);
    CHECK(back.arrays[i].shape == c.arrays[i].shape);
    CHECK(back.arrays[i].values == c.arrays[i].values);
  }
  CHECK(std::signbit(back.arrays[0].values[4]));
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(back.find("scalar") != nullptr);
  CHECK(back.find("nope") == nullptr);
}

TEST_CASE("damaged checkpoints are rejected") {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  for (std::size_t cut = 0; cut < bytes.size(); cut += 7) {
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, cut)), FormatError);
  }
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad_magic), doctest::Contains("magic"), FormatError);
  CHECK_THROWS_WITH_AS(decode_checkpoint(bytes + "junk"), doctest::Contains("after"), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(""), FormatError);
}

TEST_CASE("checkpoint files") {
  const auto dir = std::filesystem::temp_directory_path() / "sslab_test_checkpoint";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto path = dir / "c.ckpt";
  write_checkpoint(path, sample_checkpoint());
  CHECK(encode_checkpoint(read_checkpoint(path)) == encode_checkpoint(sample_checkpoint()));
  CHECK(std::distance(std::filesystem::directory_iterator(dir), std::filesystem::directory_iterator{}) == 1);
  CHECK_THROWS_WITH_AS(read_checkpoint(dir / "missing.ckpt"), doctest::Contains("missing.ckpt"), FormatError);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_WITH_AS(read_checkpoint(path), doctest::Contains("c.ckpt"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("model parameters survive a checkpoint") {
  Rng rng(21);
  const Transformer model(small_model(), rng);
  Checkpoint c;
  add_model(c, model);
  const auto back = model_from_checkpoint(decode_checkpoint(encode_checkpoint(c)));
  CHECK(nlohmann::json(back.config()) == nlohmann::json(model.config()));
  const auto a = model.params().named();
  const auto b = back.params().named();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.shape() == b[i].second.shape());
    const auto x = a[i].second.data();
    const auto y = b[i].second.data();
    CHECK(std::equal(x.begin(), x.end(), y.begin(), y.end()));
  }
}

TEST_CASE("model checkpoint errors name the parameter") {
  Rng rng(22);
  const Transformer model(small_model(), rng);
  Checkpoint c;
  add_model(c, model);
  const auto victim = c.arrays[3].name.substr(6);

  auto missing = c;
  missing.arrays.erase(missing.arrays.begin() + 3);
  CHECK_THROWS_WITH_AS(model_from_checkpoint(missing), doctest::Contains(victim.c_str()), FormatError);

  auto reshaped = c;
  reshaped.arrays[3].shape.push_back(1);
  CHECK_THROWS_WITH_AS(model_from_checkpoint(reshaped), doctest::Contains(victim.c_str()), FormatError);

  auto no_config = c;
  no_config.header.erase("model");
  CHECK_THROWS_AS(model_from_checkpoint(no_config), FormatError);
}

TEST_CASE("metrics parsing") {
  const std::string text = record(10, 0.2) + "\n" + R"({"step":10,"event":"phase_switch"})" "\n" +
                           record(20, 0.4) + R"({"step":30,"val_tok)";
  const auto run = parse_metrics(text, "m.jsonl");
  REQUIRE(run.records.size() == 2);
  CHECK(run.records[1]["step"] == 20);
  const auto series = metric_series(run, "val_token_acc");
  CHECK(series == std::vector<std::pair<std::uint64_t, double>>{{10, 0.2}, {20, 0.4}});

  CHECK_THROWS_WITH_AS(parse_metrics(record(1, 0.1) + "{oops\n", "m.jsonl"), doctest::Contains("m.jsonl:2"),
                       InputError);
  CHECK_THROWS_WITH_AS(parse_metrics("{\"loss\":1}\n", "x"), doctest::Contains("x:1"), InputError);
  CHECK_THROWS_AS(read_metrics("/nonexistent/metrics.jsonl"), InputError);
}

TEST_CASE("compare speedups") {
  std::string slow, fast;
  for (std::uint64_t s = 100; s <= 500; s += 100) {
    slow += record(s, s >= 300 ? 0.8 : 0.5);
    fast += record(s, s >= 100 ? 0.8 : 0.5);
  }
  const auto a = parse_metrics(slow, "slow");
  const auto b = parse_metrics(fast, "fast");
  const auto c = compare_runs({a, b}, "val_token_acc", 0.75);
  REQUIRE(c.rows.size() == 2);
  CHECK(c.rows[0].steps_to_threshold == 300u);
  CHECK(c.rows[1].steps_to_threshold == 100u);
  CHECK(c.rows[0].speedup == doctest::Approx(1.0));
  CHECK(c.rows[1].speedup == doctest::Approx(3.0));

  const auto self = compare_runs({a}, "val_token_acc");
  CHECK(self.threshold == doctest::Approx(0.8));
  CHECK(self.rows[0].speedup == doctest::Approx(1.0));

  const auto never = compare_runs({a, parse_metrics(record(100, 0.1), "flat")}, "val_token_acc", 0.75);
  CHECK_FALSE(never.rows[1].steps_to_threshold.has_value());
  CHECK_FALSE(never.rows[1].speedup.has_value());

  const auto j = c.to_json();
  CHECK(j["metric"] == "val_token_acc");
  CHECK(j["runs"].size() == 2);
  for (const char* key : {"file", "final", "final_val_token_acc", "final_val_seq_acc", "final_val_bleu",
                          "steps_to_threshold", "speedup"}) {
    CHECK(j["runs"][0].contains(key));
  }
  CHECK(j["runs"][0]["final_val_bleu"].is_null());
  CHECK(c.table().find("fast") != std::string::npos);
  CHECK_THROWS_AS(compare_runs({}, "val_token_acc"), InputError);
  CHECK_THROWS_AS(compare_runs({parse_metrics(record(1, 0.1), "r")}, "val_bleu"), InputError);
}
