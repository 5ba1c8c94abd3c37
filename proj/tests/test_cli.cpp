#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "sslab_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Outcome sslab(const std::string& args) {
  const auto out = scratch() / "stdout.txt";
  const auto err = scratch() / "stderr.txt";
  const std::string cmd = std::string(SSLAB_BIN) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string tiny() { return std::string(SSLAB_SOURCE_DIR) + "/configs/tiny.json"; }

std::string train_into(const std::string& name, const std::string& extra = "") {
  const auto dir = scratch() / name;
  const auto r = sslab("train -q " + tiny() + " --output_dir " + dir.string() + " " + extra);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  return dir.string();
}

std::vector<nlohmann::json> records(const std::string& dir) {
  std::vector<nlohmann::json> out;
  std::ifstream in(fs::path(dir) / "metrics.jsonl");
  for (std::string line; std::getline(in, line);) {
    out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

}  // namespace

TEST_CASE("missing config file") {
  const auto r = sslab("train " + (scratch() / "nope.json").string());
  CHECK(r.code != 0);
  CHECK(r.err.find("nope.json") != std::string::npos);
}

TEST_CASE("invalid config values exit with code 2 and name the field") {
  const auto r = sslab("train " + tiny() + " --output_dir " + (scratch() / "bad").string() +
                       " --schedule.t_golden 0.9 --schedule.t_rand 0.5");
  CHECK(r.code == 2);
  CHECK(r.err.find("t_golden") != std::string::npos);
  const auto r2 = sslab("train " + tiny() + " --output_dir " + (scratch() / "bad").string() + " --model.d_model 15");
  CHECK(r2.code == 2);
  CHECK(r2.err.find("d_model") != std::string::npos);
}

TEST_CASE("teacher forcing through overrides keeps every token golden") {
  const auto dir = train_into("tf", "--schedule.mode teacher_forcing --train.phase2_steps 0");
  const auto recs = records(dir);
  REQUIRE_FALSE(recs.empty());
  for (const auto& r : recs) {
    if (!r.contains("event")) {
      CHECK(r["frac_golden"].get<double>() == 1.0);
      CHECK(r["phase"] == 1);
    }
  }
  CHECK(recs.back()["step"] == 20);
}

TEST_CASE("reruns write identical metrics and eval reproduces the final validation") {
  const auto a = train_into("a");
  const auto b = train_into("b");
  CHECK(slurp(fs::path(a) / "metrics.jsonl") == slurp(fs::path(b) / "metrics.jsonl"));

  const auto ckpt = (fs::path(a) / "checkpoints" / "final.ckpt").string();
  const auto valid = (fs::path(a) / "data" / "valid.txt").string();
  const auto r = sslab("eval " + ckpt + " " + valid);
  REQUIRE(r.code == 0);
  const auto report = nlohmann::json::parse(r.out);
  const auto last = records(a).back();
  REQUIRE(last["val_token_acc"].is_number());
  CHECK(report["token_acc"].get<double>() == last["val_token_acc"].get<double>());
  CHECK(report["seq_acc"].get<double>() == last["val_seq_acc"].get<double>());
  CHECK(report["bleu"].get<double>() == last["val_bleu"].get<double>());

  const auto beam1 = sslab("eval " + ckpt + " " + valid + " --decode beam --beam_size 1 --length_penalty 0");
  REQUIRE(beam1.code == 0);
  CHECK(nlohmann::json::parse(beam1.out) == report);

  const auto cmp = sslab("compare --format json --metric val_token_acc " + a + "/metrics.jsonl " + b + "/metrics.jsonl");
  REQUIRE(cmp.code == 0);
  const auto j = nlohmann::json::parse(cmp.out);
  CHECK(j["runs"].size() == 2);
  CHECK(j["runs"][1]["speedup"].get<double>() == 1.0);
}

TEST_CASE("resuming from a checkpoint reproduces the run") {
  const auto full = train_into("full");
  const auto part = train_into("part", "--stop_at 20");
  CHECK_FALSE(fs::exists(fs::path(part) / "test_report.json"));
  const auto resumed = train_into("part", "--resume " + part + "/checkpoints/step_20.ckpt");
  CHECK(slurp(fs::path(resumed) / "metrics.jsonl") == slurp(fs::path(full) / "metrics.jsonl"));
  const auto valid = full + "/data/valid.txt";
  const auto x = sslab("eval " + full + "/checkpoints/final.ckpt " + valid);
  const auto y = sslab("eval " + resumed + "/checkpoints/final.ckpt " + valid);
  CHECK(x.code == 0);
  CHECK(x.out == y.out);
}

TEST_CASE("damaged checkpoint fails cleanly") {
  const auto dir = train_into("trunc");
  const auto ckpt = fs::path(dir) / "checkpoints" / "final.ckpt";
  fs::resize_file(ckpt, fs::file_size(ckpt) / 2);
  const auto r = sslab("eval " + ckpt.string() + " " + dir + "/data/valid.txt");
  CHECK(r.code != 0);
  CHECK(r.out.empty());
  CHECK(r.err.find("final.ckpt") != std::string::npos);
}

TEST_CASE("divergence exits with code 3 and leaves diagnostics") {
  const auto dir = scratch() / "nan";
  const auto r = sslab("train -q " + tiny() + " --output_dir " + dir.string() + " --train.lr_scale 1e300");
  CHECK(r.code == 3);
  CHECK(r.err.find("step") != std::string::npos);
  const auto diag = slurp(dir / "diagnostics.txt");
  CHECK(diag.find("lr=") != std::string::npos);
  CHECK(diag.find("out_w") != std::string::npos);
}

TEST_CASE("a run is reproducible from its resolved config") {
  const auto a = train_into("orig", "--seed 9 --schedule.estimator mc_variance");
  const auto b = scratch() / "replay";
  const auto r = sslab("train -q " + a + "/resolved_config.json --output_dir " + b.string());
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(slurp(fs::path(a) / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
}

TEST_CASE("compare table and errors") {
  const auto dir = train_into("cmp");
  const auto m = dir + "/metrics.jsonl";
  const auto r = sslab("compare --metric val_token_acc " + m + " " + m + " " + m);
  REQUIRE(r.code == 0);
  std::size_t rows = 0;
  for (std::size_t pos = 0; (pos = r.out.find(m, pos)) != std::string::npos; pos += m.size()) {
    ++rows;
  }
  CHECK(rows == 3);

  const auto bad = scratch() / "bad.jsonl";
  std::ofstream(bad) << slurp(m).substr(0, slurp(m).find('\n') + 1) << "{not json\n";
  const auto e = sslab("compare " + bad.string());
  CHECK(e.code != 0);
  CHECK(e.out.empty());
  CHECK(e.err.find("bad.jsonl:2") != std::string::npos);
}
