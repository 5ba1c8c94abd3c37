#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace sslab {

// Seedable random stream. Distributions are computed from raw 64-bit draws
// rather than <random> distributions so results do not depend on the
// standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via Box-Muller (one value per call).
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  // Engine state as text (std::mt19937_64 stream format); round-trips exactly.
  std::string state() const;
  void set_state(const std::string& text);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view text);

// Seed for a named stream: splitmix64(master + fnv1a64(name)).
std::uint64_t derive_seed(std::uint64_t master, std::string_view name);

// One stream per source of randomness so each can be frozen independently.
struct RngStreams {
  static constexpr std::string_view kInit = "init";
  static constexpr std::string_view kDropoutPass1 = "dropout-pass1";
  static constexpr std::string_view kDropoutPass2 = "dropout-pass2";
  static constexpr std::string_view kData = "data";
  static constexpr std::string_view kSampling = "sampling";
  static constexpr std::string_view kMonteCarlo = "mc-dropout";

  explicit RngStreams(std::uint64_t master_seed = 0);

  Rng init;
  Rng dropout_pass1;
  Rng dropout_pass2;
  Rng data;
  Rng sampling;
  Rng monte_carlo;
};

}  // namespace sslab
