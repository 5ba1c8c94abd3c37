#include "sslab/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "sslab/errors.hpp"

namespace sslab {

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) {
    throw ContractError("Rng::uniform_int: empty range");
  }
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = engine_();
  while (x >= limit) {
    x = engine_();
  }
  return x % n;
}

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::state() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

void Rng::set_state(const std::string& text) {
  std::istringstream in(text);
  in >> engine_;
  if (in.fail()) {
    throw FormatError("invalid RNG state string");
  }
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view name) {
  return splitmix64(master + fnv1a64(name));
}

RngStreams::RngStreams(std::uint64_t master_seed)
    : init(derive_seed(master_seed, kInit)),
      dropout_pass1(derive_seed(master_seed, kDropoutPass1)),
      dropout_pass2(derive_seed(master_seed, kDropoutPass2)),
      data(derive_seed(master_seed, kData)),
      sampling(derive_seed(master_seed, kSampling)),
      monte_carlo(derive_seed(master_seed, kMonteCarlo)) {}

}  // namespace sslab
