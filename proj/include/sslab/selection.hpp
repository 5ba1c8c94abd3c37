#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "sslab/tokens.hpp"

namespace sslab {

enum class TokenClass : std::uint8_t { Golden = 0, Predicted = 1, Random = 2 };

// Per decoder-input position: keep the gold token, use the first-pass
// prediction, or substitute a random token from the same target sentence.
struct TokenSelection {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> lengths;
  std::vector<TokenClass> classes;
  std::vector<int> replacement;  // token id at RANDOM positions, -1 elsewhere

  static TokenSelection all_golden(const TokenMatrix& decoder_inputs);

  TokenClass at(std::size_t r, std::size_t c) const { return classes[r * cols + c]; }
  std::size_t count(TokenClass cls) const;  // over non-pad positions

  struct Fractions {
    double golden = 0;
    double predicted = 0;
    double random = 0;
    std::size_t positions = 0;
  };
  Fractions fractions() const;
};

}  // namespace sslab
