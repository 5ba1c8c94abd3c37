#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace sslab {

// Reserved vocabulary entries shared by source and target sides.
inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kPad = 2;
inline constexpr int kNumReserved = 3;

inline bool is_reserved(int token) { return token >= 0 && token < kNumReserved; }

using Sentence = std::vector<int>;

// Right-padded [rows x cols] token ids with per-row valid lengths.
struct TokenMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<int> ids;
  std::vector<std::size_t> lengths;

  static TokenMatrix from_rows(const std::vector<Sentence>& sentences, std::size_t min_cols = 0);

  int at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
  int& at(std::size_t r, std::size_t c) { return ids[r * cols + c]; }
  bool valid(std::size_t r, std::size_t c) const { return c < lengths[r]; }
  // 1 where the position holds a real token.
  std::vector<std::uint8_t> mask() const;
  Sentence row(std::size_t r) const;
};

}  // namespace sslab
