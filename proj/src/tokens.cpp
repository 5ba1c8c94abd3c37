#include "sslab/tokens.hpp"

#include <algorithm>

#include "sslab/selection.hpp"

namespace sslab {

TokenMatrix TokenMatrix::from_rows(const std::vector<Sentence>& sentences, std::size_t min_cols) {
  TokenMatrix m;
  m.rows = sentences.size();
  m.cols = min_cols;
  for (const auto& s : sentences) {
    m.cols = std::max(m.cols, s.size());
  }
  m.ids.assign(m.rows * m.cols, kPad);
  m.lengths.resize(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) {
    std::copy(sentences[r].begin(), sentences[r].end(), m.ids.begin() + static_cast<std::ptrdiff_t>(r * m.cols));
    m.lengths[r] = sentences[r].size();
  }
  return m;
}

std::vector<std::uint8_t> TokenMatrix::mask() const {
  std::vector<std::uint8_t> out(rows * cols, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(r * cols), lengths[r], 1);
  }
  return out;
}

Sentence TokenMatrix::row(std::size_t r) const {
  const auto begin = ids.begin() + static_cast<std::ptrdiff_t>(r * cols);
  return Sentence(begin, begin + static_cast<std::ptrdiff_t>(lengths[r]));
}

TokenSelection TokenSelection::all_golden(const TokenMatrix& decoder_inputs) {
  TokenSelection s;
  s.rows = decoder_inputs.rows;
  s.cols = decoder_inputs.cols;
  s.lengths = decoder_inputs.lengths;
  s.classes.assign(s.rows * s.cols, TokenClass::Golden);
  s.replacement.assign(s.rows * s.cols, -1);
  return s;
}

std::size_t TokenSelection::count(TokenClass cls) const {
  std::size_t n = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < lengths[r]; ++c) {
      n += at(r, c) == cls;
    }
  }
  return n;
}

TokenSelection::Fractions TokenSelection::fractions() const {
  Fractions f;
  for (const auto len : lengths) {
    f.positions += len;
  }
  if (f.positions == 0) {
    return f;
  }
  const auto total = static_cast<double>(f.positions);
  f.golden = static_cast<double>(count(TokenClass::Golden)) / total;
  f.predicted = static_cast<double>(count(TokenClass::Predicted)) / total;
  f.random = static_cast<double>(count(TokenClass::Random)) / total;
  return f;
}

}  // namespace sslab
