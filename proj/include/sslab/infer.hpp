#pragma once

#include <cstddef>
#include <vector>

#include "sslab/model.hpp"

namespace sslab {

// Inference-only decoder that runs one position at a time, caching each
// layer's self-attention keys and values. Works on raw parameter values (no
// graph) with dropout off. Each row is computed independently of the others
// in a call, so results do not depend on how hypotheses are batched.
class IncrementalDecoder {
 public:
  struct State {
    std::size_t memory_row = 0;
    std::size_t length = 0;  // positions consumed so far
    std::vector<std::vector<Scalar>> keys;    // per layer, [length, d]
    std::vector<std::vector<Scalar>> values;  // per layer, [length, d]
  };

  IncrementalDecoder(const Transformer& model, const EncoderMemory& memory);

  State start(std::size_t memory_row) const;

  // Feeds tokens[i] to states[i] at its next position and returns logits for
  // the following position, [states.size(), vocab] row-major.
  std::vector<Scalar> step(const std::vector<State*>& states, const std::vector<int>& tokens) const;

  std::size_t vocab() const { return vocab_; }

 private:
  const Transformer& model_;
  std::size_t d_;
  std::size_t heads_;
  std::size_t vocab_;
  std::size_t src_len_;
  std::vector<std::size_t> src_lengths_;
  // Cross-attention projections of the encoder states, per layer [B, S, d].
  std::vector<std::vector<Scalar>> cross_keys_;
  std::vector<std::vector<Scalar>> cross_values_;
};

}  // namespace sslab
