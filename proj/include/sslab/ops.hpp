#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sslab/rng.hpp"
#include "sslab/tensor.hpp"

namespace sslab::ops {

// Matrix product over the last two axes. Leading (batch) axes must match,
// or one operand may be a plain matrix that is broadcast over the other's
// batch axes.
Tensor matmul(const Tensor& a, const Tensor& b);

// x [..., k] times w [k, n] plus bias b [n], as one node.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Elementwise ops. `b` may have the same shape as `a` or a shape equal to a
// suffix of `a`'s shape, in which case it is broadcast (bias-style).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Scalar factor);
Tensor relu(const Tensor& x);
// tanh approximation.
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Max-subtracted softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis = -1);

// Mean negative log-likelihood over positions with mask != 0. `logits` has
// shape [..., V]; `targets` and `mask` have one entry per leading position.
// With label_smoothing > 0 the target distribution is
// (1 - ls) * onehot + ls / V.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask, Scalar label_smoothing = 0);

// Normalizes over the last axis, then applies gamma * x_hat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps = 1e-5);

// Rows of `table` [V, d] gathered into shape lead_shape + [d].
Tensor embedding_lookup(const Tensor& table, std::span<const int> indices, const Shape& lead_shape);

// Inverted dropout. rate == 0 returns `x` itself and draws nothing.
Tensor dropout(const Tensor& x, Scalar rate, Rng& rng);

Tensor reshape(const Tensor& x, Shape shape);
// Generalized transpose: output axis i is input axis perm[i].
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
// Swaps the last two axes.
Tensor transpose(const Tensor& x);

// Attention score masking. `scores` is [B, H, Tq, Tk]; `allowed` is
// [B, Tq, Tk] and shared across heads. Disallowed entries become a large
// negative constant so softmax assigns them exactly zero weight.
Tensor mask_scores(const Tensor& scores, std::span<const std::uint8_t> allowed);

// Scaled dot-product attention with heads split from the last axis.
// q [B, Tq, d], k and v [B, Tk, d], allowed [B, Tq, Tk]. Returns the merged
// context [B, Tq, d]. Same result as split/permute, matmul, scale,
// mask_scores, softmax, matmul, merge.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::span<const std::uint8_t> allowed, std::size_t heads);

// Row selection across same-shaped sources [..., d]: row r of the output is
// row r of sources[choice[r]]. Gradients are routed to the chosen source only.
Tensor select_rows(const std::vector<Tensor>& sources, std::span<const std::uint8_t> choice);

// Row gather over the last axis: output row i is input row rows[i]. Output
// shape is lead_shape + [d]. Gradients scatter-add back.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows, const Shape& lead_shape);

inline constexpr Scalar kMaskedScore = Scalar(-1e9);

}  // namespace sslab::ops
