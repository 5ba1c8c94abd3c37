#include "sslab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "sslab/errors.hpp"

namespace sslab::ops {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

Node& input(Node& self, std::size_t i) { return *self.inputs[i]; }
bool wants_grad(Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

Shape leading(const Shape& s, std::size_t keep_back) {
  return Shape(s.begin(), s.end() - static_cast<std::ptrdiff_t>(keep_back));
}

// True when `b` is `a` itself or a trailing suffix of it.
bool broadcastable_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) {
    return false;
  }
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_broadcast(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  if (!broadcastable_suffix(a.shape(), b.shape())) {
    throw ShapeError(std::string(name) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
  }
  const auto n = a.numel();
  const auto inner = b.numel();
  const auto av = a.data();
  const auto bv = b.data();
  const auto outer = inner ? n / inner : 0;
  Buffer out(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      out[o * inner + j] = fwd(av[o * inner + j], bv[j]);
    }
  }
  return detail::make_result(a.shape(), std::move(out), {a, b}, [outer, inner, da, db](Node& self) {
    auto& na = input(self, 0);
    auto& nb = input(self, 1);
    if (wants_grad(self, 0)) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
          const auto i = o * inner + j;
          na.grad[i] += da(self.grad[i], na.value[i], nb.value[j]);
        }
      }
    }
    if (wants_grad(self, 1)) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
          const auto i = o * inner + j;
          nb.grad[j] += db(self.grad[i], na.value[i], nb.value[j]);
        }
      }
    }
  });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.data();
  Buffer out(xv.size());
  std::transform(xv.begin(), xv.end(), out.begin(), fwd);
  return detail::make_result(x.shape(), std::move(out), {x}, [deriv](Node& self) {
    auto& nx = input(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      nx.grad[i] += self.grad[i] * deriv(nx.value[i], self.value[i]);
    }
  });
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const auto mismatch = [&](const std::string& why) {
    return ShapeError("matmul: " + why + ": " + shape_str(sa) + " x " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) {
    throw mismatch("operands must have rank >= 2");
  }
  const auto m = a.dim(-2);
  const auto k = a.dim(-1);
  const auto n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw mismatch("inner dimensions differ");
  }

  if (sb.size() == 2) {
    // One large GEMM with all leading rows of `a` stacked.
    const auto rows = a.numel() / k;
    Shape out_shape = leading(sa, 1);
    out_shape.push_back(n);
    Buffer out(rows * n);
    MatMap(out.data(), rows, n).noalias() =
        ConstMatMap(a.data().data(), rows, k) * ConstMatMap(b.data().data(), k, n);
    return detail::make_result(std::move(out_shape), std::move(out), {a, b}, [rows, k, n](Node& self) {
      auto& na = input(self, 0);
      auto& nb = input(self, 1);
      ConstMatMap dc(self.grad.data(), rows, n);
      if (wants_grad(self, 0)) {
        MatMap(na.grad.data(), rows, k).noalias() += dc * ConstMatMap(nb.value.data(), k, n).transpose();
      }
      if (wants_grad(self, 1)) {
        MatMap(nb.grad.data(), k, n).noalias() += ConstMatMap(na.value.data(), rows, k).transpose() * dc;
      }
    });
  }

  const Shape lead_a = leading(sa, 2);
  const Shape lead_b = leading(sb, 2);
  const bool broadcast_a = sa.size() == 2;
  if (!broadcast_a && lead_a != lead_b) {
    throw mismatch("batch dimensions differ");
  }
  const Shape& lead = broadcast_a ? lead_b : lead_a;
  const auto batches = numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const std::size_t stride_a = broadcast_a ? 0 : m * k;
  const std::size_t stride_b = k * n;
  const std::size_t stride_c = m * n;
  Buffer out(batches * stride_c);
  const auto* av = a.data().data();
  const auto* bv = b.data().data();
  for (std::size_t i = 0; i < batches; ++i) {
    MatMap(out.data() + i * stride_c, m, n).noalias() =
        ConstMatMap(av + i * stride_a, m, k) * ConstMatMap(bv + i * stride_b, k, n);
  }
  return detail::make_result(
      std::move(out_shape), std::move(out), {a, b},
      [batches, m, k, n, stride_a, stride_b, stride_c](Node& self) {
        auto& na = input(self, 0);
        auto& nb = input(self, 1);
        for (std::size_t i = 0; i < batches; ++i) {
          ConstMatMap dc(self.grad.data() + i * stride_c, m, n);
          if (wants_grad(self, 0)) {
            MatMap(na.grad.data() + i * stride_a, m, k).noalias() +=
                dc * ConstMatMap(nb.value.data() + i * stride_b, k, n).transpose();
          }
          if (wants_grad(self, 1)) {
            MatMap(nb.grad.data() + i * stride_b, k, n).noalias() +=
                ConstMatMap(na.value.data() + i * stride_a, m, k).transpose() * dc;
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1 || x.dim(-1) != w.dim(0) || b.dim(0) != w.dim(1)) {
    throw ShapeError("linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()) + " + " +
                     shape_str(b.shape()));
  }
  const auto k = w.dim(0);
  const auto n = w.dim(1);
  const auto rows = x.numel() / k;
  Shape out_shape = leading(x.shape(), 1);
  out_shape.push_back(n);
  Buffer out(rows * n);
  MatMap o(out.data(), rows, n);
  o.noalias() = ConstMatMap(x.data().data(), rows, k) * ConstMatMap(w.data().data(), k, n);
  o.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(b.data().data(), n);
  return detail::make_result(std::move(out_shape), std::move(out), {x, w, b}, [rows, k, n](Node& self) {
    ConstMatMap dc(self.grad.data(), rows, n);
    if (wants_grad(self, 0)) {
      auto& nx = input(self, 0);
      MatMap(nx.grad.data(), rows, k).noalias() += dc * ConstMatMap(input(self, 1).value.data(), k, n).transpose();
    }
    if (wants_grad(self, 1)) {
      auto& nw = input(self, 1);
      MatMap(nw.grad.data(), k, n).noalias() += ConstMatMap(input(self, 0).value.data(), rows, k).transpose() * dc;
    }
    if (wants_grad(self, 2)) {
      auto& nb = input(self, 2);
      Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(nb.grad.data(), n) += dc.colwise().sum();
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      "add", a, b, [](Scalar x, Scalar y) { return x + y; },
      [](Scalar g, Scalar, Scalar) { return g; }, [](Scalar g, Scalar, Scalar) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      "sub", a, b, [](Scalar x, Scalar y) { return x - y; },
      [](Scalar g, Scalar, Scalar) { return g; }, [](Scalar g, Scalar, Scalar) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      "mul", a, b, [](Scalar x, Scalar y) { return x * y; },
      [](Scalar g, Scalar, Scalar y) { return g * y; }, [](Scalar g, Scalar x, Scalar) { return g * x; });
}

Tensor scale(const Tensor& x, Scalar factor) {
  return unary(
      x, [factor](Scalar v) { return v * factor; }, [factor](Scalar, Scalar) { return factor; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return v > 0 ? v : Scalar{0}; },
      [](Scalar v, Scalar) { return v > 0 ? Scalar{1} : Scalar{0}; });
}

Tensor gelu(const Tensor& x) {
  constexpr Scalar c = Scalar(0.7978845608028654);  // sqrt(2/pi)
  constexpr Scalar a = Scalar(0.044715);
  return unary(
      x,
      [](Scalar v) { return Scalar(0.5) * v * (1 + std::tanh(c * (v + a * v * v * v))); },
      [](Scalar v, Scalar) {
        const Scalar u = c * (v + a * v * v * v);
        const Scalar th = std::tanh(u);
        const Scalar du = c * (1 + 3 * a * v * v);
        return Scalar(0.5) * (1 + th) + Scalar(0.5) * v * (1 - th * th) * du;
      });
}

Tensor sum(const Tensor& x) {
  Scalar total = 0;
  for (const auto v : x.data()) {
    total += v;
  }
  return detail::make_result({1}, {total}, {x}, [](Node& self) {
    auto& nx = input(self, 0);
    for (auto& g : nx.grad) {
      g += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), Scalar{1} / static_cast<Scalar>(x.numel())); }

Tensor softmax(const Tensor& x, int axis) {
  const auto& s = x.shape();
  const auto ax = normalize_axis(axis, s.size());
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < ax; ++i) {
    outer *= s[i];
  }
  for (std::size_t i = ax + 1; i < s.size(); ++i) {
    inner *= s[i];
  }
  const auto len = s[ax];
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const auto base = o * len * inner + in;
      Scalar mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) {
        mx = std::max(mx, xv[base + j * inner]);
      }
      Scalar z = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const Scalar e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) {
        out[base + j * inner] /= z;
      }
    }
  }
  return detail::make_result(s, std::move(out), {x}, [outer, inner, len](Node& self) {
    auto& nx = input(self, 0);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const auto base = o * len * inner + in;
        Scalar dot = 0;
        for (std::size_t j = 0; j < len; ++j) {
          dot += self.grad[base + j * inner] * self.value[base + j * inner];
        }
        for (std::size_t j = 0; j < len; ++j) {
          const auto idx = base + j * inner;
          nx.grad[idx] += self.value[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask, Scalar label_smoothing) {
  const auto vocab = logits.dim(-1);
  const auto rows = logits.numel() / vocab;
  if (targets.size() != rows || mask.size() != rows) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " need " +
                     std::to_string(rows) + " targets and mask entries, got " +
                     std::to_string(targets.size()) + " and " + std::to_string(mask.size()));
  }
  if (label_smoothing < 0 || label_smoothing >= 1) {
    throw ConfigError("cross_entropy: label_smoothing must be in [0,1)");
  }
  const auto lv = logits.data();
  Buffer probs(lv.size());
  Scalar total = 0;
  std::size_t counted = 0;
  const Scalar off = label_smoothing / static_cast<Scalar>(vocab);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) {
      continue;
    }
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw InputError("cross_entropy: target index " + std::to_string(t) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
    const Scalar* row = lv.data() + r * vocab;
    const Scalar mx = *std::max_element(row, row + vocab);
    Scalar z = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      z += std::exp(row[j] - mx);
    }
    const Scalar log_z = mx + std::log(z);
    Scalar nll = -(row[t] - log_z);
    if (label_smoothing > 0) {
      Scalar sum_logp = 0;
      for (std::size_t j = 0; j < vocab; ++j) {
        sum_logp += row[j] - log_z;
      }
      nll = (1 - label_smoothing) * nll - off * sum_logp;
    }
    total += nll;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(row[j] - log_z);
    }
    ++counted;
  }
  const Scalar loss = counted ? total / static_cast<Scalar>(counted) : Scalar{0};
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return detail::make_result(
      {1}, {loss}, {logits},
      [probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk), rows, vocab, counted,
       label_smoothing, off](Node& self) {
        if (counted == 0) {
          return;
        }
        auto& nl = input(self, 0);
        const Scalar g = self.grad[0] / static_cast<Scalar>(counted);
        for (std::size_t r = 0; r < rows; ++r) {
          if (!msk[r]) {
            continue;
          }
          for (std::size_t j = 0; j < vocab; ++j) {
            Scalar q = off;
            if (static_cast<int>(j) == tgt[r]) {
              q += 1 - label_smoothing;
            }
            nl.grad[r * vocab + j] += g * (probs[r * vocab + j] - q);
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
  const auto d = x.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match last axis of " + shape_str(x.shape()));
  }
  const auto rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  Buffer out(xv.size());
  Buffer x_hat(xv.size());
  Buffer rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* row = xv.data() + r * d;
    Scalar mu = 0;
    for (std::size_t j = 0; j < d; ++j) {
      mu += row[j];
    }
    mu /= static_cast<Scalar>(d);
    Scalar var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      var += (row[j] - mu) * (row[j] - mu);
    }
    var /= static_cast<Scalar>(d);
    rstd[r] = Scalar{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const Scalar h = (row[j] - mu) * rstd[r];
      x_hat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x_hat = std::move(x_hat), rstd = std::move(rstd), rows, d](Node& self) {
        auto& nx = input(self, 0);
        auto& ng = input(self, 1);
        auto& nb = input(self, 2);
        const bool gx = wants_grad(self, 0);
        const bool gg = wants_grad(self, 1);
        const bool gb = wants_grad(self, 2);
        Buffer dxh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const Scalar* dy = self.grad.data() + r * d;
          const Scalar* h = x_hat.data() + r * d;
          Scalar mean_dxh = 0;
          Scalar mean_dxh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            if (gg) {
              ng.grad[j] += dy[j] * h[j];
            }
            if (gb) {
              nb.grad[j] += dy[j];
            }
            dxh[j] = dy[j] * ng.value[j];
            mean_dxh += dxh[j];
            mean_dxh_h += dxh[j] * h[j];
          }
          if (!gx) {
            continue;
          }
          mean_dxh /= static_cast<Scalar>(d);
          mean_dxh_h /= static_cast<Scalar>(d);
          for (std::size_t j = 0; j < d; ++j) {
            nx.grad[r * d + j] += rstd[r] * (dxh[j] - mean_dxh - h[j] * mean_dxh_h);
          }
        }
      });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> indices, const Shape& lead_shape) {
  if (table.rank() != 2) {
    throw ShapeError("embedding_lookup: table must be [V, d], got " + shape_str(table.shape()));
  }
  if (numel(lead_shape) != indices.size()) {
    throw ShapeError("embedding_lookup: " + std::to_string(indices.size()) +
                     " indices do not fill shape " + shape_str(lead_shape));
  }
  const auto vocab = table.dim(0);
  const auto d = table.dim(1);
  const auto tv = table.data();
  Buffer out(indices.size() * d);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int t = indices[i];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw InputError("embedding_lookup: token " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(t) * d, d, out.data() + i * d);
  }
  Shape out_shape = lead_shape;
  out_shape.push_back(d);
  std::vector<int> idx(indices.begin(), indices.end());
  return detail::make_result(std::move(out_shape), std::move(out), {table},
                             [idx = std::move(idx), d](Node& self) {
                               auto& nt = input(self, 0);
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 Scalar* dst = nt.grad.data() + static_cast<std::size_t>(idx[i]) * d;
                                 const Scalar* src = self.grad.data() + i * d;
                                 for (std::size_t j = 0; j < d; ++j) {
                                   dst[j] += src[j];
                                 }
                               }
                             });
}

Tensor dropout(const Tensor& x, Scalar rate, Rng& rng) {
  if (!(rate >= 0 && rate < 1)) {
    throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
  }
  if (rate == 0) {
    return x;
  }
  const Scalar keep_scale = Scalar{1} / (1 - rate);
  const auto xv = x.data();
  Buffer multiplier(xv.size());
  Buffer out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    multiplier[i] = rng.uniform() < rate ? Scalar{0} : keep_scale;
    out[i] = xv[i] * multiplier[i];
  }
  return detail::make_result(x.shape(), std::move(out), {x},
                             [multiplier = std::move(multiplier)](Node& self) {
                               auto& nx = input(self, 0);
                               for (std::size_t i = 0; i < multiplier.size(); ++i) {
                                 nx.grad[i] += self.grad[i] * multiplier[i];
                               }
                             });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const auto xv = x.data();
  return detail::make_result(std::move(shape), Buffer(xv.begin(), xv.end()), {x},
                             [](Node& self) {
                               auto& nx = input(self, 0);
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 nx.grad[i] += self.grad[i];
                               }
                             });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const auto& s = x.shape();
  const auto r = s.size();
  if (perm.size() != r) {
    throw ShapeError("permute: permutation of size " + std::to_string(perm.size()) + " for shape " +
                     shape_str(s));
  }
  std::vector<bool> used(r, false);
  for (const auto p : perm) {
    if (p >= r || used[p]) {
      throw ShapeError("permute: invalid permutation for shape " + shape_str(s));
    }
    used[p] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) {
    in_strides[i - 1] = in_strides[i] * s[i];
  }
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);  // input stride for each output axis
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = s[perm[i]];
    strides[i] = in_strides[perm[i]];
  }
  const auto n = x.numel();
  // map[o] = input flat index of output element o
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    map[o] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      ++counter[ax];
      src += strides[ax];
      if (counter[ax] < out_shape[ax]) {
        break;
      }
      src -= strides[ax] * out_shape[ax];
      counter[ax] = 0;
    }
  }
  const auto xv = x.data();
  Buffer out(n);
  for (std::size_t o = 0; o < n; ++o) {
    out[o] = xv[map[o]];
  }
  return detail::make_result(std::move(out_shape), std::move(out), {x},
                             [map = std::move(map)](Node& self) {
                               auto& nx = input(self, 0);
                               for (std::size_t o = 0; o < map.size(); ++o) {
                                 nx.grad[map[o]] += self.grad[o];
                               }
                             });
}

Tensor transpose(const Tensor& x) {
  const auto r = x.rank();
  if (r < 2) {
    throw ShapeError("transpose: need rank >= 2, got " + shape_str(x.shape()));
  }
  std::vector<std::size_t> perm(r);
  for (std::size_t i = 0; i < r; ++i) {
    perm[i] = i;
  }
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(x, perm);
}

Tensor mask_scores(const Tensor& scores, std::span<const std::uint8_t> allowed) {
  if (scores.rank() != 4) {
    throw ShapeError("mask_scores: scores must be [B,H,Tq,Tk], got " + shape_str(scores.shape()));
  }
  const auto batch = scores.dim(0);
  const auto heads = scores.dim(1);
  const auto plane = scores.dim(2) * scores.dim(3);
  if (allowed.size() != batch * plane) {
    throw ShapeError("mask_scores: mask of size " + std::to_string(allowed.size()) +
                     " does not match scores " + shape_str(scores.shape()));
  }
  const auto sv = scores.data();
  Buffer out(sv.size());
  std::vector<std::uint8_t> keep(sv.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const auto base = (b * heads + h) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const bool ok = allowed[b * plane + p] != 0;
        keep[base + p] = ok;
        out[base + p] = ok ? sv[base + p] : kMaskedScore;
      }
    }
  }
  return detail::make_result(scores.shape(), std::move(out), {scores},
                             [keep = std::move(keep)](Node& self) {
                               auto& ns = input(self, 0);
                               for (std::size_t i = 0; i < keep.size(); ++i) {
                                 if (keep[i]) {
                                   ns.grad[i] += self.grad[i];
                                 }
                               }
                             });
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::span<const std::uint8_t> allowed, std::size_t heads) {
  if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
    throw ShapeError("multi_head_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()));
  }
  const auto batch = q.dim(0);
  const auto tq = q.dim(1);
  const auto tk = k.dim(1);
  const auto d = q.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("multi_head_attention: " + std::to_string(heads) + " heads do not divide " + std::to_string(d));
  }
  if (allowed.size() != batch * tq * tk) {
    throw ShapeError("multi_head_attention: mask of size " + std::to_string(allowed.size()) + " for [" +
                     std::to_string(batch) + "x" + std::to_string(tq) + "x" + std::to_string(tk) + "]");
  }
  const auto dh = d / heads;
  const auto scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));
  using Strided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
  const auto* qv = q.data().data();
  const auto* kv = k.data().data();
  const auto* vv = v.data().data();
  Buffer weights(batch * heads * tq * tk);
  Buffer out(batch * tq * d);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto* mask = allowed.data() + b * tq * tk;
    for (std::size_t h = 0; h < heads; ++h) {
      const auto off = h * dh;
      Strided qm(qv + b * tq * d + off, tq, dh, Eigen::OuterStride<>(d));
      Strided km(kv + b * tk * d + off, tk, dh, Eigen::OuterStride<>(d));
      Strided vm(vv + b * tk * d + off, tk, dh, Eigen::OuterStride<>(d));
      MatMap w(weights.data() + (b * heads + h) * tq * tk, tq, tk);
      w.noalias() = qm * km.transpose();
      for (std::size_t i = 0; i < tq; ++i) {
        Scalar* row = w.data() + i * tk;
        Scalar mx = -std::numeric_limits<Scalar>::infinity();
        for (std::size_t j = 0; j < tk; ++j) {
          row[j] = mask[i * tk + j] ? row[j] * scale : kMaskedScore;
          mx = std::max(mx, row[j]);
        }
        Scalar z = 0;
        for (std::size_t j = 0; j < tk; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j < tk; ++j) {
          row[j] /= z;
        }
      }
      StridedMut(out.data() + b * tq * d + off, tq, dh, Eigen::OuterStride<>(d)).noalias() = w * vm;
    }
  }
  std::vector<std::uint8_t> mask_copy(allowed.begin(), allowed.end());
  return detail::make_result(
      q.shape(), std::move(out), {q, k, v},
      [weights = std::move(weights), mask_copy = std::move(mask_copy), batch, heads, tq, tk, d, dh,
       scale](Node& self) {
        auto& nq = input(self, 0);
        auto& nk = input(self, 1);
        auto& nv = input(self, 2);
        const bool gq = wants_grad(self, 0);
        const bool gk = wants_grad(self, 1);
        const bool gv = wants_grad(self, 2);
        RowMat dw(tq, tk);
        for (std::size_t b = 0; b < batch; ++b) {
          const auto* mask = mask_copy.data() + b * tq * tk;
          for (std::size_t h = 0; h < heads; ++h) {
            const auto off = h * dh;
            const Eigen::OuterStride<> st(d);
            Strided dout(self.grad.data() + b * tq * d + off, tq, dh, st);
            Strided qm(nq.value.data() + b * tq * d + off, tq, dh, st);
            Strided km(nk.value.data() + b * tk * d + off, tk, dh, st);
            Strided vm(nv.value.data() + b * tk * d + off, tk, dh, st);
            ConstMatMap w(weights.data() + (b * heads + h) * tq * tk, tq, tk);
            if (gv) {
              StridedMut(nv.grad.data() + b * tk * d + off, tk, dh, st).noalias() += w.transpose() * dout;
            }
            if (!gq && !gk) {
              continue;
            }
            dw.noalias() = dout * vm.transpose();
            // softmax backward, then the mask and the scale
            for (std::size_t i = 0; i < tq; ++i) {
              Scalar dot = 0;
              for (std::size_t j = 0; j < tk; ++j) {
                dot += dw(i, j) * w(i, j);
              }
              for (std::size_t j = 0; j < tk; ++j) {
                dw(i, j) = mask[i * tk + j] ? w(i, j) * (dw(i, j) - dot) * scale : Scalar{0};
              }
            }
            if (gq) {
              StridedMut(nq.grad.data() + b * tq * d + off, tq, dh, st).noalias() += dw * km;
            }
            if (gk) {
              StridedMut(nk.grad.data() + b * tk * d + off, tk, dh, st).noalias() += dw.transpose() * qm;
            }
          }
        }
      });
}

Tensor select_rows(const std::vector<Tensor>& sources, std::span<const std::uint8_t> choice) {
  if (sources.empty()) {
    throw ContractError("select_rows: no sources");
  }
  const auto& shape = sources.front().shape();
  for (const auto& s : sources) {
    if (s.shape() != shape) {
      throw ShapeError("select_rows: source shapes differ: " + shape_str(shape) + " vs " +
                       shape_str(s.shape()));
    }
  }
  const auto d = sources.front().dim(-1);
  const auto rows = sources.front().numel() / d;
  if (choice.size() != rows) {
    throw ShapeError("select_rows: " + std::to_string(choice.size()) + " choices for " +
                     std::to_string(rows) + " rows");
  }
  Buffer out(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    if (choice[r] >= sources.size()) {
      throw ContractError("select_rows: choice out of range");
    }
    const auto src = sources[choice[r]].data();
    std::copy_n(src.data() + r * d, d, out.data() + r * d);
  }
  std::vector<std::uint8_t> ch(choice.begin(), choice.end());
  return detail::make_result(shape, std::move(out), sources, [ch = std::move(ch), d](Node& self) {
    for (std::size_t r = 0; r < ch.size(); ++r) {
      if (!wants_grad(self, ch[r])) {
        continue;
      }
      auto& dst = input(self, ch[r]);
      for (std::size_t j = 0; j < d; ++j) {
        dst.grad[r * d + j] += self.grad[r * d + j];
      }
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows, const Shape& lead_shape) {
  const auto d = x.dim(-1);
  const auto in_rows = x.numel() / d;
  if (numel(lead_shape) != rows.size()) {
    throw ShapeError("gather_rows: " + std::to_string(rows.size()) + " rows do not fill shape " +
                     shape_str(lead_shape));
  }
  const auto xv = x.data();
  Buffer out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= in_rows) {
      throw ContractError("gather_rows: row index out of range");
    }
    std::copy_n(xv.data() + rows[i] * d, d, out.data() + i * d);
  }
  Shape out_shape = lead_shape;
  out_shape.push_back(d);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return detail::make_result(std::move(out_shape), std::move(out), {x}, [idx = std::move(idx), d](Node& self) {
    auto& nx = input(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        nx.grad[idx[i] * d + j] += self.grad[i * d + j];
      }
    }
  });
}

}  // namespace sslab::ops
