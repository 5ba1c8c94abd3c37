#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sslab/rng.hpp"
#include "sslab/tensor.hpp"

namespace testing {

inline sslab::Tensor random_tensor(const sslab::Shape& shape, sslab::Rng& rng, bool requires_grad = true,
                                   double scale = 1.0) {
  std::vector<sslab::Scalar> v(sslab::numel(shape));
  for (auto& x : v) {
    x = static_cast<sslab::Scalar>(rng.normal() * scale);
  }
  return sslab::Tensor::from(shape, std::move(v), requires_grad);
}

// Central difference of `loss` with respect to element i of leaf `t`.
inline double numeric_grad(sslab::Tensor t, std::size_t i, const std::function<double()>& loss, double h = 1e-5) {
  auto data = t.mutable_data();
  const auto saved = data[i];
  data[i] = static_cast<sslab::Scalar>(saved + h);
  const double up = loss();
  data[i] = static_cast<sslab::Scalar>(saved - h);
  const double down = loss();
  data[i] = saved;
  return (up - down) / (2 * h);
}

// Denominator floored at 1e-5: entries whose true gradient is zero only see
// finite-difference roundoff (~1e-11).
inline double rel_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-5});
  return std::abs(analytic - numeric) / scale;
}

// Worst relative error over every element of every input.
inline double max_grad_error(const std::vector<sslab::Tensor>& inputs,
                             const std::function<sslab::Tensor()>& build) {
  for (auto t : inputs) {
    t.zero_grad();
  }
  sslab::backward(build());
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    const auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }
  const auto loss = [&] {
    sslab::NoGradGuard guard;
    return static_cast<double>(build().item());
  };
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      worst = std::max(worst, rel_error(analytic[k][i], numeric_grad(inputs[k], i, loss)));
    }
  }
  return worst;
}

}  // namespace testing
