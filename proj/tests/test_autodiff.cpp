#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "sslab/errors.hpp"
#include "sslab/ops.hpp"
#include "support.hpp"

using namespace sslab;
using testing::max_grad_error;
using testing::random_tensor;

namespace {

// sum(x * w) with a fixed random weight, so every output element matters.
Tensor weighted_sum(const Tensor& x, std::uint64_t seed = 77) {
  Rng rng(seed);
  return ops::sum(ops::mul(x, random_tensor(x.shape(), rng, false)));
}

}  // namespace

TEST_CASE("matmul hand cases") {
  const auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const auto m = Tensor::from({2, 2}, {3, -1, 2.5, 7});
  const auto p = ops::matmul(eye, m);
  CHECK(std::vector<Scalar>(p.data().begin(), p.data().end()) == std::vector<Scalar>{3, -1, 2.5, 7});

  const auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const auto ones = Tensor::from({2, 1}, {1, 1});
  const auto c = ops::matmul(a, ones);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.data()[0] == 3);
  CHECK(c.data()[1] == 7);
}

TEST_CASE("matmul shape errors name both shapes") {
  const auto a = Tensor::zeros({2, 3});
  const auto b = Tensor::zeros({4, 2});
  try {
    ops::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum matches central differences") {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  CHECK(max_grad_error({a, b}, [&] { return ops::sum(ops::matmul(a, b)); }) < 1e-6);
}

TEST_CASE("batched and broadcast matmul gradients") {
  Rng rng(2);
  auto a = random_tensor({2, 3, 3, 4}, rng);
  auto b = random_tensor({2, 3, 4, 5}, rng);
  CHECK(max_grad_error({a, b}, [&] { return weighted_sum(ops::matmul(a, b)); }) < 1e-6);
  auto m = random_tensor({3, 4}, rng);
  CHECK(max_grad_error({m, b}, [&] { return weighted_sum(ops::matmul(m, b)); }) < 1e-6);
}

TEST_CASE("linear equals matmul plus bias, with matching gradients") {
  Rng rng(3);
  auto x = random_tensor({2, 5, 4}, rng);
  auto w = random_tensor({4, 6}, rng);
  auto b = random_tensor({6}, rng);
  const auto fused = ops::linear(x, w, b);
  const auto plain = ops::add(ops::matmul(x, w), b);
  for (std::size_t i = 0; i < fused.numel(); ++i) {
    CHECK(fused.data()[i] == doctest::Approx(plain.data()[i]).epsilon(1e-12));
  }
  CHECK(max_grad_error({x, w, b}, [&] { return weighted_sum(ops::linear(x, w, b)); }) < 1e-6);
}

TEST_CASE("softmax values") {
  const auto half = ops::softmax(Tensor::from({2}, {0, 0}));
  CHECK(half.data()[0] == 0.5);
  CHECK(half.data()[1] == 0.5);

  const auto big = ops::softmax(Tensor::from({2}, {1000, 0}));
  CHECK(std::isfinite(big.data()[0]));
  CHECK(big.data()[0] == doctest::Approx(1.0));
  CHECK(big.data()[1] == doctest::Approx(0.0));

  const auto ratio = ops::softmax(Tensor::from({3}, {0, std::log(2.0), std::log(3.0)}));
  CHECK(ratio.data()[0] == doctest::Approx(1.0 / 6).epsilon(1e-12));
  CHECK(ratio.data()[1] == doctest::Approx(2.0 / 6).epsilon(1e-12));
  CHECK(ratio.data()[2] == doctest::Approx(3.0 / 6).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and stay in range") {
  Rng rng(4);
  const auto x = random_tensor({7, 3, 11}, rng, false, 10.0);
  for (int axis : {0, 1, 2}) {
    const auto s = ops::softmax(x, axis);
    const auto& shape = s.shape();
    const auto ax = static_cast<std::size_t>(axis);
    std::size_t inner = 1;
    for (std::size_t i = ax + 1; i < 3; ++i) {
      inner *= shape[i];
    }
    const auto outer = s.numel() / (shape[ax] * inner);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        double total = 0;
        for (std::size_t j = 0; j < shape[ax]; ++j) {
          const auto v = s.data()[(o * shape[ax] + j) * inner + in];
          CHECK(v >= 0);
          CHECK(v <= 1);
          total += v;
        }
        CHECK(std::abs(total - 1) < 1e-6);
      }
    }
  }
}

TEST_CASE("softmax gradient") {
  Rng rng(5);
  auto x = random_tensor({3, 5}, rng);
  CHECK(max_grad_error({x}, [&] { return weighted_sum(ops::softmax(x, -1)); }) < 1e-6);
  CHECK(max_grad_error({x}, [&] { return weighted_sum(ops::softmax(x, 0)); }) < 1e-6);
}

TEST_CASE("cross entropy hand cases") {
  // prob 1 on the target
  const auto sure = Tensor::from({1, 3}, {0, 800, 0});
  const std::vector<int> t1{1};
  const std::vector<std::uint8_t> m1{1};
  CHECK(ops::cross_entropy(sure, t1, m1).item() == doctest::Approx(0.0));

  const std::size_t vocab = 13;
  const auto uniform = Tensor::zeros({2, vocab});
  const std::vector<int> t2{4, 9};
  const std::vector<std::uint8_t> m2{1, 1};
  CHECK(ops::cross_entropy(uniform, t2, m2).item() == doctest::Approx(std::log(13.0)).epsilon(1e-12));
  // smoothing leaves the uniform case unchanged
  CHECK(ops::cross_entropy(uniform, t2, m2, 0.1).item() == doctest::Approx(std::log(13.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy against brute-force log-softmax") {
  Rng rng(6);
  const auto logits = random_tensor({4, 8}, rng, false, 3.0);
  const std::vector<int> targets{3, 0, 7, 5};
  const std::vector<std::uint8_t> mask{1, 0, 1, 1};
  double total = 0;
  int counted = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    if (!mask[r]) {
      continue;
    }
    double z = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      z += std::exp(static_cast<double>(logits.data()[r * 8 + j]));
    }
    total += -(logits.data()[r * 8 + static_cast<std::size_t>(targets[r])] - std::log(z));
    ++counted;
  }
  CHECK(std::abs(ops::cross_entropy(logits, targets, mask).item() - total / counted) < 1e-9);
}

TEST_CASE("cross entropy gradient, with and without smoothing") {
  Rng rng(7);
  auto logits = random_tensor({5, 6}, rng);
  const std::vector<int> targets{1, 5, 0, 2, 2};
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1};
  CHECK(max_grad_error({logits}, [&] { return ops::cross_entropy(logits, targets, mask); }) < 1e-6);
  CHECK(max_grad_error({logits}, [&] { return ops::cross_entropy(logits, targets, mask, 0.1); }) < 1e-6);
}

TEST_CASE("cross entropy rejects out-of-vocabulary targets") {
  const auto logits = Tensor::zeros({1, 4});
  const std::vector<int> bad{4};
  const std::vector<std::uint8_t> mask{1};
  CHECK_THROWS_AS(ops::cross_entropy(logits, bad, mask), InputError);
}

TEST_CASE("dropout") {
  Rng rng(8);
  const auto x = random_tensor({10}, rng, false);
  Rng draw(9);
  const auto before = draw.state();
  const auto same = ops::dropout(x, 0.0, draw);
  CHECK(same.node() == x.node());
  CHECK(draw.state() == before);
  CHECK_THROWS_AS(ops::dropout(x, 1.0, draw), ConfigError);
  CHECK_THROWS_AS(ops::dropout(x, -0.1, draw), ConfigError);

  // all-ones, rate 0.5: each element has mean 1 and variance 1 per trial
  const std::size_t trials = 10000;
  const auto ones = Tensor::full({16}, 1);
  std::vector<double> mean(16, 0);
  for (std::size_t t = 0; t < trials; ++t) {
    const auto d = ops::dropout(ones, 0.5, draw);
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK((d.data()[i] == 0 || d.data()[i] == 2));
      mean[i] += d.data()[i] / static_cast<double>(trials);
    }
  }
  const double sigma = 1.0 / std::sqrt(static_cast<double>(trials));
  for (const auto m : mean) {
    CHECK(std::abs(m - 1.0) < 3 * sigma);
  }
}

TEST_CASE("dropout gradient uses the same mask") {
  Rng rng(10);
  auto x = random_tensor({4, 6}, rng);
  Rng a(11);
  const auto y = ops::dropout(x, 0.3, a);
  backward(ops::sum(y));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double expected = y.data()[i] == 0 ? 0.0 : 1.0 / 0.7;
    CHECK(x.grad()[i] == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("layer norm") {
  const auto c = Tensor::full({2, 5}, 3.25);
  const auto gamma = Tensor::full({5}, 1);
  const auto beta = Tensor::zeros({5});
  const auto normed = ops::layer_norm(c, gamma, beta);
  for (const auto v : normed.data()) {
    CHECK(v == 0);
  }
  Rng rng(12);
  auto x = random_tensor({3, 7}, rng);
  auto g = random_tensor({7}, rng);
  auto b = random_tensor({7}, rng);
  CHECK(max_grad_error({x, g, b}, [&] { return weighted_sum(ops::layer_norm(x, g, b)); }) < 1e-6);
}

TEST_CASE("elementwise, shape and gather gradients") {
  Rng rng(13);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto bias = random_tensor({4}, rng);
  CHECK(max_grad_error({a, bias}, [&] { return weighted_sum(ops::add(a, bias)); }) < 1e-6);
  CHECK(max_grad_error({a, b}, [&] { return weighted_sum(ops::sub(a, b)); }) < 1e-6);
  CHECK(max_grad_error({a, b}, [&] { return weighted_sum(ops::mul(a, b)); }) < 1e-6);
  CHECK(max_grad_error({a}, [&] { return weighted_sum(ops::gelu(a)); }) < 1e-6);
  CHECK(max_grad_error({a}, [&] { return weighted_sum(ops::relu(a)); }) < 1e-6);
  CHECK(max_grad_error({a}, [&] { return weighted_sum(ops::scale(a, 2.5)); }) < 1e-6);
  CHECK(max_grad_error({a}, [&] { return ops::mean(ops::mul(a, a)); }) < 1e-6);
  CHECK(max_grad_error({a}, [&] { return weighted_sum(ops::reshape(a, {2, 6})); }) < 1e-6);
  CHECK(max_grad_error({a}, [&] { return weighted_sum(ops::transpose(a)); }) < 1e-6);
  auto c = random_tensor({2, 3, 4}, rng);
  CHECK(max_grad_error({c}, [&] { return weighted_sum(ops::permute(c, {2, 0, 1})); }) < 1e-6);

  auto table = random_tensor({6, 3}, rng);
  const std::vector<int> idx{5, 0, 5, 2};
  CHECK(max_grad_error({table}, [&] { return weighted_sum(ops::embedding_lookup(table, idx, {2, 2})); }) < 1e-6);
  const std::vector<std::size_t> rows{1, 1, 4};
  CHECK(max_grad_error({table}, [&] { return weighted_sum(ops::gather_rows(table, rows, {3})); }) < 1e-6);
  const std::vector<std::uint8_t> choice{0, 1, 1};
  CHECK(max_grad_error({a, b}, [&] { return weighted_sum(ops::select_rows({a, b}, choice)); }) < 1e-6);
}

TEST_CASE("permute moves elements where expected") {
  const auto x = Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5});
  const auto t = ops::transpose(x);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(std::vector<Scalar>(t.data().begin(), t.data().end()) == std::vector<Scalar>{0, 3, 1, 4, 2, 5});
}

TEST_CASE("fused attention equals the composed primitive ops") {
  Rng rng(14);
  const std::size_t batch = 2, tq = 3, tk = 4, d = 6, heads = 2, dh = 3;
  auto q = random_tensor({batch, tq, d}, rng);
  auto k = random_tensor({batch, tk, d}, rng);
  auto v = random_tensor({batch, tk, d}, rng);
  std::vector<std::uint8_t> allowed(batch * tq * tk);
  for (std::size_t i = 0; i < allowed.size(); ++i) {
    allowed[i] = (i % 5) != 3;
  }
  // Row 0 of batch 1 fully masked: uniform weights in both versions.
  for (std::size_t j = 0; j < tk; ++j) {
    allowed[(1 * tq + 0) * tk + j] = 0;
  }
  const auto composed = [&] {
    auto split = [&](const Tensor& x, std::size_t t, const std::vector<std::size_t>& perm) {
      return ops::permute(ops::reshape(x, {batch, t, heads, dh}), perm);
    };
    auto scores = ops::scale(ops::matmul(split(q, tq, {0, 2, 1, 3}), split(k, tk, {0, 2, 3, 1})),
                             static_cast<Scalar>(1 / std::sqrt(3.0)));
    const auto w = ops::softmax(ops::mask_scores(scores, allowed), -1);
    const auto ctx = ops::permute(ops::matmul(w, split(v, tk, {0, 2, 1, 3})), {0, 2, 1, 3});
    return ops::reshape(ctx, {batch, tq, d});
  };
  const auto fused = ops::multi_head_attention(q, k, v, allowed, heads);
  const auto ref = composed();
  for (std::size_t i = 0; i < fused.numel(); ++i) {
    CHECK(fused.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
  }
  CHECK(max_grad_error({q, k, v}, [&] { return weighted_sum(ops::multi_head_attention(q, k, v, allowed, heads)); }) <
        1e-6);
  CHECK(max_grad_error({q, k, v}, [&] { return weighted_sum(composed()); }) < 1e-6);
}

TEST_CASE("backward contract") {
  auto x = Tensor::from({3}, {1, -2, 4}, true);
  auto s = ops::sum(x);
  backward(s);
  for (const auto g : x.grad()) {
    CHECK(g == 1);
  }
  CHECK_THROWS_AS(backward(s), ContractError);

  x.zero_grad();
  backward(ops::sum(ops::mul(x, x)));
  CHECK(x.grad()[0] == 2);
  CHECK(x.grad()[1] == -4);
  CHECK(x.grad()[2] == 8);

  CHECK_THROWS_AS(backward(ops::mul(x, x)), ContractError);
  CHECK_THROWS_AS(backward(ops::sum(Tensor::from({2}, {1, 2}))), ContractError);
}

TEST_CASE("every reachable tracked tensor gets a gradient") {
  Rng rng(15);
  auto a = random_tensor({2, 2}, rng);
  auto b = random_tensor({2, 2}, rng);
  auto unused = random_tensor({2, 2}, rng);
  const auto mid = ops::matmul(a, b);
  backward(ops::sum(ops::relu(mid)));
  CHECK(a.has_grad());
  CHECK(b.has_grad());
  CHECK(a.grad().size() == a.numel());
  CHECK_FALSE(unused.has_grad());
}

TEST_CASE("tape replays each node exactly once in reverse creation order") {
  Rng rng(16);
  auto x = random_tensor({3}, rng);
  const auto y = ops::mul(x, x);
  const auto z = ops::add(y, x);
  const auto loss = ops::sum(ops::mul(z, y));
  auto tape = ComputationTape::record(loss);
  const auto& nodes = tape.nodes();
  CHECK(nodes.size() == 5);  // x, y, z, z*y, sum
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    CHECK(nodes[i - 1]->order < nodes[i]->order);
  }
  CHECK(nodes.back() == loss.node());
}

TEST_CASE("no-grad guard stops tracking") {
  auto x = Tensor::from({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = ops::mul(x, x);
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(ops::mul(x, x).requires_grad());
}

TEST_CASE("identical seeds and op sequences give identical bits") {
  auto run = [] {
    Rng rng(17);
    auto x = random_tensor({4, 4}, rng);
    Rng drop(18);
    const auto y = ops::softmax(ops::dropout(ops::matmul(x, x), 0.2, drop), -1);
    return std::vector<Scalar>(y.data().begin(), y.data().end());
  };
  CHECK(run() == run());
}
