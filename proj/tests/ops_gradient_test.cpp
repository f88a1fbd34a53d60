/* Copyright 2026 The KESI-Desk Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <cmath>

#include <gtest/gtest.h>

#include "kesi/errors.hpp"
#include "kesi/ops.hpp"
#include "support/oracles.hpp"

namespace kesi {
namespace {

using testing::check_gradients;
using testing::random_tensor;

TEST(Softmax, UniformLogits) {
  Tape tape;
  const Tensor p = softmax(tape, Tensor({1, 3}, {0, 0, 0}));
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, KnownValues) {
  Tape tape;
  const Tensor p = softmax(tape, Tensor({1, 3}, {1, 2, 3}));
  EXPECT_NEAR(p[0], 0.09003057, 1e-8);
  EXPECT_NEAR(p[1], 0.24472847, 1e-8);
  EXPECT_NEAR(p[2], 0.66524096, 1e-8);
}

TEST(Softmax, TemperatureDividesLogits) {
  Tape tape;
  const Tensor a = softmax(tape, Tensor({1, 3}, {1, 2, 3}), 2.0);
  const Tensor b = softmax(tape, Tensor({1, 3}, {0.5, 1, 1.5}), 1.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(Softmax, RejectsBadArguments) {
  Tape tape;
  EXPECT_THROW(softmax(tape, Tensor({1, 2}, {0, 0}), 0.0), ParameterError);
  EXPECT_THROW(softmax(tape, Tensor({1, 2}, {0, 0}), -1.0), ParameterError);
  EXPECT_THROW(softmax(tape, Tensor({0, 2}, {})), ShapeError);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(5, "softmax-props");
  Tape tape(false);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(4), m = 2 + rng.below(6);
    const Tensor z = random_tensor({n, m}, rng, -50, 50);
    const double c = rng.uniform(-100, 100);
    Tensor shifted = z.clone();
    for (auto& v : shifted.data()) v += c;
    const double tau = rng.uniform(0.2, 5);
    const Tensor p = softmax(tape, z, tau);
    const Tensor q = softmax(tape, shifted, tau);
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) s += p[r * m + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
  }
}

TEST(Softmax, LargeLogitsStayFinite) {
  Tape tape;
  const Tensor p = softmax(tape, Tensor({1, 3}, {1000, 0, -1000}));
  EXPECT_NEAR(p[0], 1.0, 1e-15);
  EXPECT_TRUE(std::isfinite(p[2]));
  const Tensor lp = log_softmax(tape, Tensor({1, 2}, {800, 0}));
  EXPECT_NEAR(lp[1], -800.0, 1e-9);
}

TEST(Elementwise, Relu) {
  Tape tape;
  const Tensor y = relu(tape, Tensor({3}, {-1, 0, 2}));
  EXPECT_EQ(y[0], 0);
  EXPECT_EQ(y[1], 0);
  EXPECT_EQ(y[2], 2);
}

TEST(Elementwise, LogOfNonPositiveIsDomainError) {
  Tape tape;
  EXPECT_THROW(log(tape, Tensor({2}, {1, 0})), DomainError);
  EXPECT_THROW(log(tape, Tensor({1}, {-3})), DomainError);
  EXPECT_NEAR(log(tape, Tensor({1}, {std::exp(2.0)}))[0], 2.0, 1e-15);
}

TEST(Elementwise, ShapeMismatchIsShapeError) {
  Tape tape;
  EXPECT_THROW(add(tape, Tensor({2}, {1, 2}), Tensor({3}, {1, 2, 3})), ShapeError);
  EXPECT_THROW(mul(tape, Tensor({2, 1}, {1, 2}), Tensor({1, 2}, {1, 2})), ShapeError);
  EXPECT_THROW(matmul(tape, Tensor({2, 3}, std::vector<double>(6)),
                      Tensor({2, 2}, std::vector<double>(4))),
               ShapeError);
}

TEST(Elementwise, ScalarBroadcast) {
  Tape tape;
  const Tensor y = mul(tape, Tensor({3}, {1, 2, 3}), Tensor::scalar(2));
  EXPECT_EQ(y[2], 6);
  const Tensor z = add(tape, Tensor::scalar(1), Tensor({2}, {1, 2}));
  EXPECT_EQ(z[1], 3);
}

TEST(Reductions, SumAndMean) {
  Tape tape;
  const Tensor x({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(sum(tape, x).item(), 10);
  EXPECT_EQ(mean(tape, x).item(), 2.5);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(3, "matmul");
  Tape tape;
  const Tensor a = random_tensor({2, 3}, rng, -2, 2);
  const Tensor b = random_tensor({3, 2}, rng, -2, 2);
  const Tensor c = matmul(tape, a, b);
  const auto ref = testing::naive_matmul({a.data().begin(), a.data().end()},
                                         {b.data().begin(), b.data().end()}, 2, 3, 2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(c[i], ref[i], 1e-14);
}

TEST(Matmul, HandComputed) {
  Tape tape;
  const Tensor c = matmul(tape, Tensor({2, 3}, {1, 2, 3, 4, 5, 6}),
                          Tensor({3, 2}, {7, 8, 9, 10, 11, 12}));
  EXPECT_EQ(c[0], 58);
  EXPECT_EQ(c[1], 64);
  EXPECT_EQ(c[2], 139);
  EXPECT_EQ(c[3], 154);
}

TEST(BatchNorm, ConstantChannelNormalizesToZero) {
  Tape tape;
  Tensor x = Tensor::full({4, 2, 3, 3}, 7.0);
  Tensor gamma = Tensor::full({2}, 1.0), beta = Tensor::zeros({2});
  Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
  const Tensor y = batch_norm(tape, x, gamma, beta, rm, rv, {});
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  // running mean moves 10% toward the batch mean; batch variance is 0
  EXPECT_NEAR(rm[0], 0.7, 1e-15);
  EXPECT_NEAR(rv[0], 0.9, 1e-15);
}

TEST(BatchNorm, TrainModeStatistics) {
  Tape tape;
  Tensor x({4, 1}, {1, 2, 3, 6});
  Tensor gamma = Tensor::full({1}, 2.0), beta = Tensor::full({1}, 0.5);
  Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
  const Tensor y = batch_norm(tape, x, gamma, beta, rm, rv, {});
  const double mu = 3.0, var = (4 + 1 + 0 + 9) / 4.0;
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(y[i], 2.0 * (x[i] - mu) / std::sqrt(var + 1e-5) + 0.5, 1e-14);
  }
  EXPECT_NEAR(rv[0], 0.9 + 0.1 * (14.0 / 3.0), 1e-14);  // unbiased batch variance
}

TEST(BatchNorm, EvalModeUsesRunningStatistics) {
  Tape tape;
  Tensor x({2, 1}, {1, 5});
  Tensor gamma = Tensor::full({1}, 1.0), beta = Tensor::zeros({1});
  Tensor rm = Tensor::full({1}, 2.0), rv = Tensor::full({1}, 4.0);
  const Tensor y = batch_norm(tape, x, gamma, beta, rm, rv, {.training = false});
  EXPECT_NEAR(y[0], (1 - 2) / std::sqrt(4 + 1e-5), 1e-15);
  EXPECT_NEAR(y[1], (5 - 2) / std::sqrt(4 + 1e-5), 1e-15);
  EXPECT_EQ(rm[0], 2.0);
}

TEST(Pooling, GlobalAverageAndFlatten) {
  Tape tape;
  const Tensor x({1, 2, 2, 2}, {1, 2, 3, 4, 10, 10, 10, 10});
  const Tensor p = global_avg_pool(tape, x);
  EXPECT_EQ(p.shape(), (Shape{1, 2}));
  EXPECT_EQ(p[0], 2.5);
  EXPECT_EQ(p[1], 10);
  EXPECT_EQ(flatten(tape, x).shape(), (Shape{1, 8}));
}

// Finite-difference checks per op.

TEST(Gradients, ElementwiseOps) {
  Rng rng(1, "grad-elementwise");
  const Tensor a = random_tensor({3, 4}, rng, -3, 3);
  const Tensor b = random_tensor({3, 4}, rng, -3, 3);
  const Tensor pos = random_tensor({3, 4}, rng, 0.5, 3);
  auto r = check_gradients({a, b}, [](Tape& t, const std::vector<Tensor>& p) {
    return sum(t, mul(t, sub(t, p[0], p[1]), add(t, p[0], scale(t, p[1], 0.3))));
  });
  EXPECT_LT(r.max_rel_error, 1e-6);
  r = check_gradients({pos}, [](Tape& t, const std::vector<Tensor>& p) {
    return mean(t, mul(t, log(t, p[0]), exp(t, scale(t, p[0], 0.5))));
  });
  EXPECT_LT(r.max_rel_error, 1e-6);
  r = check_gradients({a}, [](Tape& t, const std::vector<Tensor>& p) {
    return sum(t, mul(t, relu(t, p[0]), clamp_min(t, p[0], 0.5)));
  });
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Gradients, MatmulAndLinear) {
  Rng rng(2, "grad-linear");
  const Tensor x = random_tensor({3, 4}, rng, -2, 2);
  const Tensor w = random_tensor({5, 4}, rng, -1, 1);
  const Tensor b = random_tensor({5}, rng, -1, 1);
  const Tensor m = random_tensor({4, 2}, rng, -1, 1);
  auto r = check_gradients({x, w, b}, [](Tape& t, const std::vector<Tensor>& p) {
    const Tensor y = linear(t, p[0], p[1], p[2]);
    return sum(t, mul(t, y, y));
  });
  EXPECT_LT(r.max_rel_error, 1e-6);
  r = check_gradients({x, m}, [](Tape& t, const std::vector<Tensor>& p) {
    const Tensor y = matmul(t, p[0], p[1]);
    return sum(t, mul(t, y, y));
  });
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Gradients, BatchNormTrainAndEval) {
  Rng rng(3, "grad-bn");
  const Tensor x = random_tensor({4, 3, 2, 2}, rng, -3, 3);
  const Tensor g = random_tensor({3}, rng, 0.5, 1.5);
  const Tensor be = random_tensor({3}, rng, -0.5, 0.5);
  const Tensor w = random_tensor({4, 3, 2, 2}, rng, -1, 1);
  for (const bool training : {true, false}) {
    auto r = check_gradients({x, g, be}, [&](Tape& t, const std::vector<Tensor>& p) {
      Tensor rm = Tensor::full({3}, 0.2), rv = Tensor::full({3}, 1.7);
      const Tensor y = batch_norm(t, p[0], p[1], p[2], rm, rv, {.training = training});
      return sum(t, mul(t, y, w));
    });
    EXPECT_LT(r.max_rel_error, 1e-5) << (training ? "train" : "eval");
  }
}

TEST(Gradients, SoftmaxFamily) {
  Rng rng(4, "grad-softmax");
  const Tensor z = random_tensor({3, 5}, rng, -4, 4);
  const Tensor w = random_tensor({3, 5}, rng, -1, 1);
  auto r = check_gradients({z}, [&](Tape& t, const std::vector<Tensor>& p) {
    return sum(t, mul(t, softmax(t, p[0], 1.7), w));
  });
  EXPECT_LT(r.max_rel_error, 1e-6);
  r = check_gradients({z}, [&](Tape& t, const std::vector<Tensor>& p) {
    return sum(t, mul(t, log_softmax(t, p[0], 0.6), w));
  });
  EXPECT_LT(r.max_rel_error, 1e-6);
  const std::vector<int> idx{4, 0, 2};
  r = check_gradients({z}, [&](Tape& t, const std::vector<Tensor>& p) {
    return sum(t, pick(t, log_softmax(t, p[0]), idx));
  });
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Gradients, PoolAndFlatten) {
  Rng rng(5, "grad-pool");
  const Tensor x = random_tensor({2, 3, 2, 2}, rng, -2, 2);
  const Tensor w = random_tensor({2, 3}, rng, -1, 1);
  const Tensor v = random_tensor({2, 12}, rng, -1, 1);
  auto r = check_gradients({x}, [&](Tape& t, const std::vector<Tensor>& p) {
    return add(t, sum(t, mul(t, global_avg_pool(t, p[0]), w)),
               sum(t, mul(t, flatten(t, p[0]), v)));
  });
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Gradients, TwoLayerNetwork) {
  Rng rng(6, "grad-two-layer");
  const Tensor x = random_tensor({4, 3}, rng, -10, 10);
  const Tensor w1 = random_tensor({5, 3}, rng, -0.5, 0.5);
  const Tensor b1 = random_tensor({5}, rng, -0.5, 0.5);
  const Tensor w2 = random_tensor({3, 5}, rng, -0.5, 0.5);
  const Tensor b2 = random_tensor({3}, rng, -0.5, 0.5);
  const std::vector<int> labels{0, 2, 1, 2};
  const auto r = check_gradients({x, w1, b1, w2, b2}, [&](Tape& t, const std::vector<Tensor>& p) {
    const Tensor h = relu(t, linear(t, p[0], p[1], p[2]));
    const Tensor logits = linear(t, h, p[3], p[4]);
    return scale(t, sum(t, pick(t, log_softmax(t, logits), labels)), -0.25);
  });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Gradients, RandomGraphs) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto g = testing::make_random_graph(1000 + s);
    const auto r = check_gradients(g.leaves, g.build);
    EXPECT_LT(r.max_rel_error, 1e-4) << g.description;
  }
}

}  // namespace
}  // namespace kesi
