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

#include <gtest/gtest.h>

#include "kesi/errors.hpp"
#include "kesi/ops.hpp"
#include "support/oracles.hpp"

namespace kesi {
namespace {

using testing::naive_conv2d;
using testing::random_tensor;

double max_diff_vs_naive(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
  Tape tape(false);
  const Tensor y = conv2d(tape, x, k, stride, pad);
  const auto ref = naive_conv2d({x.data().begin(), x.data().end()}, x.dim(0), x.dim(1), x.dim(2),
                                x.dim(3), {k.data().begin(), k.data().end()}, k.dim(0), k.dim(2),
                                stride, pad);
  EXPECT_EQ(y.size(), ref.size());
  double worst = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(y[i] - ref[i]));
  return worst;
}

TEST(Conv2d, IdentityKernel) {
  Tape tape;
  const Tensor y = conv2d(tape, Tensor({1, 1, 1, 1}, {5}), Tensor({1, 1, 1, 1}, {1}), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 5);
}

TEST(Conv2d, OnesKernelSums) {
  Tape tape;
  const Tensor y =
      conv2d(tape, Tensor::full({1, 1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), 1, 0);
  EXPECT_EQ(y.size(), 1u);
  EXPECT_EQ(y[0], 9);
}

TEST(Conv2d, PaddingAndStrideGeometry) {
  Tape tape;
  const Tensor y = conv2d(tape, Tensor::full({2, 3, 8, 8}, 1.0), Tensor::full({4, 3, 4, 4}, 1.0),
                          2, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 4, 4}));
  // top-left window covers a 3x3 patch of ones per channel
  EXPECT_EQ(y[0], 27);
}

TEST(Conv2d, RandomCaseMatchesNaiveLoops) {
  Rng rng(1, "conv-random");
  const Tensor x = random_tensor({1, 2, 4, 4}, rng, -1, 1);
  const Tensor k = random_tensor({3, 2, 3, 3}, rng, -1, 1);
  EXPECT_LT(max_diff_vs_naive(x, k, 1, 0), 1e-12);
  EXPECT_LT(max_diff_vs_naive(x, k, 1, 1), 1e-12);
}

TEST(Conv2d, AllSmallShapesMatchNaiveLoops) {
  Rng rng(2, "conv-sweep");
  std::size_t cases = 0;
  for (std::size_t n = 1; n <= 2; ++n)
    for (std::size_t c = 1; c <= 4; ++c)
      for (std::size_t hw = 1; hw <= 8; ++hw)
        for (std::size_t k = 1; k <= 3; ++k)
          for (std::size_t stride = 1; stride <= 2; ++stride)
            for (std::size_t pad = 0; pad <= 1; ++pad) {
              if (hw + 2 * pad < k || (hw + 2 * pad - k) % stride != 0) continue;
              const std::size_t f = 1 + rng.below(3);
              const Tensor x = random_tensor({n, c, hw, hw}, rng, -2, 2);
              const Tensor w = random_tensor({f, c, k, k}, rng, -2, 2);
              ASSERT_LT(max_diff_vs_naive(x, w, stride, pad), 1e-12)
                  << n << "x" << c << "x" << hw << " k" << k << " s" << stride << " p" << pad;
              ++cases;
            }
  EXPECT_GT(cases, 200u);
}

TEST(Conv2d, NonExactOutputIsShapeError) {
  Tape tape;
  EXPECT_THROW(conv2d(tape, Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), 2, 1),
               ShapeError);
  EXPECT_THROW(conv2d(tape, Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0),
               ShapeError);
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
  Tape tape;
  EXPECT_THROW(conv2d(tape, Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), 1, 1),
               ShapeError);
  EXPECT_THROW(conv2d(tape, Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 2, 3, 3}), 1, 1),
               ShapeError);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  Rng rng(3, "conv-grad");
  struct Case {
    Shape x, k;
    std::size_t stride, pad;
  };
  for (const auto& c : {Case{{2, 2, 4, 4}, {3, 2, 3, 3}, 1, 1}, Case{{1, 3, 6, 6}, {2, 3, 4, 4}, 2, 1},
                        Case{{2, 2, 3, 3}, {2, 2, 1, 1}, 1, 0}, Case{{1, 2, 4, 4}, {2, 2, 2, 2}, 2, 0}}) {
    const Tensor x = random_tensor(c.x, rng, -10, 10);
    const Tensor k = random_tensor(c.k, rng, -1, 1);
    Tensor w;
    {
      Tape t(false);
      w = random_tensor(conv2d(t, x, k, c.stride, c.pad).shape(), rng, -1, 1);
    }
    const auto r = testing::check_gradients({x, k}, [&](Tape& t, const std::vector<Tensor>& p) {
      return sum(t, mul(t, conv2d(t, p[0], p[1], c.stride, c.pad), w));
    });
    EXPECT_LT(r.max_rel_error, 1e-6);
  }
}

}  // namespace
}  // namespace kesi
