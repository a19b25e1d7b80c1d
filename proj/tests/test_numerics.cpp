// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace {

using namespace segpool;
using segpool::testing::check_gradients;
using segpool::testing::random_tensor;
using segpool::testing::weighted_sum;

TEST(Shape, RejectsZeroExtent) {
  EXPECT_THROW(Shape({2, 0, 3}), InvalidShape);
  EXPECT_EQ(Shape({2, 3, 4}).numel(), 24u);
}

TEST(Tensor, ValueCountMustMatchShape) {
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1.0, 2.0, 3.0}), InvalidShape);
}

TEST(Conv2d, OutputExtentFollowsFloorFormula) {
  for (std::size_t n : {8u, 9u, 16u, 17u})
    for (std::size_t k : {1u, 3u})
      for (std::size_t s : {1u, 2u})
        for (std::size_t p : {0u, 1u}) {
          if (n + 2 * p < k) continue;
          Tape tape;
          Var x = tape.leaf(random_tensor(Shape{2, n, n}, n));
          Var w = tape.leaf(random_tensor(Shape{3, 2, k, k}, k));
          Var b = tape.leaf(Tensor(Shape{3}));
          Var y = ops::conv2d(x, w, b, s, p);
          const std::size_t expected = (n + 2 * p - k) / s + 1;
          EXPECT_EQ(y.shape(), (Shape{3, expected, expected}));
        }
}

TEST(Conv2d, IdentityKernel) {
  Tape tape;
  Tensor in = random_tensor(Shape{1, 3, 3}, 1);
  Var y = ops::conv2d(tape.leaf(in), tape.leaf(Tensor(Shape{1, 1, 1, 1}, 1.0)), tape.leaf(Tensor(Shape{1})));
  EXPECT_EQ(y.value(), in);
}

TEST(Conv2d, ZeroKernelGivesBias) {
  Tape tape;
  Var y = ops::conv2d(tape.leaf(random_tensor(Shape{2, 5, 5}, 2)), tape.leaf(Tensor(Shape{3, 2, 3, 3})),
                      tape.leaf(Tensor(Shape{3}, 0.75)), 1, 1);
  for (double v : y.value().values()) EXPECT_EQ(v, 0.75);
}

TEST(Conv2d, OnesKernelCountsNeighbours) {
  Tape tape;
  Var y = ops::conv2d(tape.leaf(Tensor(Shape{1, 3, 3}, 1.0)), tape.leaf(Tensor(Shape{1, 1, 3, 3}, 1.0)),
                      tape.leaf(Tensor(Shape{1})), 1, 1);
  EXPECT_EQ(y.value().at(0, 1, 1), 9.0);
  EXPECT_EQ(y.value().at(0, 0, 0), 4.0);
  EXPECT_EQ(y.value().at(0, 0, 2), 4.0);
  EXPECT_EQ(y.value().at(0, 2, 0), 4.0);
  EXPECT_EQ(y.value().at(0, 2, 2), 4.0);
  EXPECT_EQ(y.value().at(0, 0, 1), 6.0);
}

TEST(Conv2d, RejectsMismatchedChannels) {
  Tape tape;
  EXPECT_THROW((void)ops::conv2d(tape.leaf(Tensor(Shape{2, 4, 4})), tape.leaf(Tensor(Shape{1, 3, 3, 3})),
                                 tape.leaf(Tensor(Shape{1}))),
               InvalidShape);
}

TEST(Conv2d, MatchesDirectSum) {
  // Direct six-loop evaluation as an independent oracle for im2col + GEMM.
  const std::size_t ci = 3, co = 4, n = 7, k = 3;
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u}) {
      Tensor in = random_tensor(Shape{ci, n, n}, 10 + stride);
      Tensor w = random_tensor(Shape{co, ci, k, k}, 20 + pad);
      Tensor b = random_tensor(Shape{co}, 30);
      Tape tape;
      Var y = ops::conv2d(tape.leaf(in), tape.leaf(w), tape.leaf(b), stride, pad);
      const std::size_t m = (n + 2 * pad - k) / stride + 1;
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t oy = 0; oy < m; ++oy)
          for (std::size_t ox = 0; ox < m; ++ox) {
            double s = b[o];
            for (std::size_t c = 0; c < ci; ++c)
              for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                  const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                  if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(n) || ix >= static_cast<std::ptrdiff_t>(n))
                    continue;
                  s += w[((o * ci + c) * k + ky) * k + kx] * in.at(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                }
            EXPECT_NEAR(y.value().at(o, oy, ox), s, 1e-12);
          }
    }
}

double gelu_reference(double x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

TEST(Gelu, KnownValues) {
  Tape tape;
  Var y = ops::gelu(tape.leaf(Tensor(Shape{5}, std::vector<double>{0.0, 10.0, 1.0, -1.0, -30.0})));
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_NEAR(y.value()[1], 10.0, 1e-6);
  EXPECT_NEAR(y.value()[2], gelu_reference(1.0), 1e-14);
  EXPECT_NEAR(y.value()[2], 0.8411919906082768, 1e-14);
  EXPECT_NEAR(y.value()[3], gelu_reference(-1.0), 1e-14);
  EXPECT_NEAR(y.value()[4], 0.0, 1e-14);
}

TEST(Gelu, MatchesStdTanhOverRange) {
  Tensor x(Shape{2001});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = -10.0 + 0.01 * static_cast<double>(i);
  Tape tape;
  Var y = ops::gelu(tape.leaf(x));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.value()[i], gelu_reference(x[i]), 1e-14);
}

TEST(Upsample, ConstantStaysConstant) {
  Tape tape;
  Var y = ops::upsample_bilinear_2x(tape.leaf(Tensor(Shape{2, 3, 5}, 0.3)));
  EXPECT_EQ(y.shape(), (Shape{2, 6, 10}));
  for (double v : y.value().values()) EXPECT_NEAR(v, 0.3, 1e-15);
}

TEST(Upsample, SinglePixel) {
  Tape tape;
  Var y = ops::upsample_bilinear_2x(tape.leaf(Tensor(Shape{1, 1, 1}, 2.5)));
  EXPECT_EQ(y.shape(), (Shape{1, 2, 2}));
  for (double v : y.value().values()) EXPECT_EQ(v, 2.5);
}

TEST(Upsample, HalfPixelRow) {
  Tape tape;
  Var y = ops::upsample_bilinear_2x(tape.leaf(Tensor(Shape{1, 1, 2}, std::vector<double>{0.0, 1.0})));
  ASSERT_EQ(y.shape(), (Shape{1, 2, 4}));
  const double expected[] = {0.0, 0.25, 0.75, 1.0};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t x = 0; x < 4; ++x) EXPECT_DOUBLE_EQ(y.value().at(0, r, x), expected[x]);
}

TEST(AddConcat, Laws) {
  Tape tape;
  Tensor a = random_tensor(Shape{2, 3, 3}, 5);
  Var x = tape.leaf(a, true);
  Var z = tape.leaf(Tensor(Shape{2, 3, 3}), true);
  Var s = ops::add(x, z);
  EXPECT_EQ(s.value(), a);
  Var c = ops::concat_channels(x, tape.leaf(Tensor(Shape{3, 3, 3})));
  EXPECT_EQ(c.shape(), (Shape{5, 3, 3}));
  Var loss = weighted_sum(tape, s, 9);
  tape.backward(loss);
  EXPECT_EQ(x.grad(), z.grad());
  EXPECT_EQ(x.grad(), random_tensor(Shape{2, 3, 3}, 9));
}

TEST(Backward, LinearAndIndependent) {
  Tape tape;
  Var p = tape.leaf(Tensor::scalar(1.7), true);
  Var q = tape.leaf(Tensor::scalar(-0.4), true);
  Var loss = ops::scale(p, 3.0);
  tape.backward(loss);
  EXPECT_EQ(p.grad().item(), 3.0);
  EXPECT_EQ(q.grad().item(), 0.0);
}

TEST(Backward, MarksReachedNodes) {
  Tape tape;
  Var p = tape.leaf(Tensor::scalar(1.7), true);
  Var q = tape.leaf(Tensor::scalar(-0.4), true);
  Var unused = ops::scale(q, 2.0);
  Var loss = ops::add(ops::scale(p, 0.0), tape.leaf(Tensor::scalar(1.0)));
  tape.backward(loss);
  EXPECT_TRUE(p.reached());  // reached even though its gradient is zero
  EXPECT_EQ(p.grad().item(), 0.0);
  EXPECT_FALSE(q.reached());
  EXPECT_FALSE(unused.reached());
  tape.backward(unused);
  EXPECT_FALSE(p.reached());
  EXPECT_TRUE(q.reached());
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape tape;
  Var p = tape.leaf(Tensor(Shape{2}), true);
  EXPECT_THROW(tape.backward(ops::scale(p, 2.0)), ContractViolation);
}

TEST(Backward, GradientShapesMatchParameters) {
  Tape tape;
  Var x = tape.leaf(random_tensor(Shape{2, 6, 6}, 1));
  Var w = tape.leaf(random_tensor(Shape{3, 2, 3, 3}, 2), true);
  Var b = tape.leaf(random_tensor(Shape{3}, 3), true);
  Var loss = weighted_sum(tape, ops::gelu(ops::conv2d(x, w, b, 2, 1)), 4);
  tape.backward(loss);
  EXPECT_EQ(w.grad().shape(), w.shape());
  EXPECT_EQ(b.grad().shape(), b.shape());
}

// Finite-difference checks at ten random points per operation.
class OpGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradients, Conv2dStridedPadded) {
  const std::uint64_t seed = GetParam();
  for (std::size_t stride : {1u, 2u}) {
    auto f = [&](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, ops::conv2d(v[0], v[1], v[2], stride, 1), seed + 100);
    };
    auto r = check_gradients(f, {random_tensor(Shape{2, 6, 6}, seed), random_tensor(Shape{3, 2, 3, 3}, seed + 1),
                                 random_tensor(Shape{3}, seed + 2)});
    EXPECT_LT(r.max_rel_error, 1e-4) << "stride " << stride;
  }
}

TEST_P(OpGradients, Conv2dPointwise) {
  const std::uint64_t seed = GetParam();
  auto f = [&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::conv2d(v[0], v[1], v[2]), seed); };
  auto r = check_gradients(f, {random_tensor(Shape{3, 4, 5}, seed), random_tensor(Shape{2, 3, 1, 1}, seed + 1),
                               random_tensor(Shape{2}, seed + 2)});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST_P(OpGradients, Gelu) {
  const std::uint64_t seed = GetParam();
  auto f = [&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::gelu(v[0]), seed + 7); };
  EXPECT_LT(check_gradients(f, {random_tensor(Shape{2, 4, 4}, seed, -3.0, 3.0)}).max_rel_error, 1e-4);
}

TEST_P(OpGradients, Upsample) {
  const std::uint64_t seed = GetParam();
  auto f = [&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::upsample_bilinear_2x(v[0]), seed); };
  EXPECT_LT(check_gradients(f, {random_tensor(Shape{2, 3, 4}, seed)}).max_rel_error, 1e-4);
}

TEST_P(OpGradients, AddConcatScale) {
  const std::uint64_t seed = GetParam();
  auto f = [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::concat_channels(ops::add(v[0], v[1]), ops::scale(v[1], -1.5)), seed);
  };
  EXPECT_LT(check_gradients(f, {random_tensor(Shape{2, 3, 3}, seed), random_tensor(Shape{2, 3, 3}, seed + 1)})
                .max_rel_error,
            1e-4);
}

TEST_P(OpGradients, GeluOfConvComposite) {
  const std::uint64_t seed = GetParam();
  auto f = [&](Tape& t, const std::vector<Var>& v) {
    Var h = ops::gelu(ops::conv2d(v[0], v[1], v[2], 1, 1));
    return weighted_sum(t, ops::add(ops::upsample_bilinear_2x(h), ops::upsample_bilinear_2x(h)), seed);
  };
  auto r = check_gradients(f, {random_tensor(Shape{2, 4, 4}, seed), random_tensor(Shape{2, 2, 3, 3}, seed + 1),
                               random_tensor(Shape{2}, seed + 2)});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, OpGradients, ::testing::Range<std::uint64_t>(0, 10));

TEST(Adam, ZeroGradientKeepsParametersAndDecaysMoments) {
  std::vector<Tensor> params{random_tensor(Shape{4}, 1)};
  const Tensor before = params[0];
  AdamState st = AdamState::for_params(params);
  st.m[0].fill(0.5);
  st.v[0].fill(0.25);
  std::vector<Tensor> grads{Tensor(Shape{4})};
  adam_step(params, grads, st, AdamConfig{});
  EXPECT_EQ(st.step, 1u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(st.m[0][i], 0.45);
    EXPECT_DOUBLE_EQ(st.v[0][i], 0.25 * 0.999);
  }
  // Existing moments still move the parameters; with zero moments they stay put.
  std::vector<Tensor> fresh{before};
  AdamState zero = AdamState::for_params(fresh);
  adam_step(fresh, grads, zero, AdamConfig{});
  EXPECT_EQ(fresh[0], before);
}

TEST(Adam, FirstStepIsLrTimesSign) {
  const AdamConfig cfg;
  std::vector<Tensor> params{Tensor(Shape{4})};
  std::vector<Tensor> grads{Tensor(Shape{4}, std::vector<double>{0.3, -2.0, 1e-3, -5e-2})};
  AdamState st = AdamState::for_params(params);
  adam_step(params, grads, st, cfg);
  for (std::size_t i = 0; i < 4; ++i) {
    const double g = grads[0][i];
    // m_hat = g, v_hat = g^2 at step 1.
    const double expected = -cfg.lr * g / (std::abs(g) + cfg.eps);
    EXPECT_NEAR(params[0][i], expected, 1e-18);
    EXPECT_NEAR(std::abs(params[0][i]), cfg.lr, 1e-8);
  }
}

TEST(Adam, DeterministicAndCountsSteps) {
  std::vector<Tensor> a{random_tensor(Shape{3, 2}, 4)}, b = a;
  std::vector<Tensor> g{random_tensor(Shape{3, 2}, 5)};
  AdamState sa = AdamState::for_params(a), sb = AdamState::for_params(b);
  for (int i = 0; i < 3; ++i) {
    adam_step(a, g, sa, AdamConfig{});
    adam_step(b, g, sb, AdamConfig{});
  }
  EXPECT_EQ(a, b);
  EXPECT_EQ(sa, sb);
  EXPECT_EQ(sa.step, 3u);
}

TEST(Adam, InactiveTensorsAreLeftAlone) {
  std::vector<Tensor> params{random_tensor(Shape{3}, 6), random_tensor(Shape{2}, 7)};
  const std::vector<Tensor> before = params;
  AdamState st = AdamState::for_params(params);
  st.m[1].fill(0.5);
  const AdamState moments = st;
  const std::vector<Tensor> grads{random_tensor(Shape{3}, 8), random_tensor(Shape{2}, 9)};
  adam_step(params, grads, st, AdamConfig{}, {true, false});
  EXPECT_EQ(st.step, 1u);
  EXPECT_NE(params[0], before[0]);
  EXPECT_EQ(params[1], before[1]);
  EXPECT_EQ(st.m[1], moments.m[1]);
  EXPECT_EQ(st.v[1], moments.v[1]);
  EXPECT_THROW(adam_step(params, grads, st, AdamConfig{}, {true}), InvalidShape);
}

TEST(Adam, RejectsShapeMismatch) {
  std::vector<Tensor> p{Tensor(Shape{3})};
  std::vector<Tensor> g{Tensor(Shape{4})};
  AdamState st = AdamState::for_params(p);
  EXPECT_THROW(adam_step(p, g, st, AdamConfig{}), InvalidShape);
}

TEST(Rng, UniformIntStaysInRangeAndIsDeterministic) {
  Rng a(derive_seed(7, 1)), b(derive_seed(7, 1));
  for (int i = 0; i < 1000; ++i) {
    const auto x = uniform_int(a, 3, 9);
    EXPECT_GE(x, 3u);
    EXPECT_LE(x, 9u);
    EXPECT_EQ(x, uniform_int(b, 3, 9));
  }
  EXPECT_NE(derive_seed(7, 1), derive_seed(7, 2));
}

}  // namespace
