// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "test_util.hpp"

namespace {

using namespace segpool;
using segpool::testing::check_gradients;
using segpool::testing::random_labels;
using segpool::testing::random_tensor;

ModelConfig small_config() {
  ModelConfig c;
  c.base_channels = 4;
  c.fused_channels = 6;
  c.hidden_channels = 4;
  return c;
}

TEST(Model, OutputShapes) {
  const ModelParams p = init_params(ModelConfig{}, 0);
  Tape tape;
  const ForwardOut out = forward(bind(tape, p, false), tape.leaf(random_tensor(Shape{3, 64, 64}, 1, 0.0, 1.0)));
  EXPECT_EQ(out.logits.shape(), (Shape{5, 64, 64}));
  EXPECT_EQ(out.dense.shape(), (Shape{3, 64, 64}));
  EXPECT_EQ(out.fused.shape(), (Shape{32, 64, 64}));

  Tape t2;
  const ForwardOut odd = forward(bind(t2, p, false), t2.leaf(random_tensor(Shape{3, 12, 20}, 1)));
  EXPECT_EQ(odd.logits.shape(), (Shape{5, 12, 20}));
  Tape t3;
  EXPECT_THROW((void)forward(bind(t3, p, false), t3.leaf(Tensor(Shape{3, 10, 12}))), InvalidShape);
  EXPECT_THROW((void)forward(bind(t3, p, false), t3.leaf(Tensor(Shape{1, 8, 8}))), InvalidShape);
}

TEST(Model, ZeroWeightsGiveZeroLogits) {
  ModelParams p = init_params(ModelConfig{}, 0);
  for (auto& t : p.tensors) t.fill(0.0);
  const Tensor logits = predict_logits(p, random_tensor(Shape{3, 16, 16}, 2, 0.0, 1.0));
  for (double v : logits.values()) EXPECT_EQ(v, 0.0);
}

TEST(Model, InitDeterministicBoundedZeroBias) {
  const ModelConfig cfg;
  const ModelParams a = init_params(cfg, 5), b = init_params(cfg, 5), c = init_params(cfg, 6);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  const auto layout = param_layout(cfg);
  ASSERT_EQ(layout.size(), a.tensors.size());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    EXPECT_EQ(a.tensors[i].shape(), layout[i].shape);
    if (layout[i].name.ends_with(".bias")) {
      for (double v : a.tensors[i].values()) EXPECT_EQ(v, 0.0);
      continue;
    }
    const Shape& s = layout[i].shape;
    const double bound = 1.0 / std::sqrt(static_cast<double>(s[1] * s[2] * s[3]));
    double max_abs = 0.0;
    for (double v : a.tensors[i].values()) max_abs = std::max(max_abs, std::abs(v));
    EXPECT_LE(max_abs, bound) << layout[i].name;
    EXPECT_GT(max_abs, 0.5 * bound) << layout[i].name;
  }
}

TEST(Model, LayoutNamesAreUniqueAndIndexed) {
  const ModelParams p = init_params(ModelConfig{}, 0);
  const auto layout = param_layout(p.config);
  for (std::size_t i = 0; i < layout.size(); ++i) EXPECT_EQ(p.index_of(layout[i].name), i);
  EXPECT_EQ(p["seg.weight"].shape(), (Shape{5, 32, 1, 1}));
  EXPECT_EQ(p["dense2.weight"].shape(), (Shape{3, 16, 1, 1}));
  EXPECT_THROW((void)p.index_of("nope"), ContractViolation);
}

TEST(Ema, DecayEndpointsAndMidpoint) {
  const ModelConfig cfg = small_config();
  const ModelParams cur = init_params(cfg, 1), start = init_params(cfg, 2);
  ModelParams e0 = start, e1 = start;
  ema_update(e0, cur, 0.0);
  ema_update(e1, cur, 1.0);
  EXPECT_EQ(e0, cur);
  EXPECT_EQ(e1, start);

  ModelParams zero = start, two = start;
  for (auto& t : zero.tensors) t.fill(0.0);
  for (auto& t : two.tensors) t.fill(2.0);
  ema_update(zero, two, 0.5);
  for (const auto& t : zero.tensors)
    for (double v : t.values()) EXPECT_EQ(v, 1.0);
  EXPECT_THROW(ema_update(zero, two, 1.5), ContractViolation);
}

TEST(Model, ForwardDeterministic) {
  const ModelParams p = init_params(ModelConfig{}, 3);
  const Tensor x = random_tensor(Shape{3, 32, 32}, 4, 0.0, 1.0);
  EXPECT_EQ(predict_logits(p, x), predict_logits(p, x));
}

TEST(Model, ArgmaxTiesGoLow) {
  Tensor logits(Shape{3, 1, 2}, std::vector<double>{1.0, 0.0, 1.0, 2.0, 0.5, 2.0});
  const LabelGrid l = argmax_labels(logits);
  EXPECT_EQ(l.values, (std::vector<int>{0, 1}));
}

// Parameters of the model as FD inputs; the scalar is the supervised loss.
segpool::testing::ScalarFn supervised_loss(const ModelConfig& cfg, const Tensor& image, const LabelGrid& labels) {
  return [cfg, image, labels](Tape& tape, const std::vector<Var>& vars) {
    const BoundParams b{vars, &cfg};
    return cross_entropy(forward(b, tape.leaf(image)).logits, labels);
  };
}

TEST(Model, EndToEndGradientMatchesFiniteDifferences) {
  const ModelConfig cfg = small_config();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const ModelParams p = init_params(cfg, seed);
    auto r = check_gradients(supervised_loss(cfg, random_tensor(Shape{3, 8, 8}, seed, 0.0, 1.0),
                                             random_labels(8, 8, 5, seed)),
                             p.tensors, 1e-5, 12);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
    EXPECT_GT(r.checked, 200u);
  }
}

TEST(Model, DenseLossReachesSharedEncoder) {
  const ModelParams p = init_params(ModelConfig{}, 7);
  Tape tape;
  const BoundParams b = bind(tape, p, true);
  const ForwardOut out = forward(b, tape.leaf(random_tensor(Shape{3, 16, 16}, 8, 0.0, 1.0)));
  MaskSet ms{16, 16, {}};
  ms.add(SegmentMask(16, 16, {{0, 100}}));
  ms.add(SegmentMask(16, 16, {{90, 100}}));
  ms.add(SegmentMask(16, 16, {{200, 56}}));
  const RealLoss rl = real_loss(out.dense, ms);
  ASSERT_TRUE(rl.active);
  tape.backward(rl.total);
  for (const char* name : {"enc0.weight", "down1.weight", "down2.weight", "fuse.weight", "dense1.weight"}) {
    double norm = 0.0;
    for (double g : b[p.index_of(name)].grad().values()) norm += g * g;
    EXPECT_GT(norm, 0.0) << name;
  }
  // The segmentation head is not on the dense path.
  double seg = 0.0;
  for (double g : b[p.index_of("seg.weight")].grad().values()) seg += g * g;
  EXPECT_EQ(seg, 0.0);
  EXPECT_FALSE(b[p.index_of("seg.weight")].reached());
  EXPECT_TRUE(b[p.index_of("enc0.weight")].reached());
}

}  // namespace
