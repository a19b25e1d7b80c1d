// SPDX-License-Identifier: Apache-2.0
#include <algorithm>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace {

using namespace segpool;
using segpool::testing::read_bytes;
using segpool::testing::TempDir;

constexpr std::size_t kSize = 32;

// Small synthetic, real and test splits plus oracle masks for the real split.
class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("trainer");
    gen_dataset(6, DomainParams::synthetic(), *dir_ / "syn", 1ull << 40, kDefaultClasses, kSize, kSize);
    gen_dataset(6, DomainParams::real(), *dir_ / "real", 2ull << 40, kDefaultClasses, kSize, kSize);
    gen_dataset(3, DomainParams::real(), *dir_ / "test", 3ull << 40, kDefaultClasses, kSize, kSize);
    simulate_masks(Dataset::open(*dir_ / "real", LabelAccess::forbidden), *dir_ / "masks", OracleParams{}, 4);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static TrainConfig config(TrainMode mode) {
    TrainConfig c;
    c.mode = mode;
    c.epochs = 2;
    c.frames_per_epoch = 3;
    c.seed = 5;
    c.eval_last_k = 2;
    c.model.base_channels = 6;
    c.model.fused_channels = 8;
    c.model.hidden_channels = 6;
    c.syn_dir = *dir_ / "syn";
    c.real_dir = *dir_ / "real";
    c.masks_dir = *dir_ / "masks";
    c.test_dir = *dir_ / "test";
    return c;
  }

  static TempDir* dir_;
};

TempDir* TrainerTest::dir_ = nullptr;

TEST_F(TrainerTest, FullModeTakesTwoStepsPerFrame) {
  TrainConfig c = config(TrainMode::full);
  c.epochs = 1;
  const TrainResult r = train(c);
  EXPECT_EQ(r.checkpoint.adam.step, 6u);
  ASSERT_EQ(r.steps.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(r.steps[i].real_frame, i % 2 == 1);
    EXPECT_EQ(r.steps[i].supervised.has_value(), i % 2 == 0);
    EXPECT_EQ(r.steps[i].combined_real.has_value(), i % 2 == 1);
  }
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_EQ(r.log[0].optimizer_steps, 6u);
  EXPECT_TRUE(r.log[0].mean_inv_loss.has_value());
}

TEST_F(TrainerTest, SynOnlyHasNoRealEntries) {
  const TrainResult r = train(config(TrainMode::syn_only));
  EXPECT_EQ(r.checkpoint.adam.step, 6u);
  for (const auto& s : r.steps) {
    EXPECT_FALSE(s.real_frame);
    EXPECT_FALSE(s.combined_real.has_value());
  }
  for (const auto& m : r.log) {
    EXPECT_FALSE(m.mean_inv_loss.has_value());
    EXPECT_FALSE(m.mean_var_loss.has_value());
    ASSERT_TRUE(m.ema_miou.has_value());
  }
  ASSERT_TRUE(r.last_k_miou.has_value());
  EXPECT_DOUBLE_EQ(*r.last_k_miou, (*r.log[0].ema_miou + *r.log[1].ema_miou) / 2.0);
}

TEST_F(TrainerTest, SynOnlyNeverTouchesRealDirectory) {
  TrainConfig c = config(TrainMode::syn_only);
  c.real_dir = *dir_ / "does-not-exist";
  c.masks_dir.clear();
  EXPECT_NO_THROW((void)train(c));
}

TEST_F(TrainerTest, RealLabelsModeTrainsOnRealLabels) {
  TrainConfig c = config(TrainMode::real_labels);
  c.syn_dir.clear();
  const TrainResult r = train(c);
  EXPECT_EQ(r.checkpoint.adam.step, 6u);
  EXPECT_EQ(r.checkpoint.train_config["mode"], "real-labels");
}

TEST_F(TrainerTest, ModeContract) {
  TrainConfig c = config(TrainMode::full);
  c.masks_dir.clear();
  EXPECT_THROW((void)train(c), ContractViolation);
  c = config(TrainMode::syn_only);
  c.syn_dir.clear();
  EXPECT_THROW((void)train(c), ContractViolation);
  EXPECT_THROW((void)parse_train_mode("semi"), ContractViolation);
  EXPECT_EQ(parse_train_mode("real-labels"), TrainMode::real_labels);
}

TEST_F(TrainerTest, MissingMaskFileNamesTheFrame) {
  TempDir masks("no_masks");
  TrainConfig c = config(TrainMode::full);
  c.masks_dir = masks.path();
  try {
    (void)train(c);
    FAIL() << "expected a DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("real frame"), std::string::npos) << msg;
    EXPECT_NE(msg.find(".masks.json"), std::string::npos) << msg;
  }
}

TEST_F(TrainerTest, IdenticalConfigsGiveIdenticalBytes) {
  TempDir out("det");
  TrainConfig a = config(TrainMode::full), b = a;
  a.out_dir = out / "a";
  b.out_dir = out / "b";
  (void)train(a);
  (void)train(b);
  EXPECT_EQ(read_bytes(out / "a" / "checkpoint.srgc"), read_bytes(out / "b" / "checkpoint.srgc"));
  EXPECT_EQ(read_bytes(out / "a" / "metrics.jsonl"), read_bytes(out / "b" / "metrics.jsonl"));
  EXPECT_EQ(read_bytes(out / "a" / "summary.json"), read_bytes(out / "b" / "summary.json"));

  std::ifstream log(out / "a" / "metrics.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const auto m = epoch_metrics_from_json(nlohmann::json::parse(line));
    EXPECT_EQ(m.epoch, lines++);
  }
  EXPECT_EQ(lines, a.epochs);
}

TEST_F(TrainerTest, PoisonedRealLabelsDoNotChangeTraining) {
  TempDir work("poison");
  std::filesystem::copy(*dir_ / "real", work / "real");
  TrainConfig c = config(TrainMode::full);
  c.real_dir = work / "real";
  const TrainResult clean = train(c);

  // Overwrite every real label map with out-of-range garbage, then remove some.
  const Dataset d = Dataset::open(work / "real", LabelAccess::allowed);
  std::size_t poisoned = 0;
  for (const auto& e : std::filesystem::directory_iterator(work / "real")) {
    if (!e.path().filename().string().ends_with(".labels.pgm")) continue;
    write_ids(e.path(), LabelGrid(kSize, kSize, 250));
    ++poisoned;
  }
  EXPECT_EQ(poisoned, d.size());
  EXPECT_THROW((void)d.labels(0), DataError);
  const TrainResult poison = train(c);
  std::filesystem::remove(work / "real" / "frame_00001.labels.pgm");
  const TrainResult missing = train(c);

  EXPECT_EQ(serialize(clean.checkpoint), serialize(poison.checkpoint));
  EXPECT_EQ(serialize(clean.checkpoint), serialize(missing.checkpoint));
  EXPECT_EQ(clean.steps, poison.steps);
  EXPECT_EQ(clean.log, missing.log);
}

TEST_F(TrainerTest, EmaAfterFirstStepIsExactBlend) {
  TrainConfig c = config(TrainMode::syn_only);
  c.epochs = 1;
  c.frames_per_epoch = 1;
  c.test_dir.clear();
  const TrainResult r = train(c);
  const ModelParams init = init_params(c.model, derive_seed(c.seed, 10));
  const ModelParams& updated = r.checkpoint.params;
  ASSERT_NE(updated, init);
  for (std::size_t i = 0; i < init.tensors.size(); ++i)
    for (std::size_t j = 0; j < init.tensors[i].size(); ++j)
      EXPECT_EQ(r.checkpoint.ema.tensors[i][j], 0.99 * init.tensors[i][j] + (1.0 - 0.99) * updated.tensors[i][j]);
}

TEST_F(TrainerTest, SynOnlyLeavesDenseHeadUntouched) {
  TrainConfig c = config(TrainMode::syn_only);
  c.test_dir.clear();
  const TrainResult r = train(c);
  const ModelParams init = init_params(c.model, derive_seed(c.seed, 10));
  for (const char* name : {"dense1.weight", "dense2.bias"}) {
    const std::size_t i = init.index_of(name);
    EXPECT_EQ(r.checkpoint.params.tensors[i], init.tensors[i]) << name;
    EXPECT_EQ(r.checkpoint.adam.m[i], Tensor(init.tensors[i].shape())) << name;
  }
  const std::size_t seg = init.index_of("seg.weight");
  EXPECT_NE(r.checkpoint.params.tensors[seg], init.tensors[seg]);
}

TEST_F(TrainerTest, SupervisedLossDecreases) {
  TrainConfig c = config(TrainMode::syn_only);
  c.epochs = 10;
  c.frames_per_epoch = 12;
  c.test_dir.clear();
  const TrainResult r = train(c);
  std::vector<double> first, last;
  for (std::size_t e = 0; e < 5; ++e) first.push_back(*r.log[e].mean_sup_loss);
  for (std::size_t e = 5; e < 10; ++e) last.push_back(*r.log[e].mean_sup_loss);
  std::nth_element(first.begin(), first.begin() + 2, first.end());
  std::nth_element(last.begin(), last.begin() + 2, last.end());
  EXPECT_LT(last[2], first[2]);
}

TEST(Checkpoint, RoundTripAndForwardBitExact) {
  Checkpoint ck;
  ck.model.base_channels = 4;
  ck.model.fused_channels = 5;
  ck.params = init_params(ck.model, 1);
  ck.ema = init_params(ck.model, 2);
  ck.adam = AdamState::for_params(ck.params.tensors);
  ck.adam.step = 17;
  ck.adam.m[3].fill(0.125);
  ck.epoch = 3;
  ck.train_config = {{"mode", "full"}};
  ck.log.push_back({0, 1.5, std::nullopt, 0.25, 0.5, 9});
  TempDir dir("ckpt");
  save_checkpoint(ck, dir / "c.srgc");
  const Checkpoint back = load_checkpoint(dir / "c.srgc");
  EXPECT_EQ(back, ck);
  const Tensor x = segpool::testing::random_tensor(Shape{3, 16, 16}, 3, 0.0, 1.0);
  EXPECT_EQ(predict_logits(back.ema, x), predict_logits(ck.ema, x));
  EXPECT_EQ(serialize(back), serialize(ck));
}

TEST(Checkpoint, CorruptFilesAreErrors) {
  Checkpoint ck;
  ck.params = init_params(ck.model, 1);
  ck.ema = ck.params;
  ck.adam = AdamState::for_params(ck.params.tensors);
  const std::string bytes = serialize(ck);
  for (std::size_t cut : {std::size_t{0}, std::size_t{10}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW((void)deserialize_checkpoint(bytes.substr(0, cut)), DataError) << "cut " << cut;
  std::string bad_version = bytes;
  bad_version[4] = 9;
  try {
    (void)deserialize_checkpoint(bad_version);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos);
  }
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW((void)deserialize_checkpoint(bad_magic), DataError);
  EXPECT_THROW((void)deserialize_checkpoint(bytes + "extra!!!"), DataError);
  EXPECT_THROW((void)load_checkpoint("/nonexistent/ckpt.srgc"), DataError);
}

}  // namespace
