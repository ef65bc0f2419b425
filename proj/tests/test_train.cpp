#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "ror/train.hpp"

using namespace ror;

namespace {

Model<float> tiny_model(std::uint64_t seed, int m = 3, std::optional<double> p_L = std::nullopt) {
  ArchConfig c;
  c.blocks_per_group = {1, 1, 1};
  c.levels_m = m;
  c.input_size = 8;
  c.sd_p_L = p_L;
  return build<float>(c, seed);
}

TrainConfig tiny_config() {
  TrainConfig t;
  t.max_epochs = 3;
  t.milestones = {2};
  t.batch_size = 16;
  t.seed = 5;
  return t;
}

std::pair<Dataset, Dataset> tiny_data() {
  Dataset train = synthetic_dataset(3, 4, 48, Difficulty::easy, "train", 8);
  Dataset test = synthetic_dataset(3, 4, 20, Difficulty::easy, "test", 8);
  normalize_dataset(train, test);
  return {std::move(train), std::move(test)};
}

Tensor<float> random_image(std::uint64_t seed, int size = 32) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  Tensor<float> t(Shape{3, size, size});
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("ror_test_train_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(LrSchedule, CifarAndSvhnProtocols) {
  const TrainConfig c = cifar_protocol();
  EXPECT_EQ(c.max_epochs, 500);
  EXPECT_EQ(lr_at(c, 0), 0.1);
  EXPECT_EQ(lr_at(c, 249), 0.1);
  EXPECT_NEAR(lr_at(c, 251), 0.01, 1e-15);
  EXPECT_NEAR(lr_at(c, 376), 0.001, 1e-15);
  const TrainConfig s = svhn_protocol();
  EXPECT_EQ(s.max_epochs, 50);
  EXPECT_NEAR(lr_at(s, 31), 0.01, 1e-15);
  EXPECT_NEAR(lr_at(s, 36), 0.001, 1e-15);
}

TEST(TrainConfig, Validation) {
  TrainConfig c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.milestones = {2, 2};
  EXPECT_THROW(c.validate(), ConfigError);
  c.milestones = {3};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.sd_p_L = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainConfig, TextKeys) {
  TrainConfig c;
  set_train_field(c, "base_lr", "0.05");
  set_train_field(c, "milestones", "10,20");
  set_train_field(c, "max_epochs", "30");
  set_train_field(c, "hflip", "false");
  set_train_field(c, "sd.p_L", "0.5");
  EXPECT_EQ(c.base_lr, 0.05);
  EXPECT_EQ(c.milestones, (std::vector<int>{10, 20}));
  EXPECT_FALSE(c.augmentation.hflip);
  EXPECT_EQ(c.sd_p_L, 0.5);
  EXPECT_NE(to_text(c).find("milestones=10,20"), std::string::npos);
  EXPECT_THROW(set_train_field(c, "learning_rate", "1"), ConfigError);
  EXPECT_THROW(set_train_field(c, "batch_size", "many"), ConfigError);
}

TEST(Sgd, VanillaLimitAndFixedPoint) {
  Parameter<double> p("w", Tensor<double>(Shape{3}, 2.0));
  backward(sum(p.var));
  sgd_step<double>(std::vector{&p}, 0.5, SgdOptions{0.0, 0.0});
  EXPECT_TRUE((p.value().values() == 1.5).all());

  Parameter<double> q("q", Tensor<double>(Shape{2}, 3.0));
  q.var.node().grad = Tensor<double>::zeros(Shape{2});
  sgd_step<double>(std::vector{&q}, 0.1, SgdOptions{0.9, 0.0});
  EXPECT_TRUE((q.value().values() == 3.0).all());
}

TEST(Sgd, MatchesScalarNesterovOracle) {
  // loss = 0.5 a w^2 - b w, gradient a w - b.
  const double a = 3.0, b = 1.0, lr = 0.1, mu = 0.9, lambda = 1e-2;
  Parameter<double> p("w", Tensor<double>(Shape{1}, 2.0));
  oracle::ScalarNesterov ref{2.0};
  for (int step = 0; step < 3; ++step) {
    p.zero_grad();
    p.var.node().grad = Tensor<double>(Shape{1}, a * p.value()[0] - b);
    ref.step(a * ref.w - b, lr, mu, lambda);
    sgd_step<double>(std::vector{&p}, lr, SgdOptions{mu, lambda});
    EXPECT_NEAR(p.value()[0], ref.w, 1e-12) << "step " << step;
    EXPECT_NEAR((*p.momentum_buffer)[0], ref.v, 1e-12);
  }
}

TEST(Sgd, WeightDecayShrinksAndMissingGradientIsAnError) {
  Parameter<double> p("w", Tensor<double>(Shape{4}, 1.0));
  p.var.node().grad = Tensor<double>::zeros(Shape{4});
  sgd_step<double>(std::vector{&p}, 0.1, SgdOptions{0.0, 0.5});
  EXPECT_TRUE((p.value().values() == 0.95).all());
  Parameter<double> none("none", Tensor<double>(Shape{1}, 1.0));
  EXPECT_THROW(sgd_step<double>(std::vector{&p, &none}, 0.1, SgdOptions{}), ConfigError);
  EXPECT_TRUE((p.value().values() == 0.95).all());
}

TEST(Augment, FlipIsAnInvolutionAndCentreCropIsIdentity) {
  const Tensor<float> img = random_image(1);
  const CropFlip flip{4, 4, true};
  const Tensor<float> once = augment(img, flip);
  EXPECT_FALSE((once.values() == img.values()).all());
  EXPECT_TRUE((augment(once, flip).values() == img.values()).all());
  EXPECT_TRUE((augment(img, CropFlip{}).values() == img.values()).all());
  EXPECT_THROW(augment(img, CropFlip{9, 0, false}), ConfigError);
  EXPECT_THROW(augment(Tensor<float>(Shape{3, 4, 5}), CropFlip{}), ConfigError);
}

TEST(Augment, CropPixelsComeFromThePaddedImage) {
  const Tensor<float> img = random_image(2, 12);
  std::vector<float> padded(img.data(), img.data() + img.size());
  padded.insert(padded.end(), static_cast<std::size_t>(3 * (20 * 20 - 12 * 12)), 0.0f);
  std::sort(padded.begin(), padded.end());
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor<float> out = augment(img, rng);
    std::vector<float> got(out.data(), out.data() + out.size());
    std::sort(got.begin(), got.end());
    EXPECT_TRUE(std::includes(padded.begin(), padded.end(), got.begin(), got.end()));
  }
}

TEST(Augment, DeterministicPerSeed) {
  const Tensor<float> img = random_image(4);
  std::mt19937_64 a(9), b(9);
  for (int i = 0; i < 5; ++i) EXPECT_TRUE((augment(img, a).values() == augment(img, b).values()).all());
  std::mt19937_64 c(9);
  const CropFlip off = sample_crop_flip(c, Augmentation{false, false});
  EXPECT_EQ(off.dy, 4);
  EXPECT_EQ(off.dx, 4);
  EXPECT_FALSE(off.flip);
}

TEST(Normalize, RecomputedStatistics) {
  Dataset d;
  d.split = "train";
  d.class_count = 1;
  d.images = Tensor<float>(Shape{200, 3, 8, 8}, 0.5f);
  d.labels.assign(200, 0);
  std::mt19937_64 rng(5);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  for (Index i = 0; i < d.images.size(); ++i) d.images[i] += noise(rng);
  const ChannelStats s = channel_stats(d);
  apply_normalization(d, s);
  const ChannelStats after = channel_stats(d);
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(s.mean[static_cast<std::size_t>(c)], 0.5, 0.05);
    EXPECT_NEAR(after.mean[static_cast<std::size_t>(c)], 0.0, 1e-6);
    EXPECT_NEAR(after.std[static_cast<std::size_t>(c)], 1.0, 1e-3);
  }
  const Tensor<float> before = d.images;
  apply_normalization(d, channel_stats(d));
  EXPECT_LT((d.images.values() - before.values()).abs().maxCoeff(), 1e-4f);
}

TEST(Normalize, TestSplitUsesTrainStatistics) {
  Dataset train = synthetic_dataset(1, 3, 30, Difficulty::hard, "train", 8);
  Dataset test = synthetic_dataset(1, 3, 30, Difficulty::hard, "test", 8);
  const Dataset raw_test = test;
  const ChannelStats s = normalize_dataset(train, test);
  EXPECT_EQ(s.source_split, "train");
  Dataset expect = raw_test;
  apply_normalization(expect, s);
  EXPECT_TRUE((expect.images.values() == test.images.values()).all());
  Dataset other = raw_test;
  apply_normalization(other, channel_stats(raw_test));
  EXPECT_FALSE((other.images.values() == test.images.values()).all());
}

TEST(Normalize, ZeroStdIsAnError) {
  Dataset d;
  d.split = "train";
  d.class_count = 1;
  d.images = Tensor<float>(Shape{2, 3, 4, 4}, 0.25f);
  d.labels = {0, 0};
  EXPECT_THROW(channel_stats(d), ConfigError);
}

TEST(Evaluate, OneHotLogitsHaveNoErrors) {
  const std::vector<int> labels{2, 0, 1, 1};
  Tensor<float> logits(Shape{4, 3}, 0.0f);
  for (Index i = 0; i < 4; ++i) logits.at(i, labels[static_cast<std::size_t>(i)]) = 1.0f;
  EXPECT_EQ(count_errors(logits, std::span<const int>(labels)), 0);
  logits.at(0, 0) = 5.0f;
  EXPECT_EQ(count_errors(logits, std::span<const int>(labels)), 1);
}

TEST(Evaluate, UniformModelIsAtChanceAndPure) {
  Model<float> m = tiny_model(1);
  m.params.at("head.fc.weight").mutable_value().values().setZero();
  m.params.at("head.fc.bias").mutable_value().values().setZero();
  Dataset d = synthetic_dataset(2, 10, 2000, Difficulty::hard, "test", 8);
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> label(0, 9);
  for (int& y : d.labels) y = label(rng);
  const Model<float> before = m.clone();
  const double err = evaluate(m, d);
  EXPECT_NEAR(err, 90.0, 2.5);
  EXPECT_EQ(evaluate(m, d), err);
  for (const auto& [name, bn] : m.batch_norms) {
    EXPECT_TRUE((bn.running_mean.values() == before.batch_norms.at(name).running_mean.values()).all());
  }
}

TEST(Train, DeterministicWithLrColumnAndCheckpoints) {
  const auto [train_set, test_set] = tiny_data();
  const auto dir = temp_dir("determinism");
  Model<float> a = tiny_model(7);
  Model<float> b = tiny_model(7);
  TrainHooks hooks;
  hooks.checkpoint_dir = dir;
  int seen = 0;
  hooks.on_epoch = [&](const MetricsRow& r) { EXPECT_EQ(r.epoch, seen++); };
  const MetricsLog la = train(a, train_set, test_set, tiny_config(), hooks);
  const MetricsLog lb = train(b, train_set, test_set, tiny_config());
  ASSERT_EQ(la.rows.size(), 3u);
  EXPECT_EQ(seen, 3);
  for (std::size_t i = 0; i < la.rows.size(); ++i) {
    EXPECT_TRUE(la.rows[i].same_numbers(lb.rows[i])) << "epoch " << i;
    EXPECT_EQ(la.rows[i].lr, lr_at(tiny_config(), static_cast<int>(i)));
    EXPECT_FALSE(la.rows[i].gate_seed.has_value());
  }
  for (const auto& [name, p] : a.params) EXPECT_TRUE((p.value().values() == b.params.at(name).value().values()).all());
  EXPECT_TRUE(std::filesystem::exists(dir / "epoch2.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "final.ckpt"));
  Model<float> restored = load_model<float>(load_checkpoint(dir / "final.ckpt"));
  EXPECT_EQ(evaluate(restored, test_set), la.rows.back().test_err);
}

TEST(Train, StochasticDepthLogsGateSeedsAndSkipsDroppedParameters) {
  const auto [train_set, test_set] = tiny_data();
  Model<float> m = tiny_model(8, 3, 0.5);
  TrainConfig c = tiny_config();
  const MetricsLog log = train(m, train_set, test_set, c);
  for (std::size_t i = 0; i < log.rows.size(); ++i) {
    ASSERT_TRUE(log.rows[i].gate_seed.has_value());
    EXPECT_EQ(*log.rows[i].gate_seed, epoch_gate_seed(c.seed, static_cast<int>(i)));
  }
}

TEST(Train, DivergenceNamesTheEpoch) {
  const auto [train_set, test_set] = tiny_data();
  Model<float> m = tiny_model(9);
  TrainConfig c = tiny_config();
  c.base_lr = 1e30;
  try {
    train(m, train_set, test_set, c);
    FAIL() << "training at lr 1e30 did not diverge";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite value at epoch 0"), std::string::npos) << e.what();
  }
}

TEST(Train, RejectsMismatchedData) {
  Model<float> m = tiny_model(1);
  Dataset wide = synthetic_dataset(1, 20, 40, Difficulty::easy, "train", 8);
  EXPECT_THROW(train(m, wide, wide, tiny_config()), ConfigError);
}

TEST(MetricsLog, CsvRoundTripAndOrdering) {
  MetricsLog log;
  MetricsRow r;
  r.train_loss = 2.302585092994046;
  r.train_err = 87.5;
  r.test_err = 90.0;
  r.lr = 0.1;
  r.wall_seconds = 1.25;
  log.append(r);
  r.epoch = 1;
  r.train_loss = 1.0 / 3.0;
  r.gate_seed = 18446744073709551615ULL;
  log.append(r);
  const std::string text = log.csv();
  EXPECT_EQ(text.substr(0, text.find('\n')), "epoch,train_loss,train_err,test_err,lr,wall_seconds,gate_seed");
  const MetricsLog back = MetricsLog::parse_csv(text);
  ASSERT_EQ(back.rows.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_TRUE(back.rows[i].same_numbers(log.rows[i]));
    EXPECT_EQ(back.rows[i].wall_seconds, log.rows[i].wall_seconds);
  }
  r.epoch = 5;
  EXPECT_THROW(log.append(r), ConfigError);
  EXPECT_THROW(MetricsLog::parse_csv("epoch,loss\n"), IoError);
}
