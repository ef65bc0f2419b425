#include <gtest/gtest.h>

#include <zlib.h>

#include <Eigen/Core>

#include <filesystem>
#include <random>

#include "ror/checkpoint.hpp"
#include "ror/data.hpp"

using namespace ror;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> c10_records(const std::vector<int>& labels, int salt = 0) {
  std::vector<std::uint8_t> bytes;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    bytes.push_back(static_cast<std::uint8_t>(labels[r]));
    for (std::size_t i = 0; i < kCifarPixels; ++i) bytes.push_back(static_cast<std::uint8_t>((i * (r + 1) + salt) % 256));
  }
  return bytes;
}

fs::path temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("ror_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

template <typename Fn>
std::string error_of(Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

Model<double> small_model(int m, int classes = 10, std::uint64_t seed = 1) {
  ArchConfig c;
  c.blocks_per_group = {1, 1, 1};
  c.levels_m = m;
  c.num_classes = classes;
  c.input_size = 8;
  return build<double>(c, seed);
}

void set_crc(std::vector<std::uint8_t>& bytes) {
  const uLong crc = crc32(0L, bytes.data(), static_cast<uInt>(bytes.size() - 4));
  for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(crc >> (8 * i));
}

}  // namespace

TEST(Cifar, TwoRecordFixture) {
  const auto bytes = c10_records({3, 9});
  const Dataset d = parse_cifar(bytes, CifarVariant::c10, "train");
  ASSERT_EQ(d.size(), 2);
  EXPECT_EQ(d.labels, (std::vector<int>{3, 9}));
  EXPECT_EQ(d.images.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(d.class_count, 10);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < kCifarPixels; ++i) {
      const float expect = static_cast<float>((i * (r + 1)) % 256) / 255.0f;
      ASSERT_EQ(d.images[static_cast<Index>(r * kCifarPixels + i)], expect);
    }
  // Planes are channel-major: pixel byte 1024 is channel 1 at (0, 0).
  EXPECT_EQ(d.images.at(0, 1, 0, 0), static_cast<float>(1024 % 256) / 255.0f);
  EXPECT_EQ(d.images.at(1, 0, 0, 5), 10.0f / 255.0f);
  EXPECT_EQ(d.digest, crc32_hex(bytes));
}

TEST(Cifar, HundredClassUsesFineLabel) {
  std::vector<std::uint8_t> bytes{19, 87};
  bytes.resize(2 + kCifarPixels, 255);
  const Dataset d = parse_cifar(bytes, CifarVariant::c100, "test");
  EXPECT_EQ(d.labels, std::vector<int>{87});
  EXPECT_EQ(d.class_count, 100);
  EXPECT_EQ(d.images[100], 1.0f);
  bytes[1] = 100;
  EXPECT_NE(error_of([&] { parse_cifar(bytes, CifarVariant::c100, "test"); }).find("byte offset 1"), std::string::npos);
}

TEST(Cifar, TruncationAndLabelErrorsNameTheOffset) {
  auto bytes = c10_records({1, 2});
  bytes.pop_back();
  const std::string truncated = error_of([&] { parse_cifar(bytes, CifarVariant::c10, "train"); });
  EXPECT_NE(truncated.find("truncated record at byte offset 3073"), std::string::npos) << truncated;
  auto bad = c10_records({1, 12});
  const std::string label = error_of([&] { parse_cifar(bad, CifarVariant::c10, "train"); });
  EXPECT_NE(label.find("label 12"), std::string::npos);
  EXPECT_NE(label.find("byte offset 3073"), std::string::npos) << label;
  EXPECT_THROW(parse_cifar(std::vector<std::uint8_t>{}, CifarVariant::c10, "train"), IoError);
}

TEST(Cifar, LoadsShardsFromDirectory) {
  const fs::path dir = temp_dir("c10");
  for (int b = 1; b <= 5; ++b) {
    const auto bytes = c10_records({b, b + 1}, b);
    write_file(dir / ("data_batch_" + std::to_string(b) + ".bin"), bytes);
  }
  const auto test_bytes = c10_records({0, 4, 8});
  write_file(dir / "test_batch.bin", test_bytes);
  const auto [train, test] = load_cifar(dir, CifarVariant::c10);
  EXPECT_EQ(train.size(), 10);
  EXPECT_EQ(test.size(), 3);
  EXPECT_EQ(train.labels[2], 2);
  EXPECT_EQ(train.labels[9], 6);
  EXPECT_EQ(train.split, "train");
  EXPECT_EQ(test.digest, crc32_hex(test_bytes));
  EXPECT_EQ(train.images.at(1, 0, 0, 1), static_cast<float>(2 + 1) / 255.0f);

  fs::remove(dir / "data_batch_3.bin");
  EXPECT_NE(error_of([&] { load_cifar(dir, CifarVariant::c10); }).find("data_batch_3.bin"), std::string::npos);
  EXPECT_THROW(load_cifar(dir / "absent", CifarVariant::c100), IoError);
}

TEST(Crc32, StandardCheckValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32_hex(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())), "cbf43926");
}

TEST(Synthetic, DeterministicBalancedAndInRange) {
  const Dataset a = synthetic_dataset(4, 10, 203, Difficulty::medium);
  const Dataset b = synthetic_dataset(4, 10, 203, Difficulty::medium);
  EXPECT_TRUE((a.images.values() == b.images.values()).all());
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.digest, b.digest);
  EXPECT_NE(synthetic_dataset(5, 10, 203, Difficulty::medium).digest, a.digest);
  EXPECT_NE(synthetic_dataset(4, 10, 203, Difficulty::medium, "test").digest, a.digest);
  std::vector<int> hist(10, 0);
  for (int y : a.labels) ++hist[static_cast<std::size_t>(y)];
  EXPECT_LE(*std::max_element(hist.begin(), hist.end()) - *std::min_element(hist.begin(), hist.end()), 1);
  EXPECT_GE(a.images.values().minCoeff(), 0.0f);
  EXPECT_LE(a.images.values().maxCoeff(), 1.0f);
  EXPECT_EQ(parse_difficulty("hard"), Difficulty::hard);
  EXPECT_THROW(parse_difficulty("trivial"), ConfigError);
}

// Separability oracle: a 2-layer ReLU network written directly in Eigen, trained by full-batch
// gradient descent on the easy set, must classify held-out samples almost perfectly.
TEST(Synthetic, EasySetIsSeparableByASmallMlp) {
  using Mat = Eigen::MatrixXf;
  const Dataset train = synthetic_dataset(1, 10, 500, Difficulty::easy, "train");
  const Dataset test = synthetic_dataset(1, 10, 200, Difficulty::easy, "test");
  const Index d = 3 * 32 * 32, hidden = 32, k = 10;
  auto as_matrix = [&](const Dataset& s) {
    Mat x = Eigen::Map<const Mat>(s.images.data(), d, s.size());
    return Mat(x.array() - 0.5f);
  };
  const Mat xtr = as_matrix(train), xte = as_matrix(test);
  Mat ytr = Mat::Zero(k, train.size());
  for (Index i = 0; i < train.size(); ++i) ytr(train.labels[static_cast<std::size_t>(i)], i) = 1;

  std::mt19937_64 rng(2);
  std::normal_distribution<float> n01;
  Mat w1 = Mat::NullaryExpr(hidden, d, [&] { return n01(rng) * std::sqrt(2.0f / d); });
  Mat w2 = Mat::NullaryExpr(k, hidden, [&] { return n01(rng) * std::sqrt(2.0f / hidden); });
  Eigen::VectorXf b1 = Eigen::VectorXf::Zero(hidden), b2 = Eigen::VectorXf::Zero(k);
  const float lr = 0.1f;
  for (int it = 0; it < 150; ++it) {
    const Mat h = ((w1 * xtr).colwise() + b1).cwiseMax(0.0f);
    Mat logits = (w2 * h).colwise() + b2;
    Mat p = (logits.rowwise() - logits.colwise().maxCoeff()).array().exp();
    p = p.array().rowwise() / p.colwise().sum().array();
    const Mat g2 = (p - ytr) / static_cast<float>(train.size());
    const Mat gh = (w2.transpose() * g2).cwiseProduct((h.array() > 0.0f).cast<float>().matrix());
    w2 -= lr * g2 * h.transpose();
    b2 -= lr * g2.rowwise().sum();
    w1 -= lr * gh * xtr.transpose();
    b1 -= lr * gh.rowwise().sum();
  }
  const Mat logits = (w2 * ((w1 * xte).colwise() + b1).cwiseMax(0.0f)).colwise() + b2;
  int correct = 0;
  for (Index i = 0; i < test.size(); ++i) {
    Index arg = 0;
    logits.col(i).maxCoeff(&arg);
    correct += arg == test.labels[static_cast<std::size_t>(i)];
  }
  EXPECT_GT(correct, 198) << correct << " of 200";
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const fs::path dir = temp_dir("ckpt");
  Model<double> m = small_model(3);
  m.batch_norms.begin()->second.running_mean[0] = 0.125;
  save_checkpoint(dir / "a.ckpt", to_checkpoint(m));
  Model<double> back = load_model<double>(load_checkpoint(dir / "a.ckpt"));
  save_checkpoint(dir / "b.ckpt", to_checkpoint(back));
  EXPECT_EQ(read_file(dir / "a.ckpt"), read_file(dir / "b.ckpt"));
  EXPECT_EQ(back.batch_norms.begin()->second.running_mean[0], 0.125);
  EXPECT_EQ(back.graph.plan.config, m.graph.plan.config);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST(Checkpoint, CorruptionIsDetectedBeforeParsing) {
  auto bytes = encode_checkpoint(to_checkpoint(small_model(2)));
  for (std::size_t at : {std::size_t{9}, bytes.size() / 2, bytes.size() - 5}) {
    auto bad = bytes;
    bad[at] ^= 0x40;
    EXPECT_THROW(decode_checkpoint(bad), ChecksumError) << "byte " << at;
  }
  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  EXPECT_THROW(decode_checkpoint(truncated), IoError);
  auto magic = bytes;
  magic[0] = 'X';
  set_crc(magic);
  EXPECT_THROW(decode_checkpoint(magic), IoError);
  auto version = bytes;
  version[8] = 2;
  set_crc(version);
  try {
    decode_checkpoint(version);
    FAIL() << "version 2 accepted";
  } catch (const ChecksumError&) {
    FAIL() << "checksum should have been recomputed";
  } catch (const VersionError& e) {
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
  }
}

TEST(Checkpoint, NameMismatchListsBothDirections) {
  const Checkpoint with_levels = to_checkpoint(small_model(2));
  Model<double> plain = small_model(1);
  const std::string extra = error_of([&] { restore(plain, with_levels); });
  EXPECT_NE(extra.find("unexpected levels.l1.root.weight"), std::string::npos) << extra;
  EXPECT_EQ(extra.find("missing"), std::string::npos);

  Model<double> leveled = small_model(2);
  const std::string missing = error_of([&] { restore(leveled, to_checkpoint(small_model(1))); });
  EXPECT_NE(missing.find("missing levels.l1.root.weight"), std::string::npos) << missing;
  EXPECT_THROW(restore(leveled, to_checkpoint(small_model(1))), TensorNameError);
}

TEST(Checkpoint, ShapeMismatchLeavesModelUntouched) {
  Model<double> m = small_model(1, 10, 3);
  const Model<double> before = m.clone();
  EXPECT_THROW(restore(m, to_checkpoint(small_model(1, 7, 4))), IoError);
  for (const auto& [name, p] : m.params) EXPECT_TRUE((p.value().values() == before.params.at(name).value().values()).all());
}

TEST(Checkpoint, DoubleCheckpointLoadsIntoFloatModel) {
  const Model<double> m = small_model(3, 10, 5);
  const Checkpoint ckpt = decode_checkpoint(encode_checkpoint(to_checkpoint(m)));
  EXPECT_EQ(ckpt.find("head.fc.weight")->dtype, DType::f64);
  Model<float> f = load_model<float>(ckpt);
  for (const auto& [name, p] : m.params) {
    const auto& got = f.params.at(name).value();
    for (Index i = 0; i < got.size(); ++i) ASSERT_EQ(got[i], static_cast<float>(p.value()[i])) << name;
  }
}
