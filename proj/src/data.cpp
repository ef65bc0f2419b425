#include "ror/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>

#include "ror/error.hpp"
#include "ror/init.hpp"

namespace ror {

void Dataset::validate() const {
  if (labels.empty()) throw ConfigError("dataset '" + split + "' is empty");
  if (images.shape().rank() != 4 || images.dim(0) != size()) {
    throw ConfigError("dataset '" + split + "': image tensor " + images.shape().str() + " does not match " +
                      std::to_string(size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || y >= class_count) {
      throw ConfigError("dataset '" + split + "': label " + std::to_string(y) + " outside [0," +
                        std::to_string(class_count) + ")");
    }
  }
}

std::string crc32_hex(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
    crc = crc32(crc, bytes.data() + offset, chunk);
    offset += chunk;
  }
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

Dataset parse_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant, const std::string& split) {
  const std::size_t label_bytes = variant == CifarVariant::c10 ? 1 : 2;
  const std::size_t record = label_bytes + kCifarPixels;
  if (bytes.empty()) throw IoError("cifar " + split + ": no records");
  if (bytes.size() % record != 0) {
    const std::size_t complete = bytes.size() / record;
    throw IoError("cifar " + split + ": truncated record at byte offset " + std::to_string(complete * record) +
                  " (record size " + std::to_string(record) + ", file size " + std::to_string(bytes.size()) + ")");
  }
  const std::size_t n = bytes.size() / record;
  Dataset d;
  d.split = split;
  d.class_count = variant == CifarVariant::c10 ? 10 : 100;
  d.images = Tensor<float>(Shape{static_cast<Index>(n), 3, 32, 32});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* r = bytes.data() + i * record;
    const int label = r[label_bytes - 1];
    if (label >= d.class_count) {
      throw IoError("cifar " + split + ": label " + std::to_string(label) + " out of range at byte offset " +
                    std::to_string(i * record + label_bytes - 1));
    }
    d.labels[i] = label;
    float* dst = d.images.data() + i * kCifarPixels;
    for (std::size_t k = 0; k < kCifarPixels; ++k) dst[k] = static_cast<float>(r[label_bytes + k]) / 255.0f;
  }
  d.digest = crc32_hex(bytes);
  return d;
}

std::pair<Dataset, Dataset> load_cifar(const std::filesystem::path& dir, CifarVariant variant) {
  std::vector<std::filesystem::path> train_files, test_files;
  if (variant == CifarVariant::c10) {
    for (int i = 1; i <= 5; ++i) train_files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    test_files.push_back(dir / "test_batch.bin");
  } else {
    train_files.push_back(dir / "train.bin");
    test_files.push_back(dir / "test.bin");
  }
  auto load = [&](const std::vector<std::filesystem::path>& files, const std::string& split) {
    std::vector<std::uint8_t> all;
    for (const auto& f : files) {
      if (!std::filesystem::exists(f)) throw IoError("missing CIFAR file " + f.string());
      auto bytes = read_file(f);
      all.insert(all.end(), bytes.begin(), bytes.end());
    }
    return parse_cifar(all, variant, split);
  };
  return {load(train_files, "train"), load(test_files, "test")};
}

Difficulty parse_difficulty(const std::string& text) {
  if (text == "easy") return Difficulty::easy;
  if (text == "medium") return Difficulty::medium;
  if (text == "hard") return Difficulty::hard;
  throw ConfigError("difficulty must be easy|medium|hard, got '" + text + "'");
}

Dataset synthetic_dataset(std::uint64_t seed, int classes, int n, Difficulty difficulty, const std::string& split,
                          int image_size) {
  if (classes < 1) throw ConfigError("synthetic_dataset: classes must be positive");
  if (n < classes) throw ConfigError("synthetic_dataset: need n >= classes");
  if (image_size < 4) throw ConfigError("synthetic_dataset: image_size must be at least 4");

  double colour = 0.2, pattern = 0.15, noise = 0.1;
  if (difficulty == Difficulty::medium) {
    colour = 0.1, pattern = 0.08, noise = 0.2;
  } else if (difficulty == Difficulty::hard) {
    colour = 0.04, pattern = 0.04, noise = 0.3;
  }

  constexpr int kGrid = 4;
  std::mt19937_64 proto_rng(mix_seed(seed, fnv1a("prototypes")));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<double> colours(static_cast<std::size_t>(classes) * 3);
  std::vector<double> grids(static_cast<std::size_t>(classes) * 3 * kGrid * kGrid);
  for (auto& v : colours) v = unit(proto_rng);
  for (auto& v : grids) v = unit(proto_rng);

  Dataset d;
  d.split = split;
  d.class_count = classes;
  const Index s = image_size;
  d.images = Tensor<float>(Shape{n, 3, s, s});
  d.labels.resize(static_cast<std::size_t>(n));
  std::mt19937_64 rng(mix_seed(seed, fnv1a(split)));
  std::normal_distribution<double> gauss(0.0, noise);
  for (int i = 0; i < n; ++i) {
    const int y = i % classes;
    d.labels[static_cast<std::size_t>(i)] = y;
    for (Index c = 0; c < 3; ++c) {
      const double base = 0.5 + colour * colours[static_cast<std::size_t>(y * 3 + c)];
      for (Index h = 0; h < s; ++h) {
        for (Index w = 0; w < s; ++w) {
          const Index gy = h * kGrid / s, gx = w * kGrid / s;
          const double p = grids[static_cast<std::size_t>(((y * 3 + c) * kGrid + gy) * kGrid + gx)];
          const double v = base + pattern * p + gauss(rng);
          d.images.at(i, c, h, w) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }

  std::vector<std::uint8_t> bytes;
  bytes.reserve(static_cast<std::size_t>(d.images.size()) * 4 + d.labels.size() * 4);
  for (Index k = 0; k < d.images.size(); ++k) {
    std::uint32_t u;
    std::memcpy(&u, d.images.data() + k, 4);
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<std::uint8_t>(u >> (8 * b)));
  }
  for (int y : d.labels) {
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<std::uint8_t>(static_cast<std::uint32_t>(y) >> (8 * b)));
  }
  d.digest = crc32_hex(bytes);
  return d;
}

}  // namespace ror
