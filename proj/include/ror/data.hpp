#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ror/tensor.hpp"

namespace ror {

/// Images N x 3 x S x S scaled to [0, 1] (before normalization) with integer labels.
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  int class_count = 0;
  std::string split;
  std::string digest;  // CRC-32 (hex) of the source bytes

  Index size() const { return static_cast<Index>(labels.size()); }
  void validate() const;
};

enum class CifarVariant { c10, c100 };

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;

/// Parses concatenated CIFAR binary records: c10 = label byte + 3072 pixel bytes,
/// c100 = coarse byte + fine byte + 3072 pixel bytes (fine label kept).
Dataset parse_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant, const std::string& split);

/// Loads data_batch_{1..5}.bin + test_batch.bin (c10) or train.bin + test.bin (c100) from `dir`.
std::pair<Dataset, Dataset> load_cifar(const std::filesystem::path& dir, CifarVariant variant);

enum class Difficulty { easy, medium, hard };

Difficulty parse_difficulty(const std::string& text);

/// Class-conditional Gaussian images around per-class prototypes (a colour offset plus a
/// coarse 4x4 spatial pattern). Prototypes depend only on `seed`, so splits generated with
/// different `split` names share classes. Labels are assigned round-robin.
Dataset synthetic_dataset(std::uint64_t seed, int classes, int n, Difficulty difficulty,
                          const std::string& split = "train", int image_size = 32);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::string crc32_hex(std::span<const std::uint8_t> bytes);

}  // namespace ror
