#include "ror/train.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace ror {

void TrainConfig::validate() const {
  if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
  if (!(lr_factor > 0)) throw ConfigError("lr_factor must be positive");
  if (momentum < 0) throw ConfigError("momentum must be non-negative");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] <= 0 || milestones[i] >= max_epochs) {
      throw ConfigError("milestone " + std::to_string(milestones[i]) + " must lie in (0, max_epochs=" +
                        std::to_string(max_epochs) + ")");
    }
    if (i > 0 && milestones[i] <= milestones[i - 1]) throw ConfigError("milestones must be strictly increasing");
  }
  if (sd_p_L && !(*sd_p_L > 0.0 && *sd_p_L <= 1.0)) throw ConfigError("sd.p_L must lie in (0, 1]");
}

TrainConfig cifar_protocol() { return TrainConfig{}; }

TrainConfig svhn_protocol() {
  TrainConfig c;
  c.max_epochs = 50;
  c.milestones = {30, 35};
  return c;
}

double lr_at(const TrainConfig& config, int epoch) {
  int passed = 0;
  for (int m : config.milestones) {
    if (epoch >= m) ++passed;
  }
  return config.base_lr * std::pow(config.lr_factor, passed);
}

namespace {

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError(key + ": expected a number, got '" + value + "'");
  }
}

long long parse_integer(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError(key + ": expected an integer, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(key + ": expected true|false, got '" + value + "'");
}

std::string real_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void set_train_field(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "base_lr") {
    c.base_lr = parse_real(key, value);
  } else if (key == "milestones") {
    c.milestones.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) c.milestones.push_back(static_cast<int>(parse_integer(key, item)));
    }
  } else if (key == "lr_factor") {
    c.lr_factor = parse_real(key, value);
  } else if (key == "momentum") {
    c.momentum = parse_real(key, value);
  } else if (key == "weight_decay") {
    c.weight_decay = parse_real(key, value);
  } else if (key == "batch_size") {
    c.batch_size = static_cast<int>(parse_integer(key, value));
  } else if (key == "max_epochs") {
    c.max_epochs = static_cast<int>(parse_integer(key, value));
  } else if (key == "pad_crop") {
    c.augmentation.pad_crop = parse_bool(key, value);
  } else if (key == "hflip") {
    c.augmentation.hflip = parse_bool(key, value);
  } else if (key == "sd.p_L") {
    if (value == "none") {
      c.sd_p_L.reset();
    } else {
      c.sd_p_L = parse_real(key, value);
    }
  } else if (key == "seed") {
    c.seed = static_cast<std::uint64_t>(parse_integer(key, value));
  } else {
    throw ConfigError("unknown training key '" + key + "'");
  }
}

std::string to_text(const TrainConfig& c) {
  std::ostringstream os;
  os << "base_lr=" << real_text(c.base_lr) << "\n";
  os << "milestones=";
  for (std::size_t i = 0; i < c.milestones.size(); ++i) os << (i ? "," : "") << c.milestones[i];
  os << "\n";
  os << "lr_factor=" << real_text(c.lr_factor) << "\n";
  os << "momentum=" << real_text(c.momentum) << "\n";
  os << "weight_decay=" << real_text(c.weight_decay) << "\n";
  os << "batch_size=" << c.batch_size << "\n";
  os << "max_epochs=" << c.max_epochs << "\n";
  os << "pad_crop=" << (c.augmentation.pad_crop ? "true" : "false") << "\n";
  os << "hflip=" << (c.augmentation.hflip ? "true" : "false") << "\n";
  if (c.sd_p_L) os << "sd.p_L=" << real_text(*c.sd_p_L) << "\n";
  os << "seed=" << c.seed << "\n";
  return os.str();
}

CropFlip sample_crop_flip(std::mt19937_64& rng, const Augmentation& aug) {
  CropFlip cf;
  if (aug.pad_crop) {
    std::uniform_int_distribution<int> offset(0, 2 * kCropPad);
    cf.dy = offset(rng);
    cf.dx = offset(rng);
  }
  if (aug.hflip) cf.flip = std::bernoulli_distribution(0.5)(rng);
  return cf;
}

void augment_into(const float* src, float* dst, int channels, int size, const CropFlip& cf) {
  if (cf.dy < 0 || cf.dy > 2 * kCropPad || cf.dx < 0 || cf.dx > 2 * kCropPad) {
    throw ConfigError("augment: crop offset out of range");
  }
  for (int c = 0; c < channels; ++c) {
    const float* plane = src + static_cast<std::ptrdiff_t>(c) * size * size;
    float* out = dst + static_cast<std::ptrdiff_t>(c) * size * size;
    for (int h = 0; h < size; ++h) {
      const int sh = h + cf.dy - kCropPad;
      for (int w = 0; w < size; ++w) {
        const int ow = cf.flip ? size - 1 - w : w;
        const int sw = w + cf.dx - kCropPad;
        const bool inside = sh >= 0 && sh < size && sw >= 0 && sw < size;
        out[h * size + ow] = inside ? plane[sh * size + sw] : 0.0f;
      }
    }
  }
}

Tensor<float> augment(const Tensor<float>& image, const CropFlip& cf) {
  const Shape& s = image.shape();
  const std::size_t r = s.rank();
  if ((r != 3 && r != 4) || (r == 4 && s[0] != 1) || s[r - 1] != s[r - 2]) {
    throw ConfigError("augment: expected one square image, got " + s.str());
  }
  Tensor<float> out(s);
  augment_into(image.data(), out.data(), static_cast<int>(s[r - 3]), static_cast<int>(s[r - 1]), cf);
  return out;
}

Tensor<float> augment(const Tensor<float>& image, std::mt19937_64& rng, const Augmentation& aug) {
  return augment(image, sample_crop_flip(rng, aug));
}

ChannelStats channel_stats(const Dataset& data) {
  data.validate();
  const Index n = data.images.dim(0), c = data.images.dim(1);
  const Index plane = data.images.dim(2) * data.images.dim(3);
  ChannelStats stats;
  stats.source_split = data.split;
  for (Index ch = 0; ch < c; ++ch) {
    double sum = 0;
    for (Index i = 0; i < n; ++i) {
      const float* p = data.images.data() + (i * c + ch) * plane;
      for (Index k = 0; k < plane; ++k) sum += p[k];
    }
    const double count = static_cast<double>(n * plane);
    const double mean = sum / count;
    double sq = 0;
    for (Index i = 0; i < n; ++i) {
      const float* p = data.images.data() + (i * c + ch) * plane;
      for (Index k = 0; k < plane; ++k) sq += (p[k] - mean) * (p[k] - mean);
    }
    const double sd = std::sqrt(sq / count);
    if (!(sd > 0)) throw ConfigError("channel " + std::to_string(ch) + " of split '" + data.split + "' has zero std");
    stats.mean.push_back(mean);
    stats.std.push_back(sd);
  }
  return stats;
}

void apply_normalization(Dataset& data, const ChannelStats& stats) {
  const Index n = data.images.dim(0), c = data.images.dim(1);
  const Index plane = data.images.dim(2) * data.images.dim(3);
  if (static_cast<Index>(stats.mean.size()) != c || static_cast<Index>(stats.std.size()) != c) {
    throw ConfigError("normalization stats have " + std::to_string(stats.mean.size()) + " channels, data has " +
                      std::to_string(c));
  }
  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) {
      float* p = data.images.data() + (i * c + ch) * plane;
      const double m = stats.mean[static_cast<std::size_t>(ch)], s = stats.std[static_cast<std::size_t>(ch)];
      for (Index k = 0; k < plane; ++k) p[k] = static_cast<float>((p[k] - m) / s);
    }
  }
}

ChannelStats normalize_dataset(Dataset& train, Dataset& test) {
  ChannelStats stats = channel_stats(train);
  apply_normalization(train, stats);
  apply_normalization(test, stats);
  return stats;
}

bool MetricsRow::same_numbers(const MetricsRow& o) const {
  return epoch == o.epoch && train_loss == o.train_loss && train_err == o.train_err && test_err == o.test_err &&
         lr == o.lr && gate_seed == o.gate_seed;
}

void MetricsLog::append(const MetricsRow& row) {
  const int expected = rows.empty() ? 0 : rows.back().epoch + 1;
  if (row.epoch != expected) {
    throw ConfigError("metrics row for epoch " + std::to_string(row.epoch) + " out of order (expected " +
                      std::to_string(expected) + ")");
  }
  rows.push_back(row);
}

std::string MetricsLog::csv() const {
  std::ostringstream os;
  os << "epoch,train_loss,train_err,test_err,lr,wall_seconds,gate_seed\n";
  for (const MetricsRow& r : rows) {
    os << r.epoch << ',' << real_text(r.train_loss) << ',' << real_text(r.train_err) << ','
       << real_text(r.test_err) << ',' << real_text(r.lr) << ',' << real_text(r.wall_seconds) << ',';
    if (r.gate_seed) os << *r.gate_seed;
    os << '\n';
  }
  return os.str();
}

MetricsLog MetricsLog::parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "epoch,train_loss,train_err,test_err,lr,wall_seconds,gate_seed") {
    throw IoError("metrics CSV: unexpected header '" + line + "'");
  }
  MetricsLog log;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 7) throw IoError("metrics CSV line " + std::to_string(line_no) + ": expected 7 fields");
    try {
      MetricsRow r;
      r.epoch = std::stoi(cells[0]);
      r.train_loss = std::stod(cells[1]);
      r.train_err = std::stod(cells[2]);
      r.test_err = std::stod(cells[3]);
      r.lr = std::stod(cells[4]);
      r.wall_seconds = std::stod(cells[5]);
      if (!cells[6].empty()) r.gate_seed = std::stoull(cells[6]);
      log.append(r);
    } catch (const std::logic_error&) {
      throw IoError("metrics CSV line " + std::to_string(line_no) + ": malformed number");
    }
  }
  return log;
}

std::uint64_t epoch_gate_seed(std::uint64_t seed, int epoch) {
  return mix_seed(mix_seed(seed, fnv1a("gates")), static_cast<std::uint64_t>(epoch));
}

Tensor<float> gather_batch(const Dataset& data, std::span<const Index> indices) {
  const Shape& s = data.images.shape();
  const Index per = s[1] * s[2] * s[3];
  Tensor<float> out(Shape{static_cast<Index>(indices.size()), s[1], s[2], s[3]});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.values().segment(static_cast<Index>(i) * per, per) = data.images.values().segment(indices[i] * per, per);
  }
  return out;
}

namespace detail {
void rethrow_numeric(const NumericError& e, int epoch, int batch) {
  const std::string where = batch < 0 ? "evaluation" : "batch " + std::to_string(batch);
  throw NumericError("non-finite value at epoch " + std::to_string(epoch) + ", " + where + ": " + e.what());
}
}  // namespace detail

}  // namespace ror
