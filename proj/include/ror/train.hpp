#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ror/checkpoint.hpp"
#include "ror/data.hpp"
#include "ror/model.hpp"

namespace ror {

struct Augmentation {
  bool pad_crop = true;
  bool hflip = true;
};

struct TrainConfig {
  double base_lr = 0.1;
  std::vector<int> milestones{250, 375};
  double lr_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 128;
  int max_epochs = 500;
  Augmentation augmentation;
  std::optional<double> sd_p_L;
  std::uint64_t seed = 0;

  void validate() const;
};

/// 500 epochs, lr /10 after epochs 250 and 375.
TrainConfig cifar_protocol();
/// 50 epochs, lr /10 after epochs 30 and 35.
TrainConfig svhn_protocol();

/// base_lr * lr_factor^(number of milestones <= epoch).
double lr_at(const TrainConfig& config, int epoch);

/// Sets one TrainConfig field from its key (base_lr, milestones, lr_factor, momentum,
/// weight_decay, batch_size, max_epochs, pad_crop, hflip, sd.p_L, seed).
void set_train_field(TrainConfig& config, const std::string& key, const std::string& value);
std::string to_text(const TrainConfig& config);

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Nesterov SGD, dampening 0, weight decay folded into the gradient:
/// v <- mu*v + (g + lambda*w);  w <- w - lr*(g + lambda*w + mu*v).
template <typename Scalar>
void sgd_step(std::span<Parameter<Scalar>* const> params, double lr, const SgdOptions& options) {
  for (Parameter<Scalar>* p : params) {
    if (!p->grad()) throw ConfigError("sgd_step: parameter " + p->name + " has no gradient");
  }
  const auto mu = static_cast<Scalar>(options.momentum);
  const auto lambda = static_cast<Scalar>(options.weight_decay);
  const auto rate = static_cast<Scalar>(lr);
  for (Parameter<Scalar>* p : params) {
    auto& w = p->mutable_value().values();
    const typename Tensor<Scalar>::Values d = p->grad()->values() + lambda * w;
    if (!p->momentum_buffer) p->momentum_buffer = Tensor<Scalar>::zeros(p->value().shape());
    auto& v = p->momentum_buffer->values();
    v = mu * v + d;
    w -= rate * (d + mu * v);
  }
}

template <typename Scalar>
void sgd_step(std::vector<Parameter<Scalar>*> params, double lr, const SgdOptions& options) {
  sgd_step<Scalar>(std::span<Parameter<Scalar>* const>(params), lr, options);
}

/// Crop offset into the 4-padded image (0..8 each; 4,4 reproduces the input) and flip flag.
struct CropFlip {
  int dy = 4;
  int dx = 4;
  bool flip = false;
};

inline constexpr int kCropPad = 4;

CropFlip sample_crop_flip(std::mt19937_64& rng, const Augmentation& aug);

/// Applies one crop/flip to a C x S x S image stored contiguously.
void augment_into(const float* src, float* dst, int channels, int size, const CropFlip& cf);

/// Single image (3 x S x S or 1 x 3 x S x S).
Tensor<float> augment(const Tensor<float>& image, const CropFlip& cf);
Tensor<float> augment(const Tensor<float>& image, std::mt19937_64& rng, const Augmentation& aug = {});

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::string source_split;
};

ChannelStats channel_stats(const Dataset& data);
void apply_normalization(Dataset& data, const ChannelStats& stats);

/// Per-channel mean/std over `train` only, applied to both splits.
ChannelStats normalize_dataset(Dataset& train, Dataset& test);

struct MetricsRow {
  int epoch = 0;
  double train_loss = 0;
  double train_err = 0;
  double test_err = 0;
  double lr = 0;
  double wall_seconds = 0;
  std::optional<std::uint64_t> gate_seed;  // empty when stochastic depth is off

  bool same_numbers(const MetricsRow& o) const;
};

struct MetricsLog {
  std::vector<MetricsRow> rows;

  void append(const MetricsRow& row);
  std::string csv() const;
  static MetricsLog parse_csv(const std::string& text);
};

/// Seed of the gate stream for one epoch; batch b uses mix_seed(epoch_gate_seed, b).
std::uint64_t epoch_gate_seed(std::uint64_t seed, int epoch);

/// Copies samples `indices` into a batch tensor.
Tensor<float> gather_batch(const Dataset& data, std::span<const Index> indices);

template <typename Scalar>
Tensor<Scalar> to_scalar(const Tensor<float>& t) {
  if constexpr (std::is_same_v<Scalar, float>) {
    return t;
  } else {
    return t.cast<Scalar>();
  }
}

template <typename Scalar>
int count_errors(const Tensor<Scalar>& logits, std::span<const int> labels) {
  const Index n = logits.dim(0), k = logits.dim(1);
  int errors = 0;
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    for (Index j = 1; j < k; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    if (best != labels[static_cast<std::size_t>(i)]) ++errors;
  }
  return errors;
}

/// Top-1 error (%) in eval mode with running BN statistics. With a survival probability,
/// residual branches are scaled by p_l. Never touches model state.
template <typename Scalar>
double evaluate(Model<Scalar>& model, const Dataset& data, std::optional<double> sd_p_L = std::nullopt,
                int batch_size = 250) {
  data.validate();
  NoGradGuard guard;
  std::optional<SurvivalSchedule> schedule;
  if (!sd_p_L) sd_p_L = model.graph.plan.config.sd_p_L;
  if (sd_p_L) schedule = survival_schedule(model.graph.plan.total_blocks(), *sd_p_L);
  ForwardOptions opts;
  opts.mode = Mode::eval;
  opts.schedule = schedule ? &*schedule : nullptr;
  std::vector<Index> idx(static_cast<std::size_t>(data.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  long errors = 0;
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
    std::span<const Index> batch(idx.data() + start, end - start);
    const Var<Scalar> logits = forward(model, to_scalar<Scalar>(gather_batch(data, batch)), opts);
    errors += count_errors(logits.value(), std::span<const int>(data.labels.data() + start, end - start));
  }
  return 100.0 * static_cast<double>(errors) / static_cast<double>(data.size());
}

struct TrainHooks {
  std::optional<std::filesystem::path> checkpoint_dir;  // epoch<N>.ckpt at milestones, final.ckpt at the end
  std::function<void(const MetricsRow&)> on_epoch;
};

namespace detail {
// batch < 0: the per-epoch evaluation.
[[noreturn]] void rethrow_numeric(const NumericError& e, int epoch, int batch);
}

/// Mini-batch SGD over `train` for config.max_epochs epochs, evaluating on `test` after each.
template <typename Scalar>
MetricsLog train(Model<Scalar>& model, const Dataset& train_set, const Dataset& test_set, const TrainConfig& config,
                 const TrainHooks& hooks = {}) {
  config.validate();
  train_set.validate();
  test_set.validate();
  const int classes = model.graph.node(model.graph.output).channels;
  if (train_set.class_count > classes || test_set.class_count > classes) {
    throw ConfigError("train: dataset has " + std::to_string(train_set.class_count) + " classes, model outputs " +
                      std::to_string(classes));
  }
  const std::optional<double> p_L = config.sd_p_L ? config.sd_p_L : model.graph.plan.config.sd_p_L;
  std::optional<SurvivalSchedule> schedule;
  if (p_L) schedule = survival_schedule(model.graph.plan.total_blocks(), *p_L);

  std::mt19937_64 shuffle_rng(mix_seed(config.seed, fnv1a("shuffle")));
  std::mt19937_64 augment_rng(mix_seed(config.seed, fnv1a("augment")));
  const SgdOptions sgd{config.momentum, config.weight_decay};
  std::vector<Parameter<Scalar>*> params = model.parameters();
  std::vector<Index> order(static_cast<std::size_t>(train_set.size()));
  std::iota(order.begin(), order.end(), Index{0});
  const int size = static_cast<int>(train_set.images.dim(2));
  const int channels = static_cast<int>(train_set.images.dim(1));
  const Index per_image = train_set.images.size() / train_set.size();

  MetricsLog log;
  const auto start = std::chrono::steady_clock::now();
  std::vector<Parameter<Scalar>*> active;
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = lr_at(config, epoch);
    const std::uint64_t gate_seed = epoch_gate_seed(config.seed, epoch);
    double loss_sum = 0;
    long errors = 0;
    int batch_index = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(config.batch_size), ++batch_index) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(config.batch_size));
      std::span<const Index> batch(order.data() + b0, b1 - b0);
      Tensor<float> x = gather_batch(train_set, batch);
      std::vector<int> y(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        y[i] = train_set.labels[static_cast<std::size_t>(batch[i])];
        const CropFlip cf = sample_crop_flip(augment_rng, config.augmentation);
        const Tensor<float> src(Shape{per_image}, x.values().segment(static_cast<Index>(i) * per_image, per_image));
        augment_into(src.data(), x.data() + static_cast<Index>(i) * per_image, channels, size, cf);
      }
      std::optional<GateVector> gates;
      if (schedule) gates = sample_gates(*schedule, mix_seed(gate_seed, static_cast<std::uint64_t>(batch_index)));
      ForwardOptions opts;
      opts.mode = Mode::train;
      opts.gates = gates ? &*gates : nullptr;
      try {
        model.zero_grad();
        const Var<Scalar> logits = forward(model, to_scalar<Scalar>(x), opts);
        const Var<Scalar> loss = softmax_cross_entropy(logits, std::span<const int>(y));
        backward(loss);
        // Parameters of dropped blocks took no part in this batch and are left as they are.
        active.clear();
        for (Parameter<Scalar>* p : params) {
          if (!gates || p->grad()) active.push_back(p);
        }
        sgd_step<Scalar>(std::span<Parameter<Scalar>* const>(active), lr, sgd);
        for (Parameter<Scalar>* p : params) {
          if (!p->value().all_finite()) throw NumericError("parameter " + p->name + " became non-finite");
        }
        loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(batch.size());
        errors += count_errors(logits.value(), std::span<const int>(y));
      } catch (const NumericError& e) {
        detail::rethrow_numeric(e, epoch, batch_index);
      }
    }
    MetricsRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(order.size());
    row.train_err = 100.0 * static_cast<double>(errors) / static_cast<double>(order.size());
    try {
      row.test_err = evaluate(model, test_set, p_L);
    } catch (const NumericError& e) {
      detail::rethrow_numeric(e, epoch, -1);
    }
    row.lr = lr;
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (schedule) row.gate_seed = gate_seed;
    log.append(row);
    if (hooks.on_epoch) hooks.on_epoch(row);
    if (hooks.checkpoint_dir) {
      const bool milestone =
          std::find(config.milestones.begin(), config.milestones.end(), epoch + 1) != config.milestones.end();
      if (milestone) {
        save_checkpoint(*hooks.checkpoint_dir / ("epoch" + std::to_string(epoch + 1) + ".ckpt"), to_checkpoint(model));
      }
      if (epoch + 1 == config.max_epochs) save_checkpoint(*hooks.checkpoint_dir / "final.ckpt", to_checkpoint(model));
    }
  }
  return log;
}

}  // namespace ror
