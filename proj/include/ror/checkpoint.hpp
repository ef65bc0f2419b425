#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "ror/error.hpp"
#include "ror/model.hpp"

namespace ror {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> bytes;  // little-endian element data

  std::uint64_t numel() const;
};

/// Layout: magic "RORCKPT\0", u32 version, u32 length + architecture text, u32 record count,
/// records sorted by name (u32 name length, name, u8 dtype, u8 rank, u64 dims..., data),
/// then a u32 CRC-32 over everything before it. All integers little-endian.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::string arch_config;
  std::vector<TensorRecord> records;

  const TensorRecord* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);

/// Verifies the checksum before parsing anything.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

namespace detail {

template <typename Scalar>
TensorRecord make_record(const std::string& name, const Tensor<Scalar>& t) {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  TensorRecord r;
  r.name = name;
  r.dtype = std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
  for (Index d : t.shape().dims()) r.shape.push_back(static_cast<std::uint64_t>(d));
  r.bytes.resize(static_cast<std::size_t>(t.size()) * sizeof(Scalar));
  std::memcpy(r.bytes.data(), t.data(), r.bytes.size());
  return r;
}

template <typename Scalar>
Tensor<Scalar> read_record(const TensorRecord& r, const Shape& expected) {
  std::vector<Index> dims(r.shape.begin(), r.shape.end());
  if (dims != expected.dims()) {
    std::string got = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) got += (i ? "," : "") + std::to_string(dims[i]);
    throw IoError("checkpoint tensor " + r.name + " has shape " + got + "], model expects " + expected.str());
  }
  Tensor<Scalar> t(expected);
  const auto n = static_cast<std::size_t>(t.size());
  if (r.dtype == DType::f32) {
    std::vector<float> tmp(n);
    std::memcpy(tmp.data(), r.bytes.data(), n * sizeof(float));
    for (std::size_t i = 0; i < n; ++i) t[static_cast<Index>(i)] = static_cast<Scalar>(tmp[i]);
  } else {
    std::vector<double> tmp(n);
    std::memcpy(tmp.data(), r.bytes.data(), n * sizeof(double));
    for (std::size_t i = 0; i < n; ++i) t[static_cast<Index>(i)] = static_cast<Scalar>(tmp[i]);
  }
  return t;
}

}  // namespace detail

/// Every parameter plus BN running statistics ("<bn>.running_mean", "<bn>.running_var").
template <typename Scalar>
Checkpoint to_checkpoint(const Model<Scalar>& model) {
  Checkpoint c;
  c.arch_config = to_text(model.graph.plan.config);
  for (const auto& [name, p] : model.params) c.records.push_back(detail::make_record(name, p.value()));
  for (const auto& [name, bn] : model.batch_norms) {
    c.records.push_back(detail::make_record(bn.gamma.name, bn.gamma.value()));
    c.records.push_back(detail::make_record(bn.beta.name, bn.beta.value()));
    c.records.push_back(detail::make_record(name + ".running_mean", bn.running_mean));
    c.records.push_back(detail::make_record(name + ".running_var", bn.running_var));
  }
  return c;
}

template <typename Scalar>
std::set<std::string> state_names(const Model<Scalar>& model) {
  std::set<std::string> names;
  for (const auto& [name, p] : model.params) names.insert(name);
  for (const auto& [name, bn] : model.batch_norms) {
    names.insert(bn.gamma.name);
    names.insert(bn.beta.name);
    names.insert(name + ".running_mean");
    names.insert(name + ".running_var");
  }
  return names;
}

/// Loads tensor values into `model`. Name sets must match exactly; the error lists
/// every missing and unexpected name. Values are converted to the model's scalar type.
template <typename Scalar>
void restore(Model<Scalar>& model, const Checkpoint& ckpt) {
  const std::set<std::string> expected = state_names(model);
  std::set<std::string> present;
  for (const auto& r : ckpt.records) present.insert(r.name);
  if (expected != present) {
    std::string msg = "checkpoint tensor names do not match the model;";
    for (const auto& n : expected) {
      if (!present.count(n)) msg += " missing " + n + ";";
    }
    for (const auto& n : present) {
      if (!expected.count(n)) msg += " unexpected " + n + ";";
    }
    msg.pop_back();
    throw TensorNameError(msg);
  }
  // Read everything first so a shape error leaves the model untouched.
  std::map<std::string, Tensor<Scalar>> staged;
  for (const auto& [name, p] : model.params) staged.emplace(name, detail::read_record<Scalar>(*ckpt.find(name), p.value().shape()));
  for (const auto& [name, bn] : model.batch_norms) {
    const Shape s{static_cast<Index>(bn.channels())};
    for (const std::string& key : {bn.gamma.name, bn.beta.name, name + ".running_mean", name + ".running_var"}) {
      staged.emplace(key, detail::read_record<Scalar>(*ckpt.find(key), s));
    }
  }
  for (auto& [name, p] : model.params) p.mutable_value() = staged.at(name);
  for (auto& [name, bn] : model.batch_norms) {
    bn.gamma.mutable_value() = staged.at(bn.gamma.name);
    bn.beta.mutable_value() = staged.at(bn.beta.name);
    bn.running_mean = staged.at(name + ".running_mean");
    bn.running_var = staged.at(name + ".running_var");
  }
}

/// Rebuilds the architecture stored in the checkpoint and restores its state.
template <typename Scalar>
Model<Scalar> load_model(const Checkpoint& ckpt) {
  Model<Scalar> model = build<Scalar>(parse_arch_config(ckpt.arch_config), 0);
  restore(model, ckpt);
  return model;
}

}  // namespace ror
