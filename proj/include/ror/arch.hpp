#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ror/tensor.hpp"

namespace ror {

enum class Family { cifar, imagenet };
enum class BlockOrder { post_act, pre_act };
enum class BlockSize { b33, b333, bottleneck };
enum class ShortcutType { A, B };
/// How a depth number maps to blocks per group: ResNet counts 6n+2 (B(3,3)) or 9n+2 (B(3,3,3));
/// WRN-d-k names count 6n+4.
enum class DepthNaming { resnet, wrn };

/// User-facing architecture description. Serialized as flat key=value text.
struct ArchConfig {
  Family family = Family::cifar;
  std::optional<int> depth;
  std::vector<int> blocks_per_group;
  DepthNaming naming = DepthNaming::resnet;
  int width_k = 1;
  int levels_m = 1;
  BlockOrder block_order = BlockOrder::post_act;
  std::optional<BlockSize> block_size;      // default: b33 (bottleneck for ImageNet depth >= 50)
  std::optional<ShortcutType> final_shortcut;  // default: B below 100 classes, A otherwise (cifar)
  ShortcutType upper_shortcut = ShortcutType::B;
  int num_classes = 10;
  std::optional<double> sd_p_L;
  int input_size = 0;  // 0: 32 for cifar, 224 for imagenet

  bool operator==(const ArchConfig&) const = default;
};

/// Parses `key=value` lines ('#' comments allowed). Unknown keys are rejected.
ArchConfig parse_arch_config(std::string_view text);
std::string to_text(const ArchConfig& config);

/// Applies one key=value pair; returns false if the key is not an ArchConfig key.
bool set_arch_field(ArchConfig& config, std::string_view key, std::string_view value);

std::string to_string(Family v);
std::string to_string(BlockOrder v);
std::string to_string(BlockSize v);
std::string to_string(ShortcutType v);
std::string to_string(DepthNaming v);

struct ProjectionSpec {
  ShortcutType type = ShortcutType::B;
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;

  /// Type A with unchanged dimensions degenerates to the identity.
  bool is_identity() const { return type == ShortcutType::A && in_channels == out_channels && stride == 1; }
  Index parameter_count() const {
    return type == ShortcutType::B ? static_cast<Index>(in_channels) * out_channels : 0;
  }
};

struct GroupPlan {
  int width = 0;         // residual-branch width
  int out_channels = 0;  // width * expansion
  int blocks = 0;
  int stride = 1;
  int first_block = 0;
};

struct BlockPlan {
  int group = 0;
  int index_in_group = 0;
  int index = 0;  // global, 0-based
  int in_channels = 0;
  int mid_channels = 0;
  int out_channels = 0;
  int stride = 1;
  std::optional<ProjectionSpec> shortcut;  // empty: identity h(x)
};

/// A shortcut above the final level: adds g(input of `source_block`) into the addition of
/// `destination_block`. Level 1 is the root, level 2 spans one group, deeper levels split
/// their parent span into three equal parts.
struct LevelShortcut {
  int level = 1;
  int source_block = 0;
  int destination_block = 0;
  ProjectionSpec projection;
  std::string name;
};

struct ResolvedPlan {
  ArchConfig config;
  BlockSize block_size = BlockSize::b33;
  ShortcutType final_shortcut = ShortcutType::B;
  int input_size = 32;
  int stem_channels = 16;
  std::vector<GroupPlan> groups;
  std::vector<BlockPlan> blocks;
  std::vector<LevelShortcut> level_shortcuts;

  int total_blocks() const { return static_cast<int>(blocks.size()); }
  int head_channels() const { return groups.back().out_channels; }
};

/// Deterministic elaboration of a config; throws ConfigError with a descriptive message.
ResolvedPlan resolve_config(const ArchConfig& config);

/// Human-readable multi-line summary of groups, blocks, and shortcut levels.
std::string describe(const ResolvedPlan& plan);

}  // namespace ror
