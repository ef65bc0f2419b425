#include "ror/arch.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "ror/error.hpp"

namespace ror {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int parse_int(std::string_view key, std::string_view v) {
  int out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("config field '" + std::string(key) + "': expected an integer, got '" + std::string(v) + "'");
  }
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  try {
    std::size_t used = 0;
    const std::string s(v);
    const double out = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config field '" + std::string(key) + "': expected a number, got '" + std::string(v) + "'");
  }
}

template <typename Enum>
Enum parse_enum(std::string_view key, std::string_view v,
                std::initializer_list<std::pair<std::string_view, Enum>> options) {
  std::string allowed;
  for (const auto& [name, value] : options) {
    if (name == v) return value;
    allowed += (allowed.empty() ? "" : "|") + std::string(name);
  }
  throw ConfigError("config field '" + std::string(key) + "': expected " + allowed + ", got '" + std::string(v) + "'");
}

ShortcutType parse_shortcut(std::string_view key, std::string_view v) {
  return parse_enum<ShortcutType>(key, v, {{"A", ShortcutType::A}, {"B", ShortcutType::B}});
}

}  // namespace

std::string to_string(Family v) { return v == Family::cifar ? "cifar" : "imagenet"; }
std::string to_string(BlockOrder v) { return v == BlockOrder::post_act ? "post_act" : "pre_act"; }
std::string to_string(BlockSize v) {
  switch (v) {
    case BlockSize::b33: return "b33";
    case BlockSize::b333: return "b333";
    case BlockSize::bottleneck: return "bottleneck";
  }
  return "?";
}
std::string to_string(ShortcutType v) { return v == ShortcutType::A ? "A" : "B"; }
std::string to_string(DepthNaming v) { return v == DepthNaming::resnet ? "resnet" : "wrn"; }

bool set_arch_field(ArchConfig& c, std::string_view key, std::string_view value) {
  if (key == "family") {
    c.family = parse_enum<Family>(key, value, {{"cifar", Family::cifar}, {"imagenet", Family::imagenet}});
  } else if (key == "depth") {
    c.depth = parse_int(key, value);
  } else if (key == "blocks_per_group") {
    c.blocks_per_group.clear();
    std::string_view rest = value;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      c.blocks_per_group.push_back(parse_int(key, trim(rest.substr(0, comma))));
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
  } else if (key == "naming") {
    c.naming = parse_enum<DepthNaming>(key, value, {{"resnet", DepthNaming::resnet}, {"wrn", DepthNaming::wrn}});
  } else if (key == "width_k") {
    c.width_k = parse_int(key, value);
  } else if (key == "levels_m") {
    c.levels_m = parse_int(key, value);
  } else if (key == "block_order") {
    c.block_order = parse_enum<BlockOrder>(key, value, {{"post_act", BlockOrder::post_act}, {"pre_act", BlockOrder::pre_act}});
  } else if (key == "block_size") {
    c.block_size = parse_enum<BlockSize>(
        key, value, {{"b33", BlockSize::b33}, {"b333", BlockSize::b333}, {"bottleneck", BlockSize::bottleneck}});
  } else if (key == "final_shortcut") {
    c.final_shortcut = parse_shortcut(key, value);
  } else if (key == "upper_shortcut") {
    c.upper_shortcut = parse_shortcut(key, value);
  } else if (key == "num_classes") {
    c.num_classes = parse_int(key, value);
  } else if (key == "sd.p_L") {
    if (value == "none") {
      c.sd_p_L.reset();
    } else {
      c.sd_p_L = parse_double(key, value);
    }
  } else if (key == "input_size") {
    c.input_size = parse_int(key, value);
  } else {
    return false;
  }
  return true;
}

ArchConfig parse_arch_config(std::string_view text) {
  ArchConfig config;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view l = trim(line);
    if (l.empty() || l.front() == '#') continue;
    const auto eq = l.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    const auto key = trim(l.substr(0, eq));
    if (!set_arch_field(config, key, trim(l.substr(eq + 1)))) {
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + std::string(key) + "'");
    }
  }
  return config;
}

std::string to_text(const ArchConfig& c) {
  std::ostringstream os;
  os << "family=" << to_string(c.family) << '\n';
  if (c.depth) os << "depth=" << *c.depth << '\n';
  if (!c.blocks_per_group.empty()) {
    os << "blocks_per_group=";
    for (std::size_t i = 0; i < c.blocks_per_group.size(); ++i) os << (i ? "," : "") << c.blocks_per_group[i];
    os << '\n';
  }
  os << "naming=" << to_string(c.naming) << '\n';
  os << "width_k=" << c.width_k << '\n';
  os << "levels_m=" << c.levels_m << '\n';
  os << "block_order=" << to_string(c.block_order) << '\n';
  if (c.block_size) os << "block_size=" << to_string(*c.block_size) << '\n';
  if (c.final_shortcut) os << "final_shortcut=" << to_string(*c.final_shortcut) << '\n';
  os << "upper_shortcut=" << to_string(c.upper_shortcut) << '\n';
  os << "num_classes=" << c.num_classes << '\n';
  if (c.sd_p_L) {
    std::ostringstream p;
    p.precision(17);
    p << *c.sd_p_L;
    os << "sd.p_L=" << p.str() << '\n';
  }
  if (c.input_size) os << "input_size=" << c.input_size << '\n';
  return os.str();
}

namespace {

std::vector<int> imagenet_groups(int depth, BlockSize& size) {
  switch (depth) {
    case 18: size = BlockSize::b33; return {2, 2, 2, 2};
    case 34: size = BlockSize::b33; return {3, 4, 6, 3};
    case 50: size = BlockSize::bottleneck; return {3, 4, 6, 3};
    case 101: size = BlockSize::bottleneck; return {3, 4, 23, 3};
    case 152: size = BlockSize::bottleneck; return {3, 8, 36, 3};
    default:
      throw ConfigError("imagenet depth must be one of 18, 34, 50, 101, 152, got " + std::to_string(depth));
  }
}

std::vector<int> cifar_groups(const ArchConfig& c, BlockSize size) {
  const int d = *c.depth;
  if (c.naming == DepthNaming::wrn) {
    if (size != BlockSize::b33) throw ConfigError("wrn naming requires block_size=b33");
    if (d < 10 || (d - 4) % 6 != 0) {
      throw ConfigError("depth " + std::to_string(d) + " is not a WRN depth 6n+4 (n=(depth-4)/6 must be integral)");
    }
    const int n = (d - 4) / 6;
    return {n, n, n};
  }
  if (size == BlockSize::b333) {
    if (d < 11 || (d - 2) % 9 != 0) {
      throw ConfigError("depth " + std::to_string(d) + " is not 9n+2 as required for block_size=b333");
    }
    const int n = (d - 2) / 9;
    return {n, n, n};
  }
  if (d < 8 || (d - 2) % 6 != 0) {
    throw ConfigError("depth " + std::to_string(d) + " is not 6n+2 as required for block_size=b33");
  }
  const int n = (d - 2) / 6;
  return {n, n, n};
}

int int_pow(int base, int exp) {
  int r = 1;
  for (int i = 0; i < exp; ++i) r *= base;
  return r;
}

ProjectionSpec span_projection(const ResolvedPlan& plan, int first, int last, ShortcutType type) {
  int stride = 1;
  for (int b = first; b <= last; ++b) stride *= plan.blocks[b].stride;
  return ProjectionSpec{type, plan.blocks[first].in_channels, plan.blocks[last].out_channels, stride};
}

}  // namespace

ResolvedPlan resolve_config(const ArchConfig& c) {
  if (c.width_k < 1) throw ConfigError("width_k must be >= 1");
  if (c.levels_m < 1) throw ConfigError("levels_m must be >= 1");
  if (c.num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (c.input_size < 0) throw ConfigError("input_size must be positive");
  if (c.sd_p_L && !(*c.sd_p_L > 0.0 && *c.sd_p_L <= 1.0)) {
    throw ConfigError("sd.p_L must lie in (0, 1]");
  }
  if (!c.depth && c.blocks_per_group.empty()) throw ConfigError("either depth or blocks_per_group is required");
  for (int n : c.blocks_per_group) {
    if (n < 1) throw ConfigError("blocks_per_group entries must be positive");
  }

  ResolvedPlan plan;
  plan.config = c;
  std::vector<int> sizes = c.blocks_per_group;
  std::vector<int> widths;
  int expansion = 1;

  if (c.family == Family::cifar) {
    plan.block_size = c.block_size.value_or(BlockSize::b33);
    if (plan.block_size == BlockSize::bottleneck) {
      throw ConfigError("block_size=bottleneck is only available for family=imagenet");
    }
    if (sizes.empty()) sizes = cifar_groups(c, plan.block_size);
    plan.stem_channels = 16;
    for (std::size_t g = 0; g < sizes.size(); ++g) widths.push_back((16 << g) * c.width_k);
    plan.final_shortcut = c.final_shortcut.value_or(c.num_classes >= 100 ? ShortcutType::A : ShortcutType::B);
    plan.input_size = c.input_size ? c.input_size : 32;
  } else {
    if (c.sd_p_L) throw ConfigError("stochastic depth is disabled for family=imagenet");
    if (c.naming == DepthNaming::wrn) throw ConfigError("wrn naming applies to family=cifar only");
    BlockSize size = c.block_size.value_or(BlockSize::b33);
    if (sizes.empty()) {
      sizes = imagenet_groups(*c.depth, size);
      if (c.block_size && *c.block_size != size) {
        throw ConfigError("imagenet depth " + std::to_string(*c.depth) + " implies block_size=" + to_string(size));
      }
    }
    if (size == BlockSize::b333) throw ConfigError("block_size=b333 is only available for family=cifar");
    plan.block_size = size;
    plan.stem_channels = 64;
    for (std::size_t g = 0; g < sizes.size(); ++g) widths.push_back((64 << g) * c.width_k);
    if (size == BlockSize::bottleneck) expansion = 4;
    plan.final_shortcut = c.final_shortcut.value_or(ShortcutType::B);
    plan.input_size = c.input_size ? c.input_size : 224;
  }

  if (c.levels_m >= 4) {
    const int parts = int_pow(3, c.levels_m - 3);
    for (std::size_t g = 0; g < sizes.size(); ++g) {
      if (sizes[g] % parts != 0) {
        throw ConfigError("levels_m=" + std::to_string(c.levels_m) + " splits each group into " +
                          std::to_string(parts) + " equal segments, but group " + std::to_string(g + 1) +
                          " has " + std::to_string(sizes[g]) + " blocks");
      }
    }
  }

  int in_channels = plan.stem_channels;
  int index = 0;
  for (std::size_t g = 0; g < sizes.size(); ++g) {
    GroupPlan gp;
    gp.width = widths[g];
    gp.out_channels = widths[g] * expansion;
    gp.blocks = sizes[g];
    gp.stride = g == 0 ? 1 : 2;
    gp.first_block = index;
    plan.groups.push_back(gp);
    for (int b = 0; b < gp.blocks; ++b, ++index) {
      BlockPlan bp;
      bp.group = static_cast<int>(g);
      bp.index_in_group = b;
      bp.index = index;
      bp.in_channels = in_channels;
      bp.mid_channels = gp.width;
      bp.out_channels = gp.out_channels;
      bp.stride = b == 0 ? gp.stride : 1;
      if (bp.in_channels != bp.out_channels || bp.stride != 1) {
        if (plan.final_shortcut == ShortcutType::A && bp.out_channels < bp.in_channels) {
          throw ConfigError("type A shortcut cannot reduce channels");
        }
        bp.shortcut = ProjectionSpec{plan.final_shortcut, bp.in_channels, bp.out_channels, bp.stride};
      }
      plan.blocks.push_back(bp);
      in_channels = bp.out_channels;
    }
  }

  const int last = plan.total_blocks() - 1;
  if (c.levels_m >= 2) {
    plan.level_shortcuts.push_back(
        LevelShortcut{1, 0, last, span_projection(plan, 0, last, c.upper_shortcut), "levels.l1.root"});
  }
  if (c.levels_m >= 3) {
    struct Span {
      int first, count;
      std::string name;
    };
    std::vector<Span> spans;
    for (std::size_t g = 0; g < plan.groups.size(); ++g) {
      spans.push_back({plan.groups[g].first_block, plan.groups[g].blocks, "group" + std::to_string(g + 1)});
    }
    for (int level = 2; level < c.levels_m; ++level) {
      if (level > 2) {
        std::vector<Span> next;
        for (const Span& s : spans) {
          const int part = s.count / 3;
          for (int i = 0; i < 3; ++i) next.push_back({s.first + i * part, part, s.name + ".s" + std::to_string(i + 1)});
        }
        spans = std::move(next);
      }
      for (const Span& s : spans) {
        const int dest = s.first + s.count - 1;
        plan.level_shortcuts.push_back(LevelShortcut{level, s.first, dest,
                                                     span_projection(plan, s.first, dest, c.upper_shortcut),
                                                     "levels.l" + std::to_string(level) + "." + s.name});
      }
    }
  }
  return plan;
}

std::string describe(const ResolvedPlan& plan) {
  std::ostringstream os;
  const ArchConfig& c = plan.config;
  os << "family: " << to_string(c.family) << ", order: " << to_string(c.block_order)
     << ", block size: " << to_string(plan.block_size) << ", levels m=" << c.levels_m << ", width k=" << c.width_k
     << ", classes: " << c.num_classes << "\n";
  os << "final shortcut: type " << to_string(plan.final_shortcut) << ", upper shortcuts: type "
     << to_string(c.upper_shortcut) << "\n";
  os << "stem: " << plan.stem_channels << " channels, input " << plan.input_size << "x" << plan.input_size << "\n";
  os << "groups: " << plan.groups.size() << "\n";
  for (std::size_t g = 0; g < plan.groups.size(); ++g) {
    const GroupPlan& gp = plan.groups[g];
    os << "  group" << g + 1 << ": " << gp.blocks << " blocks, width " << gp.out_channels << ", stride " << gp.stride
       << "\n";
  }
  os << "final residual blocks: " << plan.total_blocks() << "\n";
  int per_level[16] = {};
  for (const auto& s : plan.level_shortcuts) per_level[std::min(s.level, 15)]++;
  os << "root shortcuts: " << per_level[1] << "\n";
  os << "middle shortcuts: " << per_level[2] << "\n";
  for (int l = 3; l < 16; ++l) {
    if (per_level[l]) os << "level-" << l << " shortcuts: " << per_level[l] << "\n";
  }
  if (c.sd_p_L) os << "stochastic depth: p_L=" << *c.sd_p_L << "\n";
  return os.str();
}

}  // namespace ror
