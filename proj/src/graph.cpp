#include "ror/graph.hpp"

#include <algorithm>
#include <map>
#include <set>

#include <json.hpp>

#include "ror/error.hpp"

namespace ror {

std::string to_string(OpKind op) {
  switch (op) {
    case OpKind::input: return "input";
    case OpKind::conv2d: return "conv2d";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::relu: return "relu";
    case OpKind::add: return "add";
    case OpKind::zero_pad_shortcut: return "zero_pad_shortcut";
    case OpKind::max_pool: return "max_pool";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::linear: return "linear";
  }
  return "?";
}

std::string to_string(EdgeRole role) {
  switch (role) {
    case EdgeRole::data: return "data";
    case EdgeRole::residual: return "residual";
    case EdgeRole::identity: return "identity";
    case EdgeRole::level: return "level";
  }
  return "?";
}

const ParamSpec* Graph::find_param(const std::string& name) const {
  for (const auto& p : params) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void Graph::validate() const {
  std::set<std::string> declared;
  for (const auto& p : params) {
    if (!declared.insert(p.name).second) throw ConfigError("graph: duplicate parameter " + p.name);
  }
  std::map<std::string, int> uses;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const GraphNode& n = nodes[i];
    if (n.id != static_cast<int>(i)) throw ConfigError("graph: node ids out of order at " + n.name);
    if (n.roles.size() != n.inputs.size() || n.levels.size() != n.inputs.size()) {
      throw ConfigError("graph: role list mismatch at " + n.name);
    }
    for (int in : n.inputs) {
      if (in < 0 || in >= n.id) throw ConfigError("graph: node " + n.name + " consumes a later node");
    }
    for (const std::string* p : {&n.weight, &n.bias}) {
      if (p->empty()) continue;
      if (!declared.count(*p)) throw ConfigError("graph: node " + n.name + " references unknown parameter " + *p);
      uses[*p]++;
    }
    if (n.op == OpKind::add) {
      for (int in : n.inputs) {
        const GraphNode& s = nodes[static_cast<std::size_t>(in)];
        if (s.channels != n.channels || s.height != n.height || s.width != n.width) {
          throw ConfigError("graph: addition " + n.name + " has mismatched input " + s.name);
        }
      }
    }
  }
  for (const auto& p : params) {
    if (uses[p.name] != 1) throw ConfigError("graph: parameter " + p.name + " is not referenced exactly once");
  }
  if (output < 0 || output >= static_cast<int>(nodes.size())) throw ConfigError("graph: no output node");
}

int GraphBuilder::push(GraphNode n) {
  n.id = static_cast<int>(g_.nodes.size());
  if (n.roles.empty()) n.roles.assign(n.inputs.size(), EdgeRole::data);
  if (n.levels.empty()) n.levels.assign(n.inputs.size(), 0);
  g_.nodes.push_back(std::move(n));
  return g_.nodes.back().id;
}

int GraphBuilder::input(int channels, int size) {
  GraphNode n;
  n.op = OpKind::input;
  n.name = "input";
  n.channels = channels;
  n.height = n.width = size;
  return push(std::move(n));
}

int GraphBuilder::conv(const std::string& name, int in, int out_channels, int kernel, int stride, int padding,
                       int block) {
  const GraphNode& src = node(in);
  if (src.height == 0) throw ConfigError(name + ": conv2d needs a spatial input");
  const int oh = (src.height + 2 * padding - kernel) / stride + 1;
  const int ow = (src.width + 2 * padding - kernel) / stride + 1;
  if (src.height + 2 * padding < kernel || oh < 1 || ow < 1) {
    throw ConfigError(name + ": conv2d output would be empty for a " + std::to_string(src.height) + "x" +
                      std::to_string(src.width) + " input");
  }
  GraphNode n;
  n.op = OpKind::conv2d;
  n.name = name;
  n.inputs = {in};
  n.kernel = kernel;
  n.stride = stride;
  n.padding = padding;
  n.out_channels = out_channels;
  n.weight = name + ".weight";
  n.residual_block = block;
  n.channels = out_channels;
  n.height = oh;
  n.width = ow;
  g_.params.push_back(ParamSpec{n.weight, Shape{out_channels, src.channels, kernel, kernel},
                                static_cast<Index>(src.channels) * kernel * kernel, ParamInit::he_normal});
  return push(std::move(n));
}

int GraphBuilder::batch_norm(const std::string& name, int in, int block) {
  const GraphNode& src = node(in);
  GraphNode n;
  n.op = OpKind::batch_norm;
  n.name = name;
  n.inputs = {in};
  n.batch_norm = name;
  n.residual_block = block;
  n.channels = src.channels;
  n.height = src.height;
  n.width = src.width;
  g_.batch_norms.push_back(BatchNormSpec{name, src.channels});
  return push(std::move(n));
}

int GraphBuilder::relu(const std::string& name, int in, int block) {
  const GraphNode& src = node(in);
  GraphNode n;
  n.op = OpKind::relu;
  n.name = name;
  n.inputs = {in};
  n.residual_block = block;
  n.channels = src.channels;
  n.height = src.height;
  n.width = src.width;
  return push(std::move(n));
}

int GraphBuilder::add(const std::string& name, std::vector<int> in, std::vector<EdgeRole> roles, int gate_block) {
  if (in.size() < 2) throw ConfigError(name + ": addition needs at least two inputs");
  const GraphNode& first = node(in.front());
  for (int id : in) {
    const GraphNode& s = node(id);
    if (s.channels != first.channels || s.height != first.height || s.width != first.width) {
      throw ConfigError(name + ": cannot add " + s.name + " (" + std::to_string(s.channels) + "x" +
                        std::to_string(s.height) + "x" + std::to_string(s.width) + ") to " + first.name + " (" +
                        std::to_string(first.channels) + "x" + std::to_string(first.height) + "x" +
                        std::to_string(first.width) + ")");
    }
  }
  GraphNode n;
  n.op = OpKind::add;
  n.name = name;
  n.inputs = std::move(in);
  n.roles = std::move(roles);
  n.gate_block = gate_block;
  n.channels = first.channels;
  n.height = first.height;
  n.width = first.width;
  return push(std::move(n));
}

int GraphBuilder::zero_pad(const std::string& name, int in, int out_channels, int stride) {
  const GraphNode& src = node(in);
  if (out_channels < src.channels) throw ConfigError(name + ": type A shortcut cannot reduce channels");
  GraphNode n;
  n.op = OpKind::zero_pad_shortcut;
  n.name = name;
  n.inputs = {in};
  n.stride = stride;
  n.out_channels = out_channels;
  n.channels = out_channels;
  n.height = (src.height + stride - 1) / stride;
  n.width = (src.width + stride - 1) / stride;
  return push(std::move(n));
}

int GraphBuilder::max_pool(const std::string& name, int in, int kernel, int stride, int padding) {
  const GraphNode& src = node(in);
  GraphNode n;
  n.op = OpKind::max_pool;
  n.name = name;
  n.inputs = {in};
  n.kernel = kernel;
  n.stride = stride;
  n.padding = padding;
  n.channels = src.channels;
  n.height = (src.height + 2 * padding - kernel) / stride + 1;
  n.width = (src.width + 2 * padding - kernel) / stride + 1;
  if (n.height < 1 || n.width < 1) throw ConfigError(name + ": max pool output would be empty");
  return push(std::move(n));
}

int GraphBuilder::global_avg_pool(const std::string& name, int in) {
  const GraphNode& src = node(in);
  GraphNode n;
  n.op = OpKind::global_avg_pool;
  n.name = name;
  n.inputs = {in};
  n.channels = src.channels;
  return push(std::move(n));
}

int GraphBuilder::linear(const std::string& name, int in, int out_features) {
  const GraphNode& src = node(in);
  if (src.height != 0) throw ConfigError(name + ": linear needs a flat input");
  GraphNode n;
  n.op = OpKind::linear;
  n.name = name;
  n.inputs = {in};
  n.weight = name + ".weight";
  n.bias = name + ".bias";
  n.out_channels = out_features;
  n.channels = out_features;
  g_.params.push_back(ParamSpec{n.weight, Shape{out_features, src.channels}, src.channels, ParamInit::he_normal});
  g_.params.push_back(ParamSpec{n.bias, Shape{out_features}, src.channels, ParamInit::zeros});
  return push(std::move(n));
}

int make_projection(GraphBuilder& b, const ProjectionSpec& spec, const std::string& name, int input) {
  const GraphNode& src = b.node(input);
  if (src.channels != spec.in_channels) {
    throw ConfigError(name + ": projection expects " + std::to_string(spec.in_channels) + " input channels, got " +
                      std::to_string(src.channels));
  }
  if (spec.type == ShortcutType::A) {
    if (spec.out_channels < spec.in_channels) {
      throw ConfigError(name + ": type A shortcut needs out_channels >= in_channels");
    }
    if (spec.is_identity()) return input;
    return b.zero_pad(name, input, spec.out_channels, spec.stride);
  }
  return b.conv(name, input, spec.out_channels, 1, spec.stride, 0);
}

BlockNodes build_residual_block(GraphBuilder& b, const BlockPlan& block, BlockOrder order, BlockSize size,
                                int input) {
  const std::string p = "group" + std::to_string(block.group + 1) + ".block" + std::to_string(block.index_in_group + 1);
  const int blk = block.index;

  // Per-stage (kernel, out channels, stride) of the residual branch.
  struct Stage {
    int kernel, channels, stride;
  };
  std::vector<Stage> stages;
  switch (size) {
    case BlockSize::b33:
      stages = {{3, block.out_channels, block.stride}, {3, block.out_channels, 1}};
      break;
    case BlockSize::b333:
      stages = {{3, block.out_channels, block.stride}, {3, block.out_channels, 1}, {3, block.out_channels, 1}};
      break;
    case BlockSize::bottleneck:
      stages = {{1, block.mid_channels, 1}, {3, block.mid_channels, block.stride}, {1, block.out_channels, 1}};
      break;
  }

  int f = input;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string k = std::to_string(i + 1);
    const Stage& s = stages[i];
    if (order == BlockOrder::post_act) {
      f = b.conv(p + ".conv" + k, f, s.channels, s.kernel, s.stride, s.kernel / 2, blk);
      f = b.batch_norm(p + ".bn" + k, f, blk);
      if (i + 1 < stages.size()) f = b.relu(p + ".relu" + k, f, blk);
    } else {
      f = b.batch_norm(p + ".bn" + k, f, blk);
      f = b.relu(p + ".relu" + k, f, blk);
      f = b.conv(p + ".conv" + k, f, s.channels, s.kernel, s.stride, s.kernel / 2, blk);
    }
  }

  const int h = block.shortcut ? make_projection(b, *block.shortcut, p + ".shortcut", input) : input;
  BlockNodes out;
  out.add = b.add(p + ".add", {h, f}, {EdgeRole::identity, EdgeRole::residual}, blk);
  out.output = order == BlockOrder::post_act ? b.relu(p + ".relu", out.add) : out.add;
  return out;
}

Graph build_base_graph(const ResolvedPlan& plan) {
  Graph g;
  g.plan = plan;
  GraphBuilder b(g);
  const ArchConfig& c = plan.config;
  int x = b.input(3, plan.input_size);

  if (c.family == Family::imagenet) {
    x = b.conv("stem.conv", x, plan.stem_channels, 7, 2, 3);
    x = b.batch_norm("stem.bn", x);
    x = b.relu("stem.relu", x);
    x = b.max_pool("stem.pool", x, 3, 2, 1);
  } else {
    x = b.conv("stem.conv", x, plan.stem_channels, 3, 1, 1);
    if (c.block_order == BlockOrder::post_act) {
      x = b.batch_norm("stem.bn", x);
      x = b.relu("stem.relu", x);
    }
  }

  for (const BlockPlan& block : plan.blocks) {
    g.block_inputs.push_back(x);
    const BlockNodes nodes = build_residual_block(b, block, c.block_order, plan.block_size, x);
    g.block_adds.push_back(nodes.add);
    g.block_outputs.push_back(nodes.output);
    x = nodes.output;
  }

  if (c.block_order == BlockOrder::pre_act) {
    x = b.batch_norm("head.bn", x);
    x = b.relu("head.relu", x);
  }
  x = b.global_avg_pool("head.pool", x);
  g.output = b.linear("head.fc", x, c.num_classes);
  return g;
}

Graph attach_level_shortcuts(const Graph& base, const ResolvedPlan& plan) {
  if (plan.level_shortcuts.empty()) return base;

  std::map<int, std::vector<const LevelShortcut*>> by_add;  // base add id -> shortcuts
  for (const auto& ls : plan.level_shortcuts) {
    if (ls.destination_block < 0 || ls.destination_block >= static_cast<int>(base.block_adds.size())) {
      throw ConfigError(ls.name + ": destination block out of range");
    }
    by_add[base.block_adds[static_cast<std::size_t>(ls.destination_block)]].push_back(&ls);
  }

  Graph g;
  g.plan = plan;
  g.params = base.params;
  g.batch_norms = base.batch_norms;
  GraphBuilder b(g);
  std::vector<int> remap(base.nodes.size(), -1);

  for (const GraphNode& src : base.nodes) {
    GraphNode n = src;
    for (int& in : n.inputs) in = remap[static_cast<std::size_t>(in)];
    auto it = by_add.find(src.id);
    if (it != by_add.end()) {
      std::vector<int> inputs;
      std::vector<EdgeRole> roles;
      std::vector<int> levels;
      for (const LevelShortcut* ls : it->second) {
        const int source = remap[static_cast<std::size_t>(base.block_inputs[static_cast<std::size_t>(ls->source_block)])];
        inputs.push_back(make_projection(b, ls->projection, ls->name, source));
        roles.push_back(EdgeRole::level);
        levels.push_back(ls->level);
      }
      for (const int id : inputs) {
        const GraphNode& s = b.node(id);
        if (s.channels != n.channels || s.height != n.height || s.width != n.width) {
          throw ConfigError(n.name + ": level shortcut " + s.name + " does not match the block output shape");
        }
      }
      inputs.insert(inputs.end(), n.inputs.begin(), n.inputs.end());
      roles.insert(roles.end(), n.roles.begin(), n.roles.end());
      levels.insert(levels.end(), n.levels.begin(), n.levels.end());
      n.inputs = std::move(inputs);
      n.roles = std::move(roles);
      n.levels = std::move(levels);
    }
    n.id = static_cast<int>(g.nodes.size());
    remap[static_cast<std::size_t>(src.id)] = n.id;
    g.nodes.push_back(std::move(n));
  }

  auto map_all = [&](const std::vector<int>& ids) {
    std::vector<int> out;
    for (int id : ids) out.push_back(remap[static_cast<std::size_t>(id)]);
    return out;
  };
  g.block_inputs = map_all(base.block_inputs);
  g.block_adds = map_all(base.block_adds);
  g.block_outputs = map_all(base.block_outputs);
  g.output = remap[static_cast<std::size_t>(base.output)];
  return g;
}

Graph build_graph(const ArchConfig& config) {
  const ResolvedPlan plan = resolve_config(config);
  Graph g = attach_level_shortcuts(build_base_graph(plan), plan);
  g.validate();
  return g;
}

std::string to_jsonl(const Graph& graph) {
  std::string out;
  for (const GraphNode& n : graph.nodes) {
    nlohmann::ordered_json j;
    j["id"] = n.id;
    j["op"] = to_string(n.op);
    j["name"] = n.name;
    j["inputs"] = n.inputs;
    std::vector<std::string> roles;
    for (EdgeRole r : n.roles) roles.push_back(to_string(r));
    j["roles"] = roles;
    if (std::any_of(n.levels.begin(), n.levels.end(), [](int l) { return l > 0; })) j["levels"] = n.levels;
    nlohmann::ordered_json attrs = nlohmann::ordered_json::object();
    if (n.kernel) attrs["kernel"] = n.kernel;
    if (n.op == OpKind::conv2d || n.op == OpKind::zero_pad_shortcut || n.op == OpKind::max_pool) {
      attrs["stride"] = n.stride;
    }
    if (n.op == OpKind::conv2d || n.op == OpKind::max_pool) attrs["padding"] = n.padding;
    if (n.out_channels) attrs["out_channels"] = n.out_channels;
    if (!n.weight.empty()) attrs["weight"] = n.weight;
    if (!n.bias.empty()) attrs["bias"] = n.bias;
    if (!n.batch_norm.empty()) attrs["batch_norm"] = n.batch_norm;
    if (n.residual_block >= 0) attrs["residual_block"] = n.residual_block;
    if (n.gate_block >= 0) attrs["gate_block"] = n.gate_block;
    j["attrs"] = attrs;
    j["shape"] = n.height ? std::vector<int>{n.channels, n.height, n.width} : std::vector<int>{n.channels};
    if (n.id == graph.output) j["output"] = true;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace ror
