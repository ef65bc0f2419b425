#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ror/arch.hpp"

namespace ror {

enum class OpKind { input, conv2d, batch_norm, relu, add, zero_pad_shortcut, max_pool, global_avg_pool, linear };

std::string to_string(OpKind op);

/// Role of an input edge into an addition node.
enum class EdgeRole {
  data,      // ordinary data dependency
  residual,  // F(x): the final-level residual branch, subject to stochastic depth
  identity,  // h(x): final-level shortcut (identity or projection)
  level,     // g(x): a root/middle/inner level shortcut
};

std::string to_string(EdgeRole role);

struct GraphNode {
  int id = 0;
  OpKind op = OpKind::input;
  std::string name;
  std::vector<int> inputs;
  std::vector<EdgeRole> roles;  // parallel to inputs
  std::vector<int> levels;      // parallel to inputs; shortcut level for EdgeRole::level, else 0

  int kernel = 0;
  int stride = 1;
  int padding = 0;
  int out_channels = 0;
  std::string weight;  // parameter names
  std::string bias;
  std::string batch_norm;  // BN state prefix

  int residual_block = -1;  // >= 0: node belongs to F of that block (skipped when the block is dropped)
  int gate_block = -1;      // >= 0 on a block's addition node

  // Inferred output shape per sample: channels x height x width (height/width 0 for flat outputs).
  int channels = 0;
  int height = 0;
  int width = 0;
};

enum class ParamInit { he_normal, zeros };

struct ParamSpec {
  std::string name;
  Shape shape;
  Index fan_in = 1;
  ParamInit init = ParamInit::he_normal;
};

struct BatchNormSpec {
  std::string name;
  int channels = 0;
};

/// Topologically ordered computation graph. Nodes reference parameters by name.
struct Graph {
  ResolvedPlan plan;
  std::vector<GraphNode> nodes;
  std::vector<ParamSpec> params;
  std::vector<BatchNormSpec> batch_norms;
  std::vector<int> block_inputs;  // node id feeding block b (x_b)
  std::vector<int> block_adds;    // addition node of block b
  std::vector<int> block_outputs; // node producing x_{b+1}
  int output = -1;

  const GraphNode& node(int id) const { return nodes.at(static_cast<std::size_t>(id)); }
  const ParamSpec* find_param(const std::string& name) const;

  /// Checks acyclicity/ordering, shape consistency, and single use of each parameter.
  void validate() const;
};

/// Incremental graph construction with shape inference. Every append checks shapes,
/// so incompatible compositions fail while the graph is built.
class GraphBuilder {
 public:
  explicit GraphBuilder(Graph& graph) : g_(graph) {}

  int input(int channels, int size);
  int conv(const std::string& name, int in, int out_channels, int kernel, int stride, int padding, int block = -1);
  int batch_norm(const std::string& name, int in, int block = -1);
  int relu(const std::string& name, int in, int block = -1);
  int add(const std::string& name, std::vector<int> in, std::vector<EdgeRole> roles, int gate_block = -1);
  int zero_pad(const std::string& name, int in, int out_channels, int stride);
  int max_pool(const std::string& name, int in, int kernel, int stride, int padding);
  int global_avg_pool(const std::string& name, int in);
  int linear(const std::string& name, int in, int out_features);

  const GraphNode& node(int id) const { return g_.node(id); }

 private:
  int push(GraphNode n);
  Graph& g_;
};

/// g(x) or h(x) for a dimension change: type A subsample + zero-pad, type B 1x1 convolution.
/// Returns the input id unchanged for a degenerate (identity) type-A spec.
int make_projection(GraphBuilder& b, const ProjectionSpec& spec, const std::string& name, int input);

struct BlockNodes {
  int add = -1;     // the addition y = h(x) + F(x)
  int output = -1;  // x_{l+1}: ReLU(y) for post-activation, y for pre-activation
};

/// Emits F, h and the addition for one final-level block, following `order`.
BlockNodes build_residual_block(GraphBuilder& b, const BlockPlan& block, BlockOrder order, BlockSize size, int input);

/// Builds the m=1 network (stem, groups, head) for a plan, ignoring its level shortcuts.
Graph build_base_graph(const ResolvedPlan& plan);

/// Adds the plan's level shortcuts (root/middle/inner) into the base graph's block additions.
Graph attach_level_shortcuts(const Graph& base, const ResolvedPlan& plan);

/// Full elaboration: resolve, base graph, level shortcuts, validate.
Graph build_graph(const ArchConfig& config);

/// One JSON object per node, newline separated.
std::string to_jsonl(const Graph& graph);

}  // namespace ror
