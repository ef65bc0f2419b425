#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ror/graph.hpp"
#include "ror/init.hpp"
#include "ror/ops.hpp"
#include "ror/stochastic_depth.hpp"

namespace ror {

/// A built graph plus its parameter table and batch-norm states.
/// Parameters are handles: copying a Model shares tensors; use clone() for a deep copy.
template <typename Scalar>
struct Model {
  Graph graph;
  std::map<std::string, Parameter<Scalar>> params;  // conv/linear weights and biases
  std::map<std::string, BatchNormState<Scalar>> batch_norms;

  /// All trainable parameters (including BN gamma/beta), sorted by name.
  std::vector<Parameter<Scalar>*> parameters() {
    std::map<std::string, Parameter<Scalar>*> all;
    for (auto& [name, p] : params) all[name] = &p;
    for (auto& [name, bn] : batch_norms) {
      all[bn.gamma.name] = &bn.gamma;
      all[bn.beta.name] = &bn.beta;
    }
    std::vector<Parameter<Scalar>*> out;
    out.reserve(all.size());
    for (auto& [name, p] : all) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (Parameter<Scalar>* p : parameters()) p->zero_grad();
  }

  Model clone() const {
    Model m;
    m.graph = graph;
    for (const auto& [name, p] : params) {
      Parameter<Scalar> q(p.name, p.value());
      q.momentum_buffer = p.momentum_buffer;
      m.params.emplace(name, std::move(q));
    }
    for (const auto& [name, bn] : batch_norms) {
      BatchNormState<Scalar> s(name, bn.channels());
      s.gamma.mutable_value() = bn.gamma.value();
      s.beta.mutable_value() = bn.beta.value();
      s.gamma.momentum_buffer = bn.gamma.momentum_buffer;
      s.beta.momentum_buffer = bn.beta.momentum_buffer;
      s.running_mean = bn.running_mean;
      s.running_var = bn.running_var;
      s.momentum = bn.momentum;
      s.epsilon = bn.epsilon;
      m.batch_norms.emplace(name, std::move(s));
    }
    return m;
  }

  /// Copies values for every parameter name present in both models.
  void copy_shared_values_from(const Model& other) {
    for (auto& [name, p] : params) {
      auto it = other.params.find(name);
      if (it != other.params.end()) p.mutable_value() = it->second.value();
    }
    for (auto& [name, bn] : batch_norms) {
      auto it = other.batch_norms.find(name);
      if (it == other.batch_norms.end()) continue;
      bn.gamma.mutable_value() = it->second.gamma.value();
      bn.beta.mutable_value() = it->second.beta.value();
      bn.running_mean = it->second.running_mean;
      bn.running_var = it->second.running_var;
    }
  }
};

/// Instantiates parameters for a graph. Each tensor is drawn from an engine seeded by
/// (seed, parameter name), so values do not depend on which other parameters exist.
template <typename Scalar>
Model<Scalar> instantiate(Graph graph, std::uint64_t seed) {
  Model<Scalar> m;
  for (const ParamSpec& spec : graph.params) {
    Tensor<Scalar> value(spec.shape);
    if (spec.init == ParamInit::he_normal) {
      std::mt19937_64 rng(mix_seed(seed, fnv1a(spec.name)));
      value = he_init<Scalar>(spec.shape, spec.fan_in, rng);
    }
    m.params.emplace(spec.name, Parameter<Scalar>(spec.name, std::move(value)));
  }
  for (const BatchNormSpec& bn : graph.batch_norms) {
    m.batch_norms.emplace(bn.name, BatchNormState<Scalar>(bn.name, bn.channels));
  }
  m.graph = std::move(graph);
  return m;
}

template <typename Scalar>
Model<Scalar> build(const ArchConfig& config, std::uint64_t seed) {
  return instantiate<Scalar>(build_graph(config), seed);
}

struct ForwardOptions {
  Mode mode = Mode::train;
  const GateVector* gates = nullptr;           // train only: b_l per final-level block
  const SurvivalSchedule* schedule = nullptr;  // eval only: scale F of block l by p_l
  int resume_from = 0;                         // with a trace: reuse its values for nodes before this id
};

/// Every node's output from one forward pass, indexed by node id (undefined for skipped nodes).
template <typename Scalar>
struct ForwardTrace {
  std::vector<Var<Scalar>> values;
};

/// Executes the graph on a batch. Dropped blocks (gate 0) skip their residual branch
/// entirely, so their batch-norm statistics are left untouched.
template <typename Scalar>
Var<Scalar> forward(Model<Scalar>& model, const Tensor<Scalar>& input, const ForwardOptions& options = {},
                    ForwardTrace<Scalar>* trace = nullptr) {
  const Graph& g = model.graph;
  const GraphNode& in_node = g.nodes.front();
  const Shape& xs = input.shape();
  if (xs.rank() != 4 || xs[1] != in_node.channels || xs[2] != in_node.height || xs[3] != in_node.width) {
    throw ConfigError("forward: input shape " + xs.str() + " does not match graph input [N," +
                      std::to_string(in_node.channels) + "," + std::to_string(in_node.height) + "," +
                      std::to_string(in_node.width) + "]");
  }
  if (!input.all_finite()) throw NumericError("forward: non-finite value in input");
  const int blocks = g.plan.total_blocks();
  if (options.gates) {
    if (options.mode != Mode::train) throw ConfigError("forward: gates are only valid in train mode");
    if (static_cast<int>(options.gates->gates.size()) != blocks) {
      throw ConfigError("forward: gate vector has " + std::to_string(options.gates->gates.size()) +
                        " entries for " + std::to_string(blocks) + " blocks");
    }
  }
  if (options.schedule) {
    if (options.mode != Mode::eval) throw ConfigError("forward: survival scaling is only valid in eval mode");
    if (static_cast<int>(options.schedule->probs.size()) != blocks) {
      throw ConfigError("forward: survival schedule has " + std::to_string(options.schedule->probs.size()) +
                        " entries for " + std::to_string(blocks) + " blocks");
    }
  }
  auto dropped = [&](int block) { return options.gates && block >= 0 && options.gates->gates[block] == 0; };

  std::vector<Var<Scalar>> values(g.nodes.size());
  if (options.resume_from > 0) {
    if (!trace || trace->values.size() != g.nodes.size() || options.resume_from > static_cast<int>(g.nodes.size())) {
      throw ConfigError("forward: resume_from needs a trace of a previous pass over this graph");
    }
    std::copy_n(trace->values.begin(), options.resume_from, values.begin());
  }
  for (const GraphNode& n : g.nodes) {
    if (n.id < options.resume_from || dropped(n.residual_block)) continue;
    auto arg = [&](std::size_t i) -> const Var<Scalar>& { return values[static_cast<std::size_t>(n.inputs[i])]; };
    try {
      switch (n.op) {
        case OpKind::input:
          values[n.id] = Var<Scalar>::leaf(input);
          break;
        case OpKind::conv2d:
          values[n.id] = conv2d(arg(0), model.params.at(n.weight).var, n.stride, n.padding);
          break;
        case OpKind::batch_norm:
          values[n.id] = batch_norm(arg(0), model.batch_norms.at(n.batch_norm), options.mode);
          break;
        case OpKind::relu:
          values[n.id] = relu(arg(0));
          break;
        case OpKind::zero_pad_shortcut:
          values[n.id] = zero_pad_shortcut(arg(0), n.stride, n.out_channels);
          break;
        case OpKind::max_pool:
          values[n.id] = max_pool2d(arg(0), n.kernel, n.stride, n.padding);
          break;
        case OpKind::global_avg_pool:
          values[n.id] = global_avg_pool(arg(0));
          break;
        case OpKind::linear:
          values[n.id] = linear(arg(0), model.params.at(n.weight).var, model.params.at(n.bias).var);
          break;
        case OpKind::add: {
          std::vector<Var<Scalar>> terms;
          for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            if (n.roles[i] == EdgeRole::residual) {
              if (dropped(n.gate_block)) continue;
              if (options.schedule && n.gate_block >= 0) {
                const double p = options.schedule->probs[static_cast<std::size_t>(n.gate_block)];
                if (p != 1.0) {
                  terms.push_back(scale(arg(i), static_cast<Scalar>(p)));
                  continue;
                }
              }
            }
            terms.push_back(arg(i));
          }
          values[n.id] = terms.size() == 1 ? terms.front() : add_n<Scalar>(std::span<const Var<Scalar>>(terms));
          break;
        }
      }
    } catch (const NumericError& e) {
      throw NumericError("node " + n.name + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("node " + n.name + ": " + e.what());
    }
  }
  Var<Scalar> out = values[static_cast<std::size_t>(g.output)];
  if (trace) trace->values = std::move(values);
  return out;
}

}  // namespace ror
