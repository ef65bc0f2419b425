#include <gtest/gtest.h>

#include <random>
#include <string>

#include "ror/analysis.hpp"
#include "ror/model.hpp"
#include "ror/stochastic_depth.hpp"

using namespace ror;
using T = Tensor<double>;

namespace {

Model<double> tiny(int m, BlockOrder order, std::uint64_t seed = 2) {
  ArchConfig c;
  c.blocks_per_group = {2, 2, 2};
  c.levels_m = m;
  c.block_order = order;
  c.input_size = 8;
  return build<double>(c, seed);
}

T random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  T t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

void randomize_running_stats(Model<double>& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto& [name, bn] : m.batch_norms) {
    for (Index i = 0; i < bn.channels(); ++i) {
      bn.running_mean[i] = u(rng) - 1.0;
      bn.running_var[i] = u(rng);
    }
  }
}

}  // namespace

TEST(SurvivalSchedule, LinearDecay) {
  const SurvivalSchedule two = survival_schedule(2, 0.5);
  ASSERT_EQ(two.probs.size(), 2u);
  EXPECT_EQ(two.probs[0], 0.75);
  EXPECT_EQ(two.probs[1], 0.5);
  for (int L : {1, 7, 54}) {
    for (double p : survival_schedule(L, 1.0).probs) EXPECT_EQ(p, 1.0);
  }
  const SurvivalSchedule s = survival_schedule(54, 0.5);
  EXPECT_EQ(s.probs.back(), 0.5);
  for (std::size_t l = 1; l < s.probs.size(); ++l) EXPECT_LT(s.probs[l], s.probs[l - 1]);
  EXPECT_NEAR(s.probs.front(), 1.0 - 0.5 / 54, 1e-15);
}

TEST(SurvivalSchedule, Errors) {
  EXPECT_THROW(survival_schedule(0, 0.5), ConfigError);
  EXPECT_THROW(survival_schedule(10, 0.0), ConfigError);
  EXPECT_THROW(survival_schedule(10, 1.5), ConfigError);
}

TEST(SampleGates, CertainSurvivalAndDeterminism) {
  const SurvivalSchedule one = survival_schedule(30, 1.0);
  for (std::uint64_t seed = 0; seed < 50; ++seed) EXPECT_EQ(sample_gates(one, seed).active(), 30);
  const SurvivalSchedule half = survival_schedule(54, 0.5);
  const GateVector a = sample_gates(half, 123), b = sample_gates(half, 123);
  EXPECT_EQ(a.gates, b.gates);
  EXPECT_EQ(a.seed, 123u);
  bool differs = false;
  for (std::uint64_t seed = 1; seed < 20 && !differs; ++seed) differs = sample_gates(half, seed).gates != a.gates;
  EXPECT_TRUE(differs);
}

TEST(SampleGates, MonteCarloMatchesExpectation) {
  const SurvivalSchedule s = survival_schedule(54, 0.5);
  double total = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) total += sample_gates(s, seed).active();
  EXPECT_NEAR(total / 10000, 40.25, 0.01 * 40.25);
  EXPECT_EQ(all_on(5).active(), 5);
}

TEST(GatedForward, AllOnEqualsUngated) {
  for (int m : {1, 3}) {
    for (BlockOrder order : {BlockOrder::post_act, BlockOrder::pre_act}) {
      Model<double> a = tiny(m, order), b = tiny(m, order);
      const T x = random_tensor(Shape{3, 3, 8, 8}, 4);
      const GateVector on = all_on(a.graph.plan.total_blocks());
      ForwardOptions gated;
      gated.gates = &on;
      const auto ya = forward(a, x, gated);
      const auto yb = forward(b, x);
      EXPECT_TRUE((ya.value().values() == yb.value().values()).all());
    }
  }
}

TEST(GatedForward, EvalWithCertainSurvivalEqualsPlainEval) {
  Model<double> m = tiny(3, BlockOrder::post_act);
  randomize_running_stats(m, 5);
  const T x = random_tensor(Shape{2, 3, 8, 8}, 6);
  const SurvivalSchedule one = survival_schedule(m.graph.plan.total_blocks(), 1.0);
  ForwardOptions scaled{Mode::eval};
  scaled.schedule = &one;
  EXPECT_TRUE((forward(m, x, scaled).value().values() == forward(m, x, ForwardOptions{Mode::eval}).value().values()).all());
}

TEST(GatedForward, DroppedPreActIdentityBlockPassesThrough) {
  Model<double> m = tiny(1, BlockOrder::pre_act);
  GateVector g = all_on(m.graph.plan.total_blocks());
  g.gates[1] = 0;
  ForwardOptions opts;
  opts.gates = &g;
  ForwardTrace<double> trace;
  forward(m, random_tensor(Shape{2, 3, 8, 8}, 7), opts, &trace);
  const auto& in = trace.values[static_cast<std::size_t>(m.graph.block_inputs[1])].value();
  const auto& out = trace.values[static_cast<std::size_t>(m.graph.block_outputs[1])].value();
  EXPECT_TRUE((in.values() == out.values()).all());
  for (const GraphNode& n : m.graph.nodes) {
    if (n.residual_block == 1) EXPECT_FALSE(trace.values[static_cast<std::size_t>(n.id)].defined()) << n.name;
  }
}

TEST(GatedForward, DroppedBlockKeepsBatchNormStatistics) {
  Model<double> m = tiny(3, BlockOrder::post_act);
  GateVector g = all_on(m.graph.plan.total_blocks());
  g.gates[2] = 0;
  ForwardOptions opts;
  opts.gates = &g;
  const Model<double> before = m.clone();
  forward(m, random_tensor(Shape{2, 3, 8, 8}, 8), opts);
  for (const auto& [name, bn] : m.batch_norms) {
    const bool frozen = name.rfind("group2.block1.", 0) == 0;
    const bool same = (bn.running_mean.values() == before.batch_norms.at(name).running_mean.values()).all();
    EXPECT_EQ(same, frozen) << name;
  }
}

TEST(GatedForward, DroppedBlockParametersGetNoGradient) {
  Model<double> m = tiny(2, BlockOrder::pre_act);
  GateVector g = all_on(m.graph.plan.total_blocks());
  g.gates[4] = 0;
  ForwardOptions opts;
  opts.gates = &g;
  backward(sum(forward(m, random_tensor(Shape{2, 3, 8, 8}, 9), opts)));
  for (Parameter<double>* p : m.parameters()) {
    const bool in_dropped = p->name.rfind("group3.block1.", 0) == 0 && p->name.find("shortcut") == std::string::npos;
    EXPECT_EQ(p->grad().has_value(), !in_dropped) << p->name;
  }
}

// Eval scaling multiplies F by p_l. The oracle folds p_l into the branch's last affine map instead:
// the trailing BN (post-activation) or the last conv weight (pre-activation).
TEST(GatedForward, EvalScalingMatchesFoldedWeights) {
  for (BlockOrder order : {BlockOrder::post_act, BlockOrder::pre_act}) {
    Model<double> m = tiny(3, order);
    randomize_running_stats(m, 10);
    Model<double> folded = m.clone();
    const SurvivalSchedule s = survival_schedule(m.graph.plan.total_blocks(), 0.5);
    for (const BlockPlan& b : m.graph.plan.blocks) {
      const double p = s.probs[static_cast<std::size_t>(b.index)];
      const std::string prefix =
          "group" + std::to_string(b.group + 1) + ".block" + std::to_string(b.index_in_group + 1) + ".";
      if (order == BlockOrder::post_act) {
        auto& bn = folded.batch_norms.at(prefix + "bn2");
        bn.gamma.mutable_value().values() *= p;
        bn.beta.mutable_value().values() *= p;
      } else {
        folded.params.at(prefix + "conv2.weight").mutable_value().values() *= p;
      }
    }
    const T x = random_tensor(Shape{2, 3, 8, 8}, 11);
    ForwardOptions scaled{Mode::eval};
    scaled.schedule = &s;
    const auto a = forward(m, x, scaled).value();
    const auto b = forward(folded, x, ForwardOptions{Mode::eval}).value();
    for (Index i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(GatedForward, ModeAndLengthErrors) {
  Model<double> m = tiny(1, BlockOrder::post_act);
  const T x = random_tensor(Shape{2, 3, 8, 8}, 12);
  const GateVector short_gates = all_on(5);
  const GateVector gates = all_on(6);
  const SurvivalSchedule s = survival_schedule(6, 0.5);
  const SurvivalSchedule s5 = survival_schedule(5, 0.5);
  ForwardOptions o;
  o.gates = &short_gates;
  EXPECT_THROW(forward(m, x, o), ConfigError);
  o.gates = &gates;
  o.mode = Mode::eval;
  EXPECT_THROW(forward(m, x, o), ConfigError);
  ForwardOptions e{Mode::train};
  e.schedule = &s;
  EXPECT_THROW(forward(m, x, e), ConfigError);
  e.mode = Mode::eval;
  e.schedule = &s5;
  EXPECT_THROW(forward(m, x, e), ConfigError);
}

TEST(ExpectedDepth, ClosedForm) {
  EXPECT_EQ(expected_active_blocks(survival_schedule(54, 0.5)), 40.25);
  EXPECT_EQ(expected_active_blocks(survival_schedule(17, 1.0)), 17.0);
  for (int L : {1, 2, 9, 54, 81, 200, 1000}) {
    const double sum = expected_active_blocks(survival_schedule(L, 0.5));
    const double saving = (L - sum) / L;
    EXPECT_NEAR(saving, 0.25 * (L + 1) / L, 1e-12) << L;
  }
  EXPECT_NEAR((1e6 - expected_active_blocks(survival_schedule(1000000, 0.5))) / 1e6, 0.25, 1e-6);
}
