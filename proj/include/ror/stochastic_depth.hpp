#pragma once

#include <cstdint>
#include <vector>

namespace ror {

/// Survival probabilities p_l = 1 - (l / L)(1 - p_L) for blocks l = 1..L.
struct SurvivalSchedule {
  std::vector<double> probs;
  double p_L = 1.0;
};

/// One on/off pattern for the final-level residual branches of a mini-batch.
struct GateVector {
  std::vector<std::uint8_t> gates;
  std::uint64_t seed = 0;

  int active() const;
};

SurvivalSchedule survival_schedule(int blocks, double p_L);

/// Independent Bernoulli(p_l) draws from an engine seeded with `seed`.
GateVector sample_gates(const SurvivalSchedule& schedule, std::uint64_t seed);

/// Gate vector with every branch active.
GateVector all_on(int blocks);

}  // namespace ror
