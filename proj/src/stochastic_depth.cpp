#include "ror/stochastic_depth.hpp"

#include <algorithm>
#include <random>
#include <string>

#include "ror/error.hpp"

namespace ror {

int GateVector::active() const {
  return static_cast<int>(std::count(gates.begin(), gates.end(), std::uint8_t{1}));
}

SurvivalSchedule survival_schedule(int blocks, double p_L) {
  if (blocks <= 0) throw ConfigError("survival_schedule: block count must be positive");
  if (!(p_L > 0.0 && p_L <= 1.0)) {
    throw ConfigError("survival_schedule: p_L must lie in (0, 1], got " + std::to_string(p_L));
  }
  SurvivalSchedule s;
  s.p_L = p_L;
  s.probs.resize(static_cast<std::size_t>(blocks));
  for (int l = 1; l <= blocks; ++l) {
    // (L - l(1 - p_L)) / L: a single rounding for the common p_L values.
    s.probs[static_cast<std::size_t>(l - 1)] = (blocks - l * (1.0 - p_L)) / blocks;
  }
  s.probs.back() = p_L;
  return s;
}

GateVector sample_gates(const SurvivalSchedule& schedule, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  GateVector g;
  g.seed = seed;
  g.gates.reserve(schedule.probs.size());
  for (double p : schedule.probs) {
    g.gates.push_back(std::bernoulli_distribution(p)(rng) ? 1 : 0);
  }
  return g;
}

GateVector all_on(int blocks) {
  GateVector g;
  g.gates.assign(static_cast<std::size_t>(blocks), 1);
  return g;
}

}  // namespace ror
