#pragma once

#include <boost/multiprecision/cpp_int.hpp>

#include <string>
#include <utility>
#include <vector>

#include "ror/graph.hpp"
#include "ror/stochastic_depth.hpp"

namespace ror {

using BigInt = boost::multiprecision::cpp_int;

struct ParamReport {
  Index total = 0;
  std::vector<std::pair<std::string, Index>> breakdown;  // stem, group1.., levels, head

  std::string table() const;
  std::string csv() const;
  /// total / 1e6 rounded half-up to one decimal, e.g. 1.7 for 1,730,522.
  double millions() const;
};

/// Exact count of parameter elements (conv/linear weights, fc bias, BN gamma/beta).
ParamReport count_params(const Graph& graph);

struct PathStats {
  BigInt count;
  std::vector<BigInt> length_histogram;  // index = number of residual branches traversed

  std::string table() const;
  std::string csv() const;
};

/// Number of distinct input-to-output paths through the additions, by dynamic programming.
PathStats count_paths(const Graph& graph);

/// Sum of survival probabilities.
double expected_active_blocks(const SurvivalSchedule& schedule);

}  // namespace ror
