#include "ror/analysis.hpp"

#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

namespace ror {

namespace {

std::string scope_of(const std::string& name) {
  return name.substr(0, name.find('.'));
}

int scope_rank(const std::string& scope) {
  if (scope == "stem") return 0;
  if (scope.rfind("group", 0) == 0) return 1;
  if (scope == "levels") return 2;
  return 3;
}

}  // namespace

ParamReport count_params(const Graph& graph) {
  std::map<std::string, Index> by_scope;
  auto add = [&](const std::string& name, Index n) { by_scope[scope_of(name)] += n; };
  for (const ParamSpec& p : graph.params) add(p.name, p.shape.numel());
  for (const BatchNormSpec& bn : graph.batch_norms) add(bn.name, 2 * static_cast<Index>(bn.channels));

  ParamReport r;
  for (const auto& [scope, n] : by_scope) r.breakdown.emplace_back(scope, n);
  std::stable_sort(r.breakdown.begin(), r.breakdown.end(), [](const auto& a, const auto& b) {
    const int ra = scope_rank(a.first), rb = scope_rank(b.first);
    if (ra != rb) return ra < rb;
    if (ra == 1 && a.first.size() != b.first.size()) return a.first.size() < b.first.size();
    return a.first < b.first;
  });
  for (const auto& [scope, n] : r.breakdown) r.total += n;
  return r;
}

double ParamReport::millions() const {
  return std::floor(static_cast<double>(total) / 1e5 + 0.5) / 10.0;
}

std::string ParamReport::table() const {
  std::ostringstream os;
  os << std::left << std::setw(12) << "scope" << std::right << std::setw(14) << "parameters" << '\n';
  for (const auto& [scope, n] : breakdown) os << std::left << std::setw(12) << scope << std::right << std::setw(14) << n << '\n';
  os << std::left << std::setw(12) << "total" << std::right << std::setw(14) << total << '\n';
  os << std::fixed << std::setprecision(1) << "(" << millions() << "M)\n";
  return os.str();
}

std::string ParamReport::csv() const {
  std::ostringstream os;
  os << "scope,parameters\n";
  for (const auto& [scope, n] : breakdown) os << scope << ',' << n << '\n';
  os << "total," << total << '\n';
  return os.str();
}

PathStats count_paths(const Graph& graph) {
  // Only additions create new path sets; every other node forwards its single input.
  std::vector<int> rep(graph.nodes.size(), -1);
  std::map<int, std::vector<BigInt>> poly;
  for (const GraphNode& n : graph.nodes) {
    const auto id = static_cast<std::size_t>(n.id);
    if (n.op == OpKind::input) {
      rep[id] = n.id;
      poly[n.id] = {BigInt(1)};
    } else if (n.op != OpKind::add) {
      rep[id] = rep[static_cast<std::size_t>(n.inputs.front())];
    } else {
      std::vector<BigInt> acc;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const auto& src = poly.at(rep[static_cast<std::size_t>(n.inputs[i])]);
        const std::size_t shift = n.roles[i] == EdgeRole::residual ? 1 : 0;
        if (acc.size() < src.size() + shift) acc.resize(src.size() + shift);
        for (std::size_t k = 0; k < src.size(); ++k) acc[k + shift] += src[k];
      }
      rep[id] = n.id;
      poly[n.id] = std::move(acc);
    }
  }
  PathStats s;
  s.length_histogram = poly.at(rep[static_cast<std::size_t>(graph.output)]);
  for (const auto& c : s.length_histogram) s.count += c;
  return s;
}

std::string PathStats::table() const {
  std::ostringstream os;
  os << "paths: " << count << '\n';
  os << std::left << std::setw(10) << "length" << "paths\n";
  for (std::size_t k = 0; k < length_histogram.size(); ++k) {
    if (length_histogram[k] != 0) os << std::left << std::setw(10) << k << length_histogram[k] << '\n';
  }
  return os.str();
}

std::string PathStats::csv() const {
  std::ostringstream os;
  os << "length,paths\n";
  for (std::size_t k = 0; k < length_histogram.size(); ++k) os << k << ',' << length_histogram[k] << '\n';
  return os.str();
}

double expected_active_blocks(const SurvivalSchedule& schedule) {
  // Neumaier summation keeps the result within one rounding of the exact sum.
  double total = 0.0, compensation = 0.0;
  for (double p : schedule.probs) {
    const double t = total + p;
    compensation += std::abs(total) >= std::abs(p) ? (total - t) + p : (p - t) + total;
    total = t;
  }
  return total + compensation;
}

}  // namespace ror
