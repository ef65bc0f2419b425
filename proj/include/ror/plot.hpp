#pragma once

#include <string>
#include <vector>

#include "ror/train.hpp"

namespace ror {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Trailing moving average; the first window-1 points average what is available.
std::vector<double> moving_average(const std::vector<double>& values, int window);

/// Test error vs epoch for one metrics log.
Series test_error_series(const MetricsLog& log, const std::string& label);

/// Static SVG line chart, one polyline and legend entry per series, smoothed with `window`.
std::string render_svg(const std::vector<Series>& series, int window = 5, const std::string& title = "Smoothed test error");

}  // namespace ror
