#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace specbench {

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::optional<std::vector<double>> y_err;

  void validate() const;
};

struct PlotAxes {
  std::string x_label;
  std::string y_label;
  std::string title;
};

/// Standalone SVG line chart. Each series is one <path>; each error bar is
/// one <line class="errbar">. Output depends only on the input values.
std::string emit_svg(const std::vector<PlotSeries>& series, const PlotAxes& axes = {});

/// One series per model from sweep.csv: x = level, y = mean, y_err = std.
std::vector<PlotSeries> sweep_series(std::istream& csv);
/// Training loss per epoch from a history CSV.
std::vector<PlotSeries> history_series(std::istream& csv);

}  // namespace specbench
