#include "specbench/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <sstream>

#include "specbench/errors.hpp"
#include "specbench/io.hpp"

namespace specbench {

namespace {

constexpr double kWidth = 640;
constexpr double kHeight = 420;
constexpr double kLeft = 70;
constexpr double kRight = 160;
constexpr double kTop = 40;
constexpr double kBottom = 55;
constexpr int kTicks = 5;

constexpr std::array<const char*, 10> kPalette{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                               "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", std::abs(v) < 1e-12 ? 0.0 : v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Range {
  double lo = INFINITY;
  double hi = -INFINITY;
  void add(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void widen() {
    if (hi - lo < 1e-12) {
      const double pad = std::max(std::abs(lo) * 0.05, 0.5);
      lo -= pad;
      hi += pad;
    }
  }
};

// Groups rows of a CSV by its header; errors name the offending line.
std::vector<std::vector<std::string>> read_rows(std::istream& in, const std::vector<std::string>& header) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty CSV");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (split_csv_line(line) != header) throw DataError("line 1: expected header " + line);
  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw DataError("line " + std::to_string(line_no) + ": wrong column count");
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw DataError("CSV has no data rows");
  return rows;
}

}  // namespace

void PlotSeries::validate() const {
  if (x.empty()) throw DataError("series '" + label + "' has no points");
  if (x.size() != y.size()) throw DataError("series '" + label + "' has unequal x and y lengths");
  if (y_err && y_err->size() != y.size()) throw DataError("series '" + label + "' has unequal y and y_err lengths");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw DataError("series '" + label + "' has non-finite points");
    if (y_err && !((*y_err)[i] >= 0.0 && std::isfinite((*y_err)[i])))
      throw DataError("series '" + label + "' has a negative or non-finite error bar");
  }
}

std::string emit_svg(const std::vector<PlotSeries>& series, const PlotAxes& axes) {
  if (series.empty()) throw DataError("nothing to plot: no series");
  Range xr, yr;
  for (const auto& s : series) {
    s.validate();
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xr.add(s.x[i]);
      const double e = s.y_err ? (*s.y_err)[i] : 0.0;
      yr.add(s.y[i] - e);
      yr.add(s.y[i] + e);
    }
  }
  xr.widen();
  yr.widen();
  const double pw = kWidth - kLeft - kRight;
  const double ph = kHeight - kTop - kBottom;
  auto px = [&](double v) { return kLeft + (v - xr.lo) / (xr.hi - xr.lo) * pw; };
  auto py = [&](double v) { return kTop + (yr.hi - v) / (yr.hi - yr.lo) * ph; };

  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!axes.title.empty())
    o << "<text x=\"" << num(kLeft + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
      << escape(axes.title) << "</text>\n";

  o << "<g class=\"axes\" stroke=\"black\" stroke-width=\"1\">\n"
    << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(kTop + ph) << "\" x2=\"" << num(kLeft + pw) << "\" y2=\""
    << num(kTop + ph) << "\"/>\n"
    << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(kTop) << "\" x2=\"" << num(kLeft) << "\" y2=\""
    << num(kTop + ph) << "\"/>\n";
  for (int t = 0; t <= kTicks; ++t) {
    const double xv = xr.lo + (xr.hi - xr.lo) * t / kTicks;
    const double yv = yr.lo + (yr.hi - yr.lo) * t / kTicks;
    o << "<line x1=\"" << num(px(xv)) << "\" y1=\"" << num(kTop + ph) << "\" x2=\"" << num(px(xv)) << "\" y2=\""
      << num(kTop + ph + 5) << "\"/>\n"
      << "<line x1=\"" << num(kLeft - 5) << "\" y1=\"" << num(py(yv)) << "\" x2=\"" << num(kLeft) << "\" y2=\""
      << num(py(yv)) << "\"/>\n";
  }
  o << "</g>\n<g class=\"ticks\" stroke=\"none\">\n";
  for (int t = 0; t <= kTicks; ++t) {
    const double xv = xr.lo + (xr.hi - xr.lo) * t / kTicks;
    const double yv = yr.lo + (yr.hi - yr.lo) * t / kTicks;
    o << "<text x=\"" << num(px(xv)) << "\" y=\"" << num(kTop + ph + 18) << "\" text-anchor=\"middle\">"
      << tick_label(xv) << "</text>\n"
      << "<text x=\"" << num(kLeft - 8) << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\">"
      << tick_label(yv) << "</text>\n";
  }
  o << "</g>\n";
  if (!axes.x_label.empty())
    o << "<text x=\"" << num(kLeft + pw / 2) << "\" y=\"" << num(kHeight - 12) << "\" text-anchor=\"middle\">"
      << escape(axes.x_label) << "</text>\n";
  if (!axes.y_label.empty())
    o << "<text x=\"18\" y=\"" << num(kTop + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << num(kTop + ph / 2) << ")\">" << escape(axes.y_label) << "</text>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % kPalette.size()];
    o << "<g class=\"series\" stroke=\"" << color << "\">\n<path fill=\"none\" stroke-width=\"1.5\" d=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      o << (i == 0 ? "M" : " L") << num(px(s.x[i])) << ' ' << num(py(s.y[i]));
    o << "\"/>\n";
    if (s.y_err)
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        const double e = (*s.y_err)[i];
        o << "<line class=\"errbar\" x1=\"" << num(px(s.x[i])) << "\" y1=\"" << num(py(s.y[i] - e)) << "\" x2=\""
          << num(px(s.x[i])) << "\" y2=\"" << num(py(s.y[i] + e)) << "\"/>\n";
      }
    const double ly = kTop + 10 + 18.0 * static_cast<double>(k);
    o << "<line class=\"legend\" x1=\"" << num(kLeft + pw + 15) << "\" y1=\"" << num(ly) << "\" x2=\""
      << num(kLeft + pw + 35) << "\" y2=\"" << num(ly) << "\" stroke-width=\"1.5\"/>\n"
      << "<text x=\"" << num(kLeft + pw + 40) << "\" y=\"" << num(ly + 4) << "\" stroke=\"none\" fill=\"black\">"
      << escape(s.label) << "</text>\n</g>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::vector<PlotSeries> sweep_series(std::istream& csv) {
  const auto rows = read_rows(csv, {"model", "level", "mean", "std", "n"});
  std::vector<PlotSeries> out;
  std::map<std::string, std::size_t> index;
  std::size_t line_no = 1;
  for (const auto& r : rows) {
    ++line_no;
    auto [it, fresh] = index.try_emplace(r[0], out.size());
    if (fresh) out.push_back(PlotSeries{r[0], {}, {}, std::vector<double>{}});
    PlotSeries& s = out[it->second];
    s.x.push_back(parse_csv_number(r[1], line_no));
    s.y.push_back(parse_csv_number(r[2], line_no));
    s.y_err->push_back(parse_csv_number(r[3], line_no));
  }
  return out;
}

std::vector<PlotSeries> history_series(std::istream& csv) {
  const auto rows = read_rows(csv, {"epoch", "train_loss", "val_accuracy"});
  PlotSeries s{"train_loss", {}, {}, std::nullopt};
  std::size_t line_no = 1;
  for (const auto& r : rows) {
    ++line_no;
    s.x.push_back(parse_csv_number(r[0], line_no));
    s.y.push_back(parse_csv_number(r[1], line_no));
  }
  return {s};
}

}  // namespace specbench
