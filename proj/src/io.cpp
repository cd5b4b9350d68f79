#include "specbench/io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace specbench {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_csv_number(const std::string& text, std::size_t line_no) {
  double v = 0.0;
  const char* b = text.data();
  const char* e = text.data() + text.size();
  while (b < e && *b == ' ') ++b;
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e)
    throw DataError("line " + std::to_string(line_no) + ": cannot parse number '" + text + "'");
  return v;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

void write_dataset_csv(const SpectraDataset& d, std::ostream& out) {
  for (Eigen::Index j = 0; j < d.n_bins(); ++j) out << format_double(d.grid()[j]) << ',';
  out << "label\n";
  for (Eigen::Index i = 0; i < d.n_spectra(); ++i) {
    for (Eigen::Index j = 0; j < d.n_bins(); ++j) out << format_double(d.rows()(i, j)) << ',';
    out << d.class_names()[static_cast<std::size_t>(d.labels()[static_cast<std::size_t>(i)])] << '\n';
  }
}

void write_dataset_csv(const SpectraDataset& d, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_dataset_csv(d, out);
}

SpectraDataset read_dataset_csv(std::istream& in, const std::vector<std::string>& class_order) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty dataset CSV");
  auto header = split_csv_line(line);
  if (header.size() < 3 || header.back() != "label") throw DataError("dataset CSV header must end with 'label'");
  const std::size_t n_bins = header.size() - 1;
  Vector grid(static_cast<Eigen::Index>(n_bins));
  for (std::size_t j = 0; j < n_bins; ++j) grid[static_cast<Eigen::Index>(j)] = parse_csv_number(header[j], 1);

  std::vector<std::string> names = class_order;
  std::unordered_map<std::string, int> index;
  for (std::size_t c = 0; c < names.size(); ++c) index[names[c]] = static_cast<int>(c);

  std::vector<double> values;
  Labels labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != n_bins + 1)
      throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(n_bins + 1) + " cells, got " +
                      std::to_string(cells.size()));
    for (std::size_t j = 0; j < n_bins; ++j) values.push_back(parse_csv_number(cells[j], line_no));
    const std::string& name = cells.back();
    auto it = index.find(name);
    if (it == index.end()) {
      if (!class_order.empty()) throw DataError("line " + std::to_string(line_no) + ": unknown class '" + name + "'");
      it = index.emplace(name, static_cast<int>(names.size())).first;
      names.push_back(name);
    }
    labels.push_back(it->second);
  }
  RowMatrix rows = Eigen::Map<RowMatrix>(values.data(), static_cast<Eigen::Index>(labels.size()),
                                         static_cast<Eigen::Index>(n_bins));
  return SpectraDataset(std::move(grid), std::move(rows), std::move(labels), std::move(names));
}

SpectraDataset read_dataset_csv(const std::filesystem::path& path, const std::vector<std::string>& class_order) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read_dataset_csv(in, class_order);
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json confusion = nlohmann::json::array();
  for (Eigen::Index i = 0; i < r.confusion().rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < r.confusion().cols(); ++j) row.push_back(r.confusion()(i, j));
    confusion.push_back(std::move(row));
  }
  return {{"accuracy", r.accuracy()}, {"confusion", confusion}, {"n_test", r.n_test()},
          {"seed", r.seed()},         {"model_name", r.model_name()}, {"noise_level", r.noise_level()}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  const auto& rows = j.at("confusion");
  const auto k = static_cast<Eigen::Index>(rows.size());
  Eigen::MatrixXi confusion(k, k);
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = 0; b < k; ++b) confusion(a, b) = rows.at(static_cast<std::size_t>(a)).at(static_cast<std::size_t>(b)).get<int>();
  EvalReport r(std::move(confusion), j.at("seed").get<std::uint64_t>(), j.at("model_name").get<std::string>(),
               j.at("noise_level").get<double>());
  if (j.contains("n_test") && j.at("n_test").get<int>() != r.n_test())
    throw DataError("report n_test disagrees with its confusion matrix");
  return r;
}

void write_confusion_csv(const EvalReport& r, const std::vector<std::string>& class_names, std::ostream& out) {
  const auto k = r.confusion().rows();
  auto name = [&](Eigen::Index i) {
    return i < static_cast<Eigen::Index>(class_names.size()) ? class_names[static_cast<std::size_t>(i)] : std::to_string(i);
  };
  out << "true\\predicted";
  for (Eigen::Index j = 0; j < k; ++j) out << ',' << name(j);
  out << '\n';
  for (Eigen::Index i = 0; i < k; ++i) {
    out << name(i);
    for (Eigen::Index j = 0; j < k; ++j) out << ',' << r.confusion()(i, j);
    out << '\n';
  }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace specbench
