#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "specbench/core.hpp"

namespace specbench {

/// Comma-separated cells of one line; a trailing comma yields an empty cell.
std::vector<std::string> split_csv_line(const std::string& line);
/// Parses a CSV number; errors name the 1-based line.
double parse_csv_number(const std::string& text, std::size_t line_no);

/// Shortest round-trip decimal representation of a double.
std::string format_double(double v);

// Dataset CSV: header = wavenumbers then `label`; one row per spectrum with
// the class name in the final column. Class order is first appearance
// unless `class_order` is given.
void write_dataset_csv(const SpectraDataset& d, std::ostream& out);
void write_dataset_csv(const SpectraDataset& d, const std::filesystem::path& path);
SpectraDataset read_dataset_csv(std::istream& in, const std::vector<std::string>& class_order = {});
SpectraDataset read_dataset_csv(const std::filesystem::path& path, const std::vector<std::string>& class_order = {});

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);
void write_confusion_csv(const EvalReport& r, const std::vector<std::string>& class_names, std::ostream& out);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace specbench
