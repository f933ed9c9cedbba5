#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace pemvc {

/// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);
/// Fixed-width scientific notation for reports.
std::string format_sci(double v, int digits = 6);
std::string format_fixed(double v, int digits);

double parse_double(std::string_view s);
std::vector<std::string_view> split(std::string_view line, char sep);

/// A numeric CSV: header names plus row-major columns.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> columns;
};

CsvTable read_numeric_csv(const std::string& path);

}  // namespace pemvc
