#include "pemvc/text.hpp"

#include <array>
#include <charconv>
#include <cstdio>
#include <fstream>

#include "pemvc/errors.hpp"

namespace pemvc {

std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw DataError("format_double: conversion failed");
  return std::string(buf.data(), ptr);
}

std::string format_sci(double v, int digits) {
  std::array<char, 48> buf{};
  std::snprintf(buf.data(), buf.size(), "%.*e", digits, v);
  return buf.data();
}

std::string format_fixed(double v, int digits) {
  std::array<char, 48> buf{};
  std::snprintf(buf.data(), buf.size(), "%.*f", digits, v);
  return buf.data();
}

double parse_double(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw DataError("not a number: '" + std::string(s) + "'");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

CsvTable read_numeric_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  for (auto h : split(line, ',')) table.header.emplace_back(h);
  table.columns.resize(table.header.size());
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    auto fields = split(line, ',');
    if (fields.size() != table.header.size()) {
      throw DataError(path + ":" + std::to_string(row) + ": expected " +
                      std::to_string(table.header.size()) + " fields");
    }
    for (std::size_t c = 0; c < fields.size(); ++c) table.columns[c].push_back(parse_double(fields[c]));
  }
  return table;
}

}  // namespace pemvc
