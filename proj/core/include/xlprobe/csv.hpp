#pragma once

// Minimal CSV support for the flat tabular outputs. Fields are never
// quoted on output; inputs may use double-quoted fields.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace xlprobe {

/// Shortest decimal text that parses back to the same double.
std::string format_number(double value);

std::vector<std::string> split_csv_line(std::string_view line);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column position; throws InvalidInput when absent.
  std::size_t column(std::string_view name) const;
};

/// Reads a header plus rows; every row must have the header's width.
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace xlprobe
