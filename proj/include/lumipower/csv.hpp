#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace lumipower {

// Shortest representation that parses back to the same double.
std::string format_double(double value);
double parse_double(std::string_view text, std::string_view what);
std::size_t parse_index(std::string_view text, std::string_view what);

std::vector<std::string> split_csv_line(std::string_view line);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based source line of each row
};

// Plain comma-separated file, no quoting. Throws DataError on an unreadable
// file or on rows whose field count differs from the header.
CsvTable read_csv(const std::filesystem::path& path);

// Write `content` to `path` via a sibling temporary and rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

}  // namespace lumipower
