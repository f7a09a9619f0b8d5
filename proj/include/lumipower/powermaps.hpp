#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "lumipower/image.hpp"
#include "lumipower/model.hpp"
#include "lumipower/synth.hpp"

namespace lumipower {

struct CellBox {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

// Cell layout in map coordinates. Cells are square blocks of map pixels; the
// grid spans the full map height and is centered horizontally, leaving equal
// margin columns when the module is letterboxed.
struct CellGrid {
  std::size_t rows = 0, cols = 0;
  std::size_t map_height = 0, map_width = 0;
  std::size_t cell_size = 0;
  std::size_t col_offset = 0;

  static CellGrid fit(std::size_t rows, std::size_t cols, std::size_t map_height, std::size_t map_width);

  CellBox box(std::size_t row, std::size_t col) const;
  std::size_t margin_pixels() const { return map_height * (map_width - cols * cell_size); }
  bool operator==(const CellGrid&) const = default;
};

// Row labels A, B, ..., Z, AA, ...; column labels 1, 2, ...
std::string row_label(std::size_t row);
std::string col_label(std::size_t col);
// Parses "RxC", e.g. "6x10".
std::pair<std::size_t, std::size_t> parse_grid(std::string_view text);

struct CellLossTable {
  std::size_t rows = 0, cols = 0;
  std::vector<double> relative;  // per cell, <= 0
  std::vector<double> loss_wp;   // per cell, relative * p_nom
  double margin_relative = 0.0;  // map mass outside the grid (letterbox bars)
  double total_relative = 0.0;   // sum over cells, correctly rounded
  double y_hat = 1.0;            // 1 + sum(map), as the model head forms it
  double p_nom_wp = 0.0;
  double total_wp = 0.0;         // sum of loss_wp, correctly rounded

  double cell(std::size_t row, std::size_t col) const { return relative[row * cols + col]; }
};

CellLossTable integrate_cells(const RegressionMap& map, const CellGrid& grid, double p_nom_wp);

std::string map_csv(const RegressionMap& map);
RegressionMap parse_map_csv(std::string_view text);

// Nearest-neighbour upsampling; pixel value is the loss magnitude in parts per
// million of nominal power, saturating at 65535.
constexpr double kMapPngCountsPerUnit = 1e6;
GrayImage16 upsample_map(const RegressionMap& map, std::size_t height, std::size_t width);

std::string cells_csv(const CellLossTable& table);

// Writes map.csv, map.png and cells.csv into `dir`.
void export_map(const RegressionMap& map, const CellLossTable& table, std::size_t height, std::size_t width,
                const std::filesystem::path& dir);

// Spearman rank correlation with average ranks for ties. Throws DataError
// when either input is constant.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Correlation between predicted per-cell loss magnitude and true inactive
// fraction.
double localization_score(const CellLossTable& table, const GroundTruth& truth);

}  // namespace lumipower
