#include "lumipower/powermaps.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "lumipower/csv.hpp"
#include "lumipower/error.hpp"
#include "lumipower/exact_sum.hpp"

namespace lumipower {

CellGrid CellGrid::fit(std::size_t rows, std::size_t cols, std::size_t map_height, std::size_t map_width) {
  const std::string what = std::to_string(rows) + "x" + std::to_string(cols) + " grid on a " +
                           std::to_string(map_height) + "x" + std::to_string(map_width) + " map";
  if (rows == 0 || cols == 0 || map_height == 0 || map_width == 0) throw ShapeError("empty " + what);
  if (map_height % rows) throw ShapeError(what + ": rows do not tile the map height");
  CellGrid g;
  g.rows = rows;
  g.cols = cols;
  g.map_height = map_height;
  g.map_width = map_width;
  g.cell_size = map_height / rows;
  const std::size_t span = cols * g.cell_size;
  if (span > map_width || (map_width - span) % 2) throw ShapeError(what + ": columns do not tile the map width");
  g.col_offset = (map_width - span) / 2;
  return g;
}

CellBox CellGrid::box(std::size_t row, std::size_t col) const {
  return CellBox{row * cell_size, col_offset + col * cell_size, cell_size, cell_size};
}

std::string row_label(std::size_t row) {
  std::string label;
  std::size_t n = row + 1;
  while (n > 0) {
    label.insert(label.begin(), static_cast<char>('A' + (n - 1) % 26));
    n = (n - 1) / 26;
  }
  return label;
}

std::string col_label(std::size_t col) { return std::to_string(col + 1); }

std::pair<std::size_t, std::size_t> parse_grid(std::string_view text) {
  const std::size_t x = text.find_first_of("xX");
  if (x == std::string_view::npos) throw DataError("grid must look like RxC, got '" + std::string(text) + "'");
  const std::size_t r = parse_index(text.substr(0, x), "grid rows");
  const std::size_t c = parse_index(text.substr(x + 1), "grid cols");
  if (r == 0 || c == 0) throw DataError("grid dimensions must be positive");
  return {r, c};
}

CellLossTable integrate_cells(const RegressionMap& map, const CellGrid& grid, double p_nom_wp) {
  if (map.height != grid.map_height || map.width != grid.map_width || map.values.size() != map.height * map.width) {
    throw ShapeError("integrate_cells: map " + std::to_string(map.height) + "x" + std::to_string(map.width) +
                     " does not match the grid's " + std::to_string(grid.map_height) + "x" +
                     std::to_string(grid.map_width));
  }
  CellLossTable t;
  t.rows = grid.rows;
  t.cols = grid.cols;
  t.p_nom_wp = p_nom_wp;
  t.relative.resize(grid.rows * grid.cols);
  t.loss_wp.resize(t.relative.size());
  ExactSum everything, cells, watts, margin;
  std::vector<bool> covered(map.values.size(), false);
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      const CellBox b = grid.box(r, c);
      ExactSum acc;
      for (std::size_t y = b.top; y < b.top + b.height; ++y)
        for (std::size_t x = b.left; x < b.left + b.width; ++x) {
          acc.add(map.at(y, x));
          covered[y * map.width + x] = true;
        }
      cells.merge(acc);
      const std::size_t i = r * grid.cols + c;
      t.relative[i] = acc.round();
      t.loss_wp[i] = t.relative[i] * p_nom_wp;
      watts.add(t.loss_wp[i]);
    }
  }
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    everything.add(map.values[i]);
    if (!covered[i]) margin.add(map.values[i]);
  }
  t.total_relative = cells.round();
  t.margin_relative = margin.round();
  t.y_hat = 1.0 + everything.round();
  t.total_wp = watts.round();
  return t;
}

std::string map_csv(const RegressionMap& map) {
  std::ostringstream out;
  for (std::size_t r = 0; r < map.height; ++r) {
    for (std::size_t c = 0; c < map.width; ++c) out << (c ? "," : "") << format_double(map.at(r, c));
    out << '\n';
  }
  return out.str();
}

RegressionMap parse_map_csv(std::string_view text) {
  RegressionMap map;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (map.height == 0) {
      map.width = fields.size();
    } else if (fields.size() != map.width) {
      throw DataError("map CSV row " + std::to_string(map.height + 1) + " has " + std::to_string(fields.size()) +
                      " values, expected " + std::to_string(map.width));
    }
    for (const auto& f : fields) map.values.push_back(parse_double(f, "map value"));
    ++map.height;
  }
  if (map.height == 0) throw DataError("empty map CSV");
  return map;
}

GrayImage16 upsample_map(const RegressionMap& map, std::size_t height, std::size_t width) {
  if (map.height == 0 || map.width == 0 || height % map.height || width % map.width) {
    throw ShapeError("upsample_map: " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not an integer multiple of the map");
  }
  const std::size_t fy = height / map.height, fx = width / map.width;
  GrayImage16 img(height, width);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      const double counts = std::clamp(-map.at(r / fy, c / fx) * kMapPngCountsPerUnit, 0.0, 65535.0);
      img.at(r, c) = static_cast<std::uint16_t>(std::nearbyint(counts));
    }
  return img;
}

std::string cells_csv(const CellLossTable& table) {
  std::ostringstream out;
  out << "row_label,col_label,loss_wp\n";
  for (std::size_t r = 0; r < table.rows; ++r)
    for (std::size_t c = 0; c < table.cols; ++c)
      out << row_label(r) << ',' << col_label(c) << ',' << format_double(table.loss_wp[r * table.cols + c]) << '\n';
  return out.str();
}

void export_map(const RegressionMap& map, const CellLossTable& table, std::size_t height, std::size_t width,
                const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create '" + dir.string() + "'");
  write_file_atomic(dir / "map.csv", map_csv(map));
  write_png(dir / "map.png", upsample_map(map, height, width));
  write_file_atomic(dir / "cells.csv", cells_csv(table));
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("spearman: inputs differ in length");
  if (a.size() < 2) throw DataError("spearman: need at least two values");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double mean = 0.5 * static_cast<double>(a.size() + 1);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) throw DataError("spearman: correlation undefined for constant input");
  return sab / std::sqrt(saa * sbb);
}

double localization_score(const CellLossTable& table, const GroundTruth& truth) {
  if (table.rows != truth.rows || table.cols != truth.cols) {
    throw ShapeError("localization_score: predicted grid " + std::to_string(table.rows) + "x" +
                     std::to_string(table.cols) + " vs truth " + std::to_string(truth.rows) + "x" +
                     std::to_string(truth.cols));
  }
  std::vector<double> magnitude(table.relative.size());
  for (std::size_t i = 0; i < magnitude.size(); ++i) magnitude[i] = -table.relative[i];
  return spearman(magnitude, truth.inactive_fraction);
}

}  // namespace lumipower
