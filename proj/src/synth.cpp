#include "lumipower/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "lumipower/csv.hpp"
#include "lumipower/error.hpp"
#include "lumipower/exact_sum.hpp"
#include "lumipower/parallel.hpp"

namespace lumipower {

const std::vector<ModulePreset>& module_presets() {
  static const std::vector<ModulePreset> presets{
      {"A", 230.0, 6, 10}, {"B", 240.0, 6, 10}, {"C", 345.0, 6, 12},
      {"D", 240.0, 6, 10}, {"E", 235.0, 6, 10}, {"F", 245.0, 6, 10},
  };
  return presets;
}

const ModulePreset& module_preset(const std::string& type) {
  for (const auto& p : module_presets())
    if (p.type == type) return p;
  throw DataError("unknown module type '" + type + "'");
}

void SyntheticModuleConfig::validate() const {
  if (rows == 0 || cols == 0) throw DataError("synthetic module needs at least one row and column");
  if (cell_px < 8) throw DataError("cell_px " + std::to_string(cell_px) + " too small to render busbars (minimum 8)");
  if (!(nominal_power_wp > 0.0)) throw DataError("nominal power must be positive");
  if (!(defect_density >= 0.0 && defect_density <= 1.0)) throw DataError("defect_density must lie in [0,1]");
  if (!(intensity_ambiguity >= 0.0 && intensity_ambiguity <= 1.0))
    throw DataError("intensity_ambiguity must lie in [0,1]");
  if (!(noise_sigma >= 0.0)) throw DataError("noise_sigma must be nonnegative");
}

void SyntheticModuleConfig::apply(const ModulePreset& preset) {
  rows = preset.rows;
  cols = preset.cols;
  nominal_power_wp = preset.nominal_power_wp;
  module_type = preset.type;
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

std::size_t uniform_int(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

InactiveRegion draw_region(std::mt19937_64& rng, std::size_t c) {
  InactiveRegion r;
  const double shape = uniform(rng, 0.0, 1.0);
  if (shape < 0.5) {
    // Strip along one cell edge, as left behind by a crack parallel to it.
    const std::size_t side = uniform_int(rng, 0, 3);
    const std::size_t k = uniform_int(rng, 1, c);
    switch (side) {
      case 0: r = {0, 0, k, c}; break;
      case 1: r = {c - k, 0, k, c}; break;
      case 2: r = {0, 0, c, k}; break;
      default: r = {0, c - k, c, k}; break;
    }
  } else if (shape < 0.75) {
    const std::size_t half = c / 2;
    switch (uniform_int(rng, 0, 3)) {
      case 0: r = {0, 0, half, c}; break;
      case 1: r = {c - half, 0, half, c}; break;
      case 2: r = {0, 0, c, half}; break;
      default: r = {0, c - half, c, half}; break;
    }
  } else {
    const std::size_t h = uniform_int(rng, c / 4, 3 * c / 4);
    const std::size_t w = uniform_int(rng, c / 4, 3 * c / 4);
    r = {uniform_int(rng, 0, c - h), uniform_int(rng, 0, c - w), h, w};
  }
  return r;
}

bool on_busbar(std::size_t x, std::size_t c) {
  const std::size_t bw = std::max<std::size_t>(1, c / 20);
  for (std::size_t k = 1; k <= 3; ++k) {
    const std::size_t center = k * c / 4;
    const std::size_t lo = center - bw / 2;
    if (x >= lo && x < lo + bw) return true;
  }
  return false;
}

GroundTruth make_truth(std::size_t rows, std::size_t cols, std::vector<double> fractions, double p_nom) {
  GroundTruth t;
  t.rows = rows;
  t.cols = cols;
  t.p_nom_wp = p_nom;
  const double n = static_cast<double>(rows * cols);
  t.p_mpp_wp = p_nom * (1.0 - exact_sum(fractions) / n);
  // Defined through the powers so that p_mpp / p_nom reproduces y exactly.
  t.y = t.p_mpp_wp / p_nom;
  t.loss_wp.resize(fractions.size());
  for (std::size_t i = 0; i < fractions.size(); ++i) t.loss_wp[i] = -(fractions[i] / n) * p_nom;
  t.inactive_fraction = std::move(fractions);
  return t;
}

}  // namespace

DefectLayout sample_layout(const SyntheticModuleConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.rng_seed);
  const std::size_t n = config.rows * config.cols;
  const std::size_t c = config.cell_px;
  DefectLayout layout;
  layout.rows = config.rows;
  layout.cols = config.cols;
  layout.cell_px = c;
  layout.base_intensity.resize(n);
  layout.regions.resize(n);
  // Module-level severity; cells fail independently given it.
  const double q = uniform(rng, 0.0, config.defect_density);
  for (std::size_t i = 0; i < n; ++i) {
    layout.base_intensity[i] = kBaseCounts * (1.0 + uniform(rng, -0.08, 0.08));
    if (config.defect_density == 0.0 || uniform(rng, 0.0, 1.0) >= q) continue;
    InactiveRegion region = draw_region(rng, c);
    region.bright = uniform(rng, 0.0, 1.0) < config.intensity_ambiguity;
    region.factor = region.bright ? uniform(rng, 1.25, 1.45) : uniform(rng, 0.15, 0.45);
    layout.regions[i].push_back(region);
  }
  layout.noise_seed = rng();
  return layout;
}

SyntheticSample render_sample(const SyntheticModuleConfig& config, const DefectLayout& layout) {
  config.validate();
  if (layout.rows != config.rows || layout.cols != config.cols || layout.cell_px != config.cell_px) {
    throw DataError("defect layout does not match the module geometry");
  }
  const std::size_t c = config.cell_px, m = config.margin_px;
  const std::size_t H = config.rows * c + 2 * m, W = config.cols * c + 2 * m;
  std::vector<double> intensity(H * W, 0.0);
  SyntheticSample out;
  out.mask = GrayImage8(H, W, 0);
  std::vector<std::size_t> counts(config.rows * config.cols, 0);
  for (std::size_t r = 0; r < config.rows; ++r) {
    for (std::size_t k = 0; k < config.cols; ++k) {
      const std::size_t cell = r * config.cols + k;
      const double base = layout.base_intensity[cell];
      for (std::size_t ly = 0; ly < c; ++ly) {
        for (std::size_t lx = 0; lx < c; ++lx) {
          double v = base;
          if (ly == 0 || lx == 0 || ly + 1 == c || lx + 1 == c) {
            v *= 0.35;
          } else if (on_busbar(lx, c)) {
            v *= 0.55;
          }
          bool inactive = false;
          for (const auto& reg : layout.regions[cell]) {
            if (ly >= reg.top && ly < reg.top + reg.height && lx >= reg.left && lx < reg.left + reg.width) {
              if (!inactive) v *= reg.factor;
              inactive = true;
            }
          }
          const std::size_t y = m + r * c + ly, x = m + k * c + lx;
          intensity[y * W + x] = v;
          if (inactive) {
            out.mask.at(y, x) = 255;
            ++counts[cell];
          }
        }
      }
    }
  }
  std::mt19937_64 noise(layout.noise_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  out.image = GrayImage16(H, W, 0);
  for (std::size_t i = 0; i < H * W; ++i) {
    double v = intensity[i];
    if (config.noise_sigma > 0.0) v += config.noise_sigma * gauss(noise);
    v = std::clamp(v, 0.0, kMaxCounts);
    out.image.pixels[i] = static_cast<std::uint16_t>(std::nearbyint(v));
  }
  std::vector<double> fractions(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) fractions[i] = static_cast<double>(counts[i]) / static_cast<double>(c * c);
  out.truth = make_truth(config.rows, config.cols, std::move(fractions), config.nominal_power_wp);
  return out;
}

SyntheticSample generate_sample(const SyntheticModuleConfig& config) {
  return render_sample(config, sample_layout(config));
}

GroundTruth truth_from_mask(const GrayImage8& mask, const SyntheticModuleConfig& config) {
  const std::size_t c = config.cell_px, m = config.margin_px;
  if (mask.height != config.rows * c + 2 * m || mask.width != config.cols * c + 2 * m) {
    throw DataError("mask size does not match the module geometry");
  }
  std::vector<double> fractions(config.rows * config.cols, 0.0);
  for (std::size_t r = 0; r < config.rows; ++r) {
    for (std::size_t k = 0; k < config.cols; ++k) {
      std::size_t count = 0;
      for (std::size_t ly = 0; ly < c; ++ly)
        for (std::size_t lx = 0; lx < c; ++lx) count += mask.at(m + r * c + ly, m + k * c + lx) != 0;
      fractions[r * config.cols + k] = static_cast<double>(count) / static_cast<double>(c * c);
    }
  }
  return make_truth(config.rows, config.cols, std::move(fractions), config.nominal_power_wp);
}

double expected_relative_power(const SyntheticModuleConfig& config) {
  const double c = static_cast<double>(config.cell_px);
  const std::size_t ci = config.cell_px;
  const double strip = (c + 1.0) / (2.0 * c);
  const double half = static_cast<double>(ci / 2) / c;
  const double side = 0.5 * static_cast<double>(ci / 4 + 3 * ci / 4) / c;
  const double per_defective_cell = 0.5 * strip + 0.25 * half + 0.25 * side * side;
  return 1.0 - 0.5 * config.defect_density * per_defective_cell;
}

SyntheticModuleConfig sample_config(const DatasetConfig& config, std::size_t index) {
  if (config.types.empty()) throw DataError("dataset needs at least one module type");
  SyntheticModuleConfig s = config.base;
  s.apply(module_preset(config.types[index % config.types.size()]));
  s.rng_seed = config.base.rng_seed ^ static_cast<std::uint64_t>(index);
  return s;
}

std::filesystem::path cell_csv_path(const std::filesystem::path& image_path) {
  std::filesystem::path p = image_path;
  p.replace_filename(image_path.stem().string() + "_cells.csv");
  return p;
}

void write_cell_csv(const std::filesystem::path& path, const GroundTruth& truth) {
  std::ostringstream out;
  out << "row,col,inactive_fraction,loss_wp\n";
  for (std::size_t r = 0; r < truth.rows; ++r)
    for (std::size_t k = 0; k < truth.cols; ++k) {
      const std::size_t i = r * truth.cols + k;
      out << r << ',' << k << ',' << format_double(truth.inactive_fraction[i]) << ',' << format_double(truth.loss_wp[i])
          << '\n';
    }
  write_file_atomic(path, out.str());
}

GroundTruth read_cell_csv(const std::filesystem::path& path, std::size_t rows, std::size_t cols, double p_nom_wp) {
  const CsvTable table = read_csv(path);
  if (table.header != std::vector<std::string>{"row", "col", "inactive_fraction", "loss_wp"}) {
    throw DataError("'" + path.string() + "' is not a per-cell truth table");
  }
  std::vector<double> fractions(rows * cols, 0.0);
  std::vector<bool> seen(rows * cols, false);
  for (const auto& row : table.rows) {
    const std::size_t r = parse_index(row[0], "row"), k = parse_index(row[1], "col");
    if (r >= rows || k >= cols) throw DataError("'" + path.string() + "' has a cell outside the grid");
    fractions[r * cols + k] = parse_double(row[2], "inactive_fraction");
    seen[r * cols + k] = true;
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end())
    throw DataError("'" + path.string() + "' does not cover every cell");
  return make_truth(rows, cols, std::move(fractions), p_nom_wp);
}

std::vector<ManifestRow> generate_dataset(const DatasetConfig& config, std::size_t n_samples,
                                          const std::filesystem::path& out_dir) {
  if (n_samples == 0) throw DataError("n_samples must be at least 1");
  config.base.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw DataError("cannot create output directory '" + out_dir.string() + "'");
  }
  std::vector<ManifestRow> rows(n_samples);
  parallel_for(n_samples, [&](std::size_t i) {
    const SyntheticModuleConfig s = sample_config(config, i);
    const SyntheticSample sample = generate_sample(s);
    char stem[32];
    std::snprintf(stem, sizeof stem, "sample_%04zu", i);
    const std::string name = stem;
    write_png(out_dir / (name + ".png"), sample.image);
    write_png(out_dir / (name + "_mask.png"), sample.mask);
    write_cell_csv(out_dir / (name + "_cells.csv"), sample.truth);
    rows[i] = ManifestRow{name + ".png", sample.truth.y, sample.truth.p_nom_wp, sample.truth.p_mpp_wp,
                          s.module_type, s.rows, s.cols};
  });
  std::ostringstream manifest;
  manifest << kManifestHeader << '\n';
  for (const auto& r : rows) {
    manifest << r.path << ',' << format_double(r.y) << ',' << format_double(r.p_nom_wp) << ','
             << format_double(r.p_mpp_wp) << ',' << r.module_type << ',' << r.rows << ',' << r.cols << '\n';
  }
  write_file_atomic(out_dir / "manifest.csv", manifest.str());
  return rows;
}

}  // namespace lumipower
