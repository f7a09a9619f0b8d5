#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lumipower/image.hpp"

namespace lumipower {

struct ModulePreset {
  std::string type;
  double nominal_power_wp;
  std::size_t rows;
  std::size_t cols;
};

// The six module types A-F: 60-cell modules in 10 columns, type C with 72
// cells in 12 columns.
const std::vector<ModulePreset>& module_presets();
const ModulePreset& module_preset(const std::string& type);

struct SyntheticModuleConfig {
  std::size_t rows = 6;
  std::size_t cols = 10;
  std::size_t cell_px = 40;
  std::size_t margin_px = 24;
  double nominal_power_wp = 240.0;
  std::string module_type = "B";
  double defect_density = 0.6;
  double intensity_ambiguity = 0.5;
  double noise_sigma = 300.0;
  std::uint64_t rng_seed = 0;

  void validate() const;
  void apply(const ModulePreset& preset);
};

constexpr double kMaxCounts = 28000.0;
constexpr double kBaseCounts = 18000.0;

// Inactive region inside one cell, in cell-local pixel coordinates.
struct InactiveRegion {
  std::size_t top = 0, left = 0, height = 0, width = 0;
  bool bright = false;   // rendered brighter than the active area
  double factor = 1.0;   // intensity multiplier for the region
};

struct DefectLayout {
  std::size_t rows = 0, cols = 0, cell_px = 0;
  std::vector<double> base_intensity;  // per cell
  std::vector<std::vector<InactiveRegion>> regions;  // per cell
  std::uint64_t noise_seed = 0;
};

struct GroundTruth {
  std::size_t rows = 0, cols = 0;
  std::vector<double> inactive_fraction;  // row-major, [0,1]
  std::vector<double> loss_wp;            // row-major, <= 0
  double y = 1.0;
  double p_nom_wp = 0.0;
  double p_mpp_wp = 0.0;

  double fraction(std::size_t row, std::size_t col) const { return inactive_fraction[row * cols + col]; }
};

struct SyntheticSample {
  GrayImage16 image;
  GrayImage8 mask;  // 255 = inactive
  GroundTruth truth;
};

DefectLayout sample_layout(const SyntheticModuleConfig& config);
SyntheticSample render_sample(const SyntheticModuleConfig& config, const DefectLayout& layout);
SyntheticSample generate_sample(const SyntheticModuleConfig& config);

// Truth recomputed from mask pixels (the definition of the inactive fraction).
GroundTruth truth_from_mask(const GrayImage8& mask, const SyntheticModuleConfig& config);

// Expected relative power of the defect sampler for a given config.
double expected_relative_power(const SyntheticModuleConfig& config);

struct DatasetConfig {
  SyntheticModuleConfig base;
  // Module types cycled over the samples; geometry and nominal power come
  // from the preset table.
  std::vector<std::string> types{"A", "B", "C", "D", "E", "F"};
};

struct ManifestRow {
  std::string path;  // relative to the manifest directory
  double y = 1.0;
  double p_nom_wp = 0.0;
  double p_mpp_wp = 0.0;
  std::string module_type;
  std::size_t rows = 0, cols = 0;
};

inline constexpr const char* kManifestHeader = "path,y,p_nom_wp,p_mpp_wp,module_type,rows,cols";

SyntheticModuleConfig sample_config(const DatasetConfig& config, std::size_t index);

// Writes sample_XXXX.png, sample_XXXX_mask.png, sample_XXXX_cells.csv and
// manifest.csv into out_dir.
std::vector<ManifestRow> generate_dataset(const DatasetConfig& config, std::size_t n_samples,
                                          const std::filesystem::path& out_dir);

void write_cell_csv(const std::filesystem::path& path, const GroundTruth& truth);
GroundTruth read_cell_csv(const std::filesystem::path& path, std::size_t rows, std::size_t cols, double p_nom_wp);
// `<stem>_cells.csv` next to an image.
std::filesystem::path cell_csv_path(const std::filesystem::path& image_path);

}  // namespace lumipower
