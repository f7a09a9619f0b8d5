#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lumipower/image.hpp"
#include "lumipower/tensor.hpp"

namespace lumipower {

struct ModuleSample {
  std::filesystem::path image_path;
  double y = 1.0;
  double p_nom_wp = 0.0;
  double p_mpp_wp = 0.0;
  std::string module_type;
  std::size_t rows = 0, cols = 0;
};

constexpr double kMaxRelativePower = 1.05;

// Image paths are resolved against the manifest's directory.
std::vector<ModuleSample> load_manifest(const std::filesystem::path& path);

struct CropBox {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

// Bounding box of rows/columns whose mean intensity exceeds `threshold` times
// the brightest row/column mean.
CropBox detect_content_box(const GrayImage16& image, double threshold = 0.1);

// Crop to `box` (detected when absent) and resample bilinearly with
// half-pixel centers to height x width.
Tensor preprocess(const GrayImage16& image, std::size_t height, std::size_t width,
                  std::optional<CropBox> box = std::nullopt);

// Network input shape plus the placement of a rows x cols module inside it.
// The module spans the full height; its width is cols * (height / rows) and
// it is centered horizontally with zero letterbox bars.
struct InputGeometry {
  std::size_t height = 192;
  std::size_t width = 320;
  std::size_t stride = 32;

  std::size_t content_width(std::size_t rows, std::size_t cols) const;
  std::size_t content_left(std::size_t rows, std::size_t cols) const;
  // Checks that cells land on whole blocks of the stride-`stride` map.
  void check_tiles(std::size_t rows, std::size_t cols) const;
};

// preprocess() into the module's slot of the common input shape.
Tensor prepare_image(const GrayImage16& image, const InputGeometry& geometry, std::size_t rows, std::size_t cols);

struct Normalization {
  double mean = 0.0;
  double stddev = 1.0;
};

// Population mean and standard deviation over every pixel of every image.
Normalization fit_normalization(const std::vector<Tensor>& images);
Tensor normalize(const Tensor& image, const Normalization& norm);

struct AugmentDraw {
  bool flip_horizontal = false;
  bool flip_vertical = false;
  double angle_deg = 0.0;
};

constexpr double kMaxRotationDeg = 5.0;

AugmentDraw draw_augmentation(std::mt19937_64& rng);
// Images are [1,C,H,W] or [C,H,W]; rotation is about the image center with
// bilinear sampling and border replication.
Tensor augment(const Tensor& image, const AugmentDraw& draw);
Tensor augment(const Tensor& image, std::mt19937_64& rng);

struct FoldSplit {
  std::vector<int> fold;  // sample index -> 0, 1, 2
  std::vector<std::size_t> members(int f) const;
  std::vector<std::size_t> complement(int f) const;
};

constexpr int kFolds = 3;

// Sort by y (stable in manifest order) and deal each consecutive triple to
// the three folds in a seed-chosen order.
FoldSplit stratified_three_fold(const std::vector<double>& y, std::uint64_t seed);
FoldSplit stratified_three_fold(const std::vector<ModuleSample>& samples, std::uint64_t seed);

std::string folds_csv(const FoldSplit& split);

}  // namespace lumipower
