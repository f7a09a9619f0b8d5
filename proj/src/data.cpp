#include "lumipower/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>

#include "lumipower/csv.hpp"
#include "lumipower/error.hpp"
#include "lumipower/exact_sum.hpp"
#include "lumipower/synth.hpp"

namespace lumipower {

std::vector<ModuleSample> load_manifest(const std::filesystem::path& path) {
  const CsvTable table = read_csv(path);
  if (table.header != split_csv_line(kManifestHeader)) {
    throw DataError("'" + path.string() + "': manifest header must be '" + std::string(kManifestHeader) + "'");
  }
  if (table.rows.empty()) throw DataError("'" + path.string() + "': empty dataset");
  const std::filesystem::path base = path.parent_path();
  std::vector<ModuleSample> samples;
  samples.reserve(table.rows.size());
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    const std::string where = path.string() + " row " + std::to_string(i + 1) + " (line " +
                              std::to_string(table.line_numbers[i]) + ", '" + row[0] + "')";
    try {
      ModuleSample s;
      s.image_path = std::filesystem::path(row[0]).is_absolute() ? std::filesystem::path(row[0]) : base / row[0];
      s.y = parse_double(row[1], "y");
      s.p_nom_wp = parse_double(row[2], "p_nom_wp");
      s.p_mpp_wp = parse_double(row[3], "p_mpp_wp");
      s.module_type = row[4];
      s.rows = parse_index(row[5], "rows");
      s.cols = parse_index(row[6], "cols");
      if (!std::filesystem::is_regular_file(s.image_path)) throw DataError("missing image file " + s.image_path.string());
      if (!(s.p_nom_wp > 0.0)) throw DataError("p_nom_wp must be positive");
      if (!(s.y > 0.0 && s.y <= kMaxRelativePower)) throw DataError("y = " + row[1] + " outside (0, 1.05]");
      if (!(std::fabs(s.p_mpp_wp / s.p_nom_wp - s.y) <= 1e-9))
        throw DataError("p_mpp_wp / p_nom_wp disagrees with y by more than 1e-9");
      if (s.rows == 0 || s.cols == 0) throw DataError("grid geometry must be positive");
      samples.push_back(std::move(s));
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return samples;
}

CropBox detect_content_box(const GrayImage16& image, double threshold) {
  if (image.height == 0 || image.width == 0) throw DataError("cannot crop an empty image");
  std::vector<double> row_mean(image.height, 0.0), col_mean(image.width, 0.0);
  for (std::size_t r = 0; r < image.height; ++r)
    for (std::size_t c = 0; c < image.width; ++c) {
      row_mean[r] += image.at(r, c);
      col_mean[c] += image.at(r, c);
    }
  for (double& v : row_mean) v /= static_cast<double>(image.width);
  for (double& v : col_mean) v /= static_cast<double>(image.height);
  auto span = [threshold](const std::vector<double>& profile) -> std::pair<std::size_t, std::size_t> {
    const double cut = threshold * *std::max_element(profile.begin(), profile.end());
    std::size_t lo = 0, hi = profile.size();
    while (lo < hi && !(profile[lo] > cut)) ++lo;
    while (hi > lo && !(profile[hi - 1] > cut)) --hi;
    return {lo, hi};
  };
  const auto [top, bottom] = span(row_mean);
  const auto [left, right] = span(col_mean);
  if (bottom <= top || right <= left) throw DataError("degenerate crop box: image has no content above background");
  return CropBox{top, left, bottom - top, right - left};
}

namespace {

void resample_into(const GrayImage16& image, const CropBox& box, std::size_t height, std::size_t width, double* out,
                   std::size_t out_stride) {
  const double sy = static_cast<double>(box.height) / static_cast<double>(height);
  const double sx = static_cast<double>(box.width) / static_cast<double>(width);
  auto source = [](std::size_t i, double scale, std::size_t extent, std::size_t& i0, std::size_t& i1) {
    double s = (static_cast<double>(i) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(extent - 1));
    i0 = static_cast<std::size_t>(s);
    i1 = std::min(i0 + 1, extent - 1);
    return s - static_cast<double>(i0);
  };
  std::vector<std::size_t> x0(width), x1(width);
  std::vector<double> fx(width);
  for (std::size_t c = 0; c < width; ++c) fx[c] = source(c, sx, box.width, x0[c], x1[c]);
  for (std::size_t r = 0; r < height; ++r) {
    std::size_t y0, y1;
    const double fy = source(r, sy, box.height, y0, y1);
    for (std::size_t c = 0; c < width; ++c) {
      const double a = image.at(box.top + y0, box.left + x0[c]), b = image.at(box.top + y0, box.left + x1[c]);
      const double d = image.at(box.top + y1, box.left + x0[c]), e = image.at(box.top + y1, box.left + x1[c]);
      // Difference form keeps constants and unit scale exact.
      const double upper = a + fx[c] * (b - a);
      const double lower = d + fx[c] * (e - d);
      out[r * out_stride + c] = upper + fy * (lower - upper);
    }
  }
}

CropBox checked_box(const GrayImage16& image, std::optional<CropBox> box) {
  const CropBox b = box ? *box : detect_content_box(image);
  if (b.height == 0 || b.width == 0 || b.top + b.height > image.height || b.left + b.width > image.width) {
    throw DataError("degenerate crop box for a " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                    " image");
  }
  return b;
}

}  // namespace

Tensor preprocess(const GrayImage16& image, std::size_t height, std::size_t width, std::optional<CropBox> box) {
  if (height == 0 || width == 0) throw ShapeError("preprocess: target shape must be nonempty");
  const CropBox b = checked_box(image, box);
  std::vector<double> out(height * width);
  resample_into(image, b, height, width, out.data(), width);
  return Tensor({1, 1, height, width}, std::move(out));
}

std::size_t InputGeometry::content_width(std::size_t rows, std::size_t cols) const {
  check_tiles(rows, cols);
  return cols * (height / stride / rows) * stride;
}

std::size_t InputGeometry::content_left(std::size_t rows, std::size_t cols) const {
  return (width - content_width(rows, cols)) / 2;
}

void InputGeometry::check_tiles(std::size_t rows, std::size_t cols) const {
  const std::string what = std::to_string(rows) + "x" + std::to_string(cols) + " grid in a " +
                           std::to_string(height) + "x" + std::to_string(width) + " input";
  if (stride == 0 || height % stride || width % stride || height == 0 || width == 0)
    throw ShapeError("input " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not a multiple of the map stride " + std::to_string(stride));
  if (rows == 0 || cols == 0) throw ShapeError("empty grid");
  const std::size_t mh = height / stride, mw = width / stride;
  if (mh % rows) throw ShapeError(what + ": map height " + std::to_string(mh) + " not divisible by rows");
  const std::size_t span = cols * (mh / rows);
  if (span > mw || (mw - span) % 2) throw ShapeError(what + ": cells do not tile the map width");
}

Tensor prepare_image(const GrayImage16& image, const InputGeometry& geometry, std::size_t rows, std::size_t cols) {
  const std::size_t cw = geometry.content_width(rows, cols);
  const std::size_t left = geometry.content_left(rows, cols);
  const CropBox b = checked_box(image, std::nullopt);
  std::vector<double> out(geometry.height * geometry.width, 0.0);
  resample_into(image, b, geometry.height, cw, out.data() + left, geometry.width);
  return Tensor({1, 1, geometry.height, geometry.width}, std::move(out));
}

Normalization fit_normalization(const std::vector<Tensor>& images) {
  if (images.empty()) throw DataError("fit_normalization: need at least one image");
  ExactSum total;
  std::size_t count = 0;
  for (const Tensor& t : images) {
    for (double v : t.values()) total.add(v);
    count += t.numel();
  }
  if (count == 0) throw DataError("fit_normalization: images are empty");
  if (!total.finite()) throw NumericError("fit_normalization: non-finite pixel value");
  const double mean = total.round() / static_cast<double>(count);
  ExactSum squares;
  for (const Tensor& t : images)
    for (double v : t.values()) squares.add((v - mean) * (v - mean));
  const double stddev = std::sqrt(squares.round() / static_cast<double>(count));
  if (!(stddev > 0.0) || !std::isfinite(stddev)) throw DataError("fit_normalization: constant dataset (sigma = 0)");
  return {mean, stddev};
}

Tensor normalize(const Tensor& image, const Normalization& norm) {
  std::vector<double> out(image.values().begin(), image.values().end());
  for (double& v : out) v = (v - norm.mean) / norm.stddev;
  return Tensor(image.shape(), std::move(out));
}

AugmentDraw draw_augmentation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AugmentDraw d;
  d.flip_horizontal = u(rng) < 0.5;
  d.flip_vertical = u(rng) < 0.5;
  d.angle_deg = std::uniform_real_distribution<double>(-kMaxRotationDeg, kMaxRotationDeg)(rng);
  return d;
}

Tensor augment(const Tensor& image, const AugmentDraw& draw) {
  if (image.rank() != 3 && image.rank() != 4) throw ShapeError("augment expects [C,H,W] or [1,C,H,W]");
  if (image.rank() == 4 && image.dim(0) != 1) throw ShapeError("augment works on one image at a time");
  const std::size_t H = image.dim(image.rank() - 2), W = image.dim(image.rank() - 1);
  const std::size_t planes = image.numel() / (H * W);
  const auto src = image.values();
  std::vector<double> flipped(src.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        const std::size_t sr = draw.flip_vertical ? H - 1 - r : r;
        const std::size_t sc = draw.flip_horizontal ? W - 1 - c : c;
        flipped[(p * H + r) * W + c] = src[(p * H + sr) * W + sc];
      }
  if (draw.angle_deg == 0.0) return Tensor(image.shape(), std::move(flipped));

  const double theta = draw.angle_deg * std::acos(-1.0) / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cy = 0.5 * static_cast<double>(H - 1), cx = 0.5 * static_cast<double>(W - 1);
  std::vector<double> out(src.size());
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(c) - cx;
      // Inverse mapping: output pixel samples the source rotated by -theta.
      const double sy = std::clamp(cy + cs * dy - sn * dx, 0.0, static_cast<double>(H - 1));
      const double sx = std::clamp(cx + sn * dy + cs * dx, 0.0, static_cast<double>(W - 1));
      const std::size_t y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
      const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
      const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
      for (std::size_t p = 0; p < planes; ++p) {
        const double* plane = flipped.data() + p * H * W;
        const double upper = plane[y0 * W + x0] + fx * (plane[y0 * W + x1] - plane[y0 * W + x0]);
        const double lower = plane[y1 * W + x0] + fx * (plane[y1 * W + x1] - plane[y1 * W + x0]);
        out[(p * H + r) * W + c] = upper + fy * (lower - upper);
      }
    }
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor augment(const Tensor& image, std::mt19937_64& rng) { return augment(image, draw_augmentation(rng)); }

std::vector<std::size_t> FoldSplit::members(int f) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold.size(); ++i)
    if (fold[i] == f) out.push_back(i);
  return out;
}

std::vector<std::size_t> FoldSplit::complement(int f) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold.size(); ++i)
    if (fold[i] != f) out.push_back(i);
  return out;
}

FoldSplit stratified_three_fold(const std::vector<double>& y, std::uint64_t seed) {
  if (y.size() < static_cast<std::size_t>(kFolds)) {
    throw DataError("stratified split needs at least 3 samples, got " + std::to_string(y.size()));
  }
  std::vector<std::size_t> order(y.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return y[a] < y[b]; });
  std::mt19937_64 rng(seed);
  FoldSplit split;
  split.fold.assign(y.size(), -1);
  for (std::size_t start = 0; start < order.size(); start += kFolds) {
    std::array<int, kFolds> perm{0, 1, 2};
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t j = 0; j < static_cast<std::size_t>(kFolds) && start + j < order.size(); ++j)
      split.fold[order[start + j]] = perm[j];
  }
  return split;
}

FoldSplit stratified_three_fold(const std::vector<ModuleSample>& samples, std::uint64_t seed) {
  std::vector<double> y;
  y.reserve(samples.size());
  for (const auto& s : samples) y.push_back(s.y);
  return stratified_three_fold(y, seed);
}

std::string folds_csv(const FoldSplit& split) {
  std::ostringstream out;
  out << "sample_index,fold\n";
  for (std::size_t i = 0; i < split.fold.size(); ++i) out << i << ',' << split.fold[i] << '\n';
  return out.str();
}

}  // namespace lumipower
