#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "lumipower/csv.hpp"
#include "lumipower/error.hpp"
#include "lumipower/image.hpp"
#include "lumipower/synth.hpp"
#include "temp_dir.hpp"

using namespace lumipower;
using lumipower::testing::TempDir;

namespace {

SyntheticModuleConfig small_config(std::uint64_t seed) {
  SyntheticModuleConfig c;
  c.cell_px = 16;
  c.margin_px = 4;
  c.rng_seed = seed;
  return c;
}

}  // namespace

TEST(ImageIo, PngRoundTrip16And8Bit) {
  TempDir dir("png");
  GrayImage16 img(3, 5);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint16_t>(i * 4099 + 7);
  write_png(dir / "a.png", img);
  const GrayImage16 back = read_image(dir / "a.png");
  EXPECT_EQ(back.height, 3u);
  EXPECT_EQ(back.width, 5u);
  EXPECT_EQ(back.pixels, img.pixels);

  GrayImage8 mask(2, 2);
  mask.pixels = {0, 255, 17, 3};
  write_png(dir / "m.png", mask);
  const GrayImage16 mback = read_image(dir / "m.png");
  EXPECT_EQ(mback.pixels, (std::vector<std::uint16_t>{0, 255, 17, 3}));
}

TEST(ImageIo, ReadsPgm) {
  TempDir dir("pgm");
  {
    std::ofstream out(dir / "a.pgm", std::ios::binary);
    out << "P5\n# comment\n2 2\n65535\n";
    const unsigned char raw[] = {0x00, 0x01, 0x12, 0x34, 0xff, 0xff, 0x00, 0x00};
    out.write(reinterpret_cast<const char*>(raw), sizeof raw);
  }
  const GrayImage16 img = read_image(dir / "a.pgm");
  EXPECT_EQ(img.pixels, (std::vector<std::uint16_t>{1, 0x1234, 65535, 0}));
  {
    std::ofstream out(dir / "b.pgm");
    out << "P2\n3 1\n255\n1 2 3\n";
  }
  EXPECT_EQ(read_image(dir / "b.pgm").pixels, (std::vector<std::uint16_t>{1, 2, 3}));
  EXPECT_THROW(read_image(dir / "missing.png"), DataError);
  {
    std::ofstream out(dir / "junk.png");
    out << "not an image";
  }
  EXPECT_THROW(read_image(dir / "junk.png"), DataError);
}

TEST(Presets, SixTypesWithTwoGeometries) {
  const auto& p = module_presets();
  ASSERT_EQ(p.size(), 6u);
  std::set<std::pair<std::size_t, std::size_t>> geometries;
  for (const auto& m : p) {
    geometries.insert({m.rows, m.cols});
    EXPECT_GE(m.nominal_power_wp, 230.0);
    EXPECT_LE(m.nominal_power_wp, 345.0);
    EXPECT_TRUE(m.rows * m.cols == 60 || m.rows * m.cols == 72);
  }
  EXPECT_EQ(geometries.size(), 2u);
  EXPECT_EQ(module_preset("C").cols, 12u);
  EXPECT_EQ(module_preset("A").cols, 10u);
  EXPECT_THROW(module_preset("Z"), DataError);
}

TEST(GenerateSample, NoDefectsMeansNominalPower) {
  SyntheticModuleConfig c = small_config(3);
  c.defect_density = 0.0;
  const SyntheticSample s = generate_sample(c);
  for (double f : s.truth.inactive_fraction) EXPECT_EQ(f, 0.0);
  for (double w : s.truth.loss_wp) EXPECT_EQ(w, 0.0);
  EXPECT_EQ(s.truth.y, 1.0);
  EXPECT_EQ(s.truth.p_mpp_wp, c.nominal_power_wp);
}

TEST(GenerateSample, OneFullyInactiveCell) {
  SyntheticModuleConfig c = small_config(4);
  c.defect_density = 0.0;
  DefectLayout layout = sample_layout(c);
  layout.regions[13].push_back(InactiveRegion{0, 0, c.cell_px, c.cell_px, false, 0.3});
  const SyntheticSample s = render_sample(c, layout);
  EXPECT_EQ(s.truth.fraction(1, 3), 1.0);
  EXPECT_NEAR(s.truth.y, 1.0 - 1.0 / 60.0, 1e-15);
  EXPECT_NEAR(s.truth.y, 0.9833, 5e-5);
  EXPECT_NEAR(s.truth.loss_wp[13], -240.0 / 60.0, 1e-12);
}

TEST(GenerateSample, SeedDeterminism) {
  const SyntheticModuleConfig c = small_config(77);
  const SyntheticSample a = generate_sample(c), b = generate_sample(c);
  EXPECT_EQ(a.image.pixels, b.image.pixels);
  EXPECT_EQ(a.mask.pixels, b.mask.pixels);
  EXPECT_EQ(a.truth.inactive_fraction, b.truth.inactive_fraction);
  EXPECT_EQ(a.truth.y, b.truth.y);
  SyntheticModuleConfig other = c;
  other.rng_seed = 78;
  EXPECT_NE(generate_sample(other).image.pixels, a.image.pixels);
}

TEST(GenerateSample, RejectsTinyCells) {
  SyntheticModuleConfig c = small_config(1);
  c.cell_px = 7;
  EXPECT_THROW(generate_sample(c), DataError);
  c.cell_px = 8;
  EXPECT_NO_THROW(generate_sample(c));
}

TEST(GenerateSample, IntensityRangeAndSize) {
  const SyntheticModuleConfig c = small_config(5);
  const SyntheticSample s = generate_sample(c);
  EXPECT_EQ(s.image.height, 6 * 16 + 8u);
  EXPECT_EQ(s.image.width, 10 * 16 + 8u);
  for (auto v : s.image.pixels) EXPECT_LE(v, 28000);
}

// Properties over many samples.

TEST(SynthProperties, MaskCountReproducesTruth) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    SyntheticModuleConfig c = small_config(seed);
    if (seed % 3 == 0) c.apply(module_preset("C"));
    const SyntheticSample s = generate_sample(c);
    const GroundTruth recount = truth_from_mask(s.mask, c);
    EXPECT_EQ(recount.inactive_fraction, s.truth.inactive_fraction) << seed;
    EXPECT_EQ(recount.y, s.truth.y);
  }
}

TEST(SynthProperties, PowerRatioEqualsRelativePower) {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    SyntheticModuleConfig c = small_config(seed);
    c.apply(module_presets()[seed % 6]);
    const GroundTruth t = generate_sample(c).truth;
    EXPECT_EQ(t.p_mpp_wp / t.p_nom_wp, t.y);
    double acc = 0.0;
    for (double f : t.inactive_fraction) acc += f;
    EXPECT_NEAR(t.y, 1.0 - acc / static_cast<double>(t.rows * t.cols), 1e-15);
    EXPECT_GT(t.y, 0.0);
    EXPECT_LE(t.y, 1.0);
    for (double w : t.loss_wp) EXPECT_LE(w, 0.0);
  }
}

TEST(SynthProperties, BrightDefectsDoNotChangeTruth) {
  double inactive_sum = 0, active_sum = 0;
  std::size_t inactive_n = 0, active_n = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SyntheticModuleConfig dark = small_config(seed);
    dark.intensity_ambiguity = 0.0;
    SyntheticModuleConfig bright = dark;
    bright.intensity_ambiguity = 1.0;
    const SyntheticSample a = generate_sample(dark), b = generate_sample(bright);
    EXPECT_EQ(a.truth.inactive_fraction, b.truth.inactive_fraction);
    EXPECT_EQ(a.truth.y, b.truth.y);
    const std::size_t m = bright.margin_px;
    for (std::size_t r = m; r + m < b.image.height; ++r)
      for (std::size_t col = m; col + m < b.image.width; ++col) {
        if (b.mask.at(r, col)) {
          inactive_sum += b.image.at(r, col);
          ++inactive_n;
        } else {
          active_sum += b.image.at(r, col);
          ++active_n;
        }
      }
  }
  ASSERT_GT(inactive_n, 0u);
  EXPECT_GE(inactive_sum / inactive_n, active_sum / active_n);
}

TEST(SynthProperties, MeanRelativePowerMatchesSamplerExpectation) {
  DatasetConfig d;
  d.base.cell_px = 16;
  d.base.rng_seed = 2024;
  const double expected = expected_relative_power(d.base);
  const std::size_t n = 500;
  double sum = 0, sq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const SyntheticModuleConfig c = sample_config(d, i);
    const DefectLayout layout = sample_layout(c);
    const double y = render_sample(c, layout).truth.y;
    sum += y;
    sq += y * y;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / (n - 1));
  EXPECT_LT(std::fabs(mean - expected), 3.0 * se) << "mean " << mean << " expected " << expected;
}

TEST(SynthProperties, DefaultDensityKeepsRelativePowerInRange) {
  DatasetConfig d;
  d.base.cell_px = 16;
  for (std::size_t i = 0; i < 300; ++i) {
    const double y = render_sample(sample_config(d, i), sample_layout(sample_config(d, i))).truth.y;
    EXPECT_GE(y, 0.6);
    EXPECT_LE(y, 1.0);
  }
}

TEST(GenerateDataset, FiftyFourSampleManifest) {
  TempDir dir("ds54");
  DatasetConfig d;
  d.base.cell_px = 8;
  d.base.margin_px = 2;
  const auto rows = generate_dataset(d, 54, dir.path());
  const CsvTable table = read_csv(dir / "manifest.csv");
  EXPECT_EQ(table.header, split_csv_line(kManifestHeader));
  ASSERT_EQ(table.rows.size(), 54u);
  std::set<std::string> geometries, types;
  for (std::size_t i = 0; i < 54; ++i) {
    geometries.insert(table.rows[i][5] + "x" + table.rows[i][6]);
    types.insert(table.rows[i][4]);
    EXPECT_TRUE(std::filesystem::exists(dir / table.rows[i][0]));
    EXPECT_EQ(parse_double(table.rows[i][1], "y"), rows[i].y);
  }
  EXPECT_GE(geometries.size(), 2u);
  EXPECT_EQ(types.size(), 6u);
  // Cell table written next to each image matches the generator's truth.
  const GroundTruth t = read_cell_csv(dir / "sample_0007_cells.csv", rows[7].rows, rows[7].cols, rows[7].p_nom_wp);
  EXPECT_EQ(t.y, rows[7].y);
  const GrayImage16 mask = read_image(dir / "sample_0007_mask.png");
  SyntheticModuleConfig c = sample_config(d, 7);
  GrayImage8 m8(mask.height, mask.width);
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) m8.pixels[i] = static_cast<std::uint8_t>(mask.pixels[i]);
  EXPECT_EQ(truth_from_mask(m8, c).inactive_fraction, t.inactive_fraction);
}

TEST(GenerateDataset, SingleSampleAndSerialParallelAgreement) {
  TempDir a("ds1"), b("ds1b");
  DatasetConfig d;
  d.base.cell_px = 8;
  const auto rows = generate_dataset(d, 1, a.path());
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_TRUE(std::filesystem::exists(a / rows[0].path));
  EXPECT_EQ(read_csv(a / "manifest.csv").rows.size(), 1u);

  generate_dataset(d, 5, b.path());
  for (std::size_t i = 0; i < 5; ++i) {
    const SyntheticSample s = generate_sample(sample_config(d, i));
    char name[32];
    std::snprintf(name, sizeof name, "sample_%04zu.png", i);
    EXPECT_EQ(read_image(b / name).pixels, s.image.pixels);
  }
}

TEST(GenerateDataset, UnwritableDirectoryFails) {
  TempDir dir("blocked");
  { std::ofstream(dir / "file") << "x"; }
  DatasetConfig d;
  d.base.cell_px = 8;
  EXPECT_THROW(generate_dataset(d, 2, dir / "file" / "sub"), DataError);
  EXPECT_THROW(generate_dataset(d, 0, dir / "ok"), DataError);
}
