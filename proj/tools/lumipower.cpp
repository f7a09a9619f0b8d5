// Command-line front end: synth, train, cv, predict, map, report.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "lumipower/csv.hpp"
#include "lumipower/error.hpp"
#include "lumipower/evaluation.hpp"
#include "lumipower/persistence.hpp"
#include "lumipower/powermaps.hpp"
#include "lumipower/synth.hpp"
#include "lumipower/train.hpp"

namespace fs = std::filesystem;
using namespace lumipower;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

RunConfig load_config(const std::string& path) { return path.empty() ? RunConfig{} : RunConfig::load(path); }

std::string lock_text(const std::string& command, const std::vector<std::pair<std::string, std::string>>& args,
                      const std::string& config_text) {
  std::ostringstream out;
  out << "command=" << command << '\n';
  for (const auto& [k, v] : args) out << "arg." << k << '=' << v << '\n';
  out << config_text;
  return out.str();
}

// Output directory written under a sibling temporary name and moved into
// place once complete.
class StagedDir {
 public:
  explicit StagedDir(fs::path target) : target_(std::move(target)) {
    if (target_.filename().empty()) target_ = target_.parent_path();
    staging_ = target_;
    staging_ += ".partial";
    std::error_code ec;
    fs::remove_all(staging_, ec);
    fs::create_directories(staging_, ec);
    if (ec) throw DataError("cannot create output directory '" + staging_.string() + "'");
  }
  ~StagedDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }
  const fs::path& path() const { return staging_; }

  void commit() {
    std::error_code ec;
    fs::path old = target_;
    old += ".old";
    fs::remove_all(old, ec);
    if (fs::exists(target_)) fs::rename(target_, old, ec);
    if (ec) throw DataError("cannot replace '" + target_.string() + "'");
    fs::rename(staging_, target_, ec);
    if (ec) throw DataError("cannot move output into '" + target_.string() + "'");
    fs::remove_all(old, ec);
    committed_ = true;
  }

 private:
  fs::path target_, staging_;
  bool committed_ = false;
};

void log_line(const std::string& message) { std::cerr << message << std::endl; }

std::pair<std::size_t, std::size_t> grid_or_default(const std::string& text) {
  return text.empty() ? std::make_pair(std::size_t{6}, std::size_t{10}) : parse_grid(text);
}

InputGeometry geometry_of(const ModelSpec& spec) {
  InputGeometry g;
  g.height = spec.input_height;
  g.width = spec.input_width;
  g.stride = spec.output_stride();
  return g;
}

Tensor load_input(const std::string& image, const ModelSpec& spec, std::size_t rows, std::size_t cols) {
  return prepare_image(read_image(image), geometry_of(spec), rows, cols);
}

int cmd_synth(const std::string& config_path, const std::string& out, std::size_t n) {
  const RunConfig config = load_config(config_path);
  StagedDir dir(out);
  generate_dataset(config.synth, n, dir.path());
  write_file_atomic(dir.path() / "run.lock", lock_text("synth", {{"n", std::to_string(n)}}, config.serialize()));
  dir.commit();
  std::cout << "wrote " << n << " samples to " << out << "\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& manifest, const std::string& out) {
  const RunConfig config = load_config(config_path);
  const auto samples = load_manifest(manifest);
  const HeadKind head = config.model.head;
  const PreparedSet data = prepare_dataset(samples, config.geometry(head));
  const Normalization norm = fit_normalization(data.images);
  std::vector<NamedTensor> init;
  if (config.init != "random") init = load_checkpoint(config.init).tensors;
  log_line("training " + to_string(head) + " on " + std::to_string(data.size()) + " samples");
  TrainResult result = train(data, nullptr, config.spec_for(head), config.train_for(head), norm,
                             init.empty() ? nullptr : &init);

  Checkpoint ckpt;
  ckpt.spec = result.model.spec();
  ckpt.tensors = result.model.state();
  ckpt.optimizer = result.optimizer.state();
  std::ostringstream echo;
  echo << "norm.mean=" << format_double(norm.mean) << "\nnorm.stddev=" << format_double(norm.stddev) << '\n'
       << config.serialize();
  ckpt.config_echo = echo.str();
  const fs::path ckpt_path(out);
  if (ckpt_path.has_parent_path()) fs::create_directories(ckpt_path.parent_path());
  save_checkpoint(ckpt_path, ckpt);
  fs::path report = ckpt_path;
  report += ".report.csv";
  write_file_atomic(report, report_csv(result.report));
  fs::path lock = ckpt_path;
  lock += ".run.lock";
  write_file_atomic(lock, lock_text("train", {{"manifest", manifest}}, config.serialize()));
  std::cout << "final train loss " << format_double(result.report.train_loss.back()) << "\n"
            << "wrote " << out << "\n";
  return kExitOk;
}

std::string localization_csv(const CvResult& result, const std::vector<ModuleSample>& samples,
                             const ModelSpec& map_spec) {
  std::ostringstream out;
  out << "sample_index,module_type,defective_cells,spearman\n";
  const CvVariantResult* map_variant = nullptr;
  for (const auto& v : result.variants)
    if (!v.maps.empty()) map_variant = &v;
  if (!map_variant) return out.str();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const fs::path cells = cell_csv_path(samples[i].image_path);
    if (!map_variant->maps[i] || !fs::exists(cells)) continue;
    const GroundTruth truth = read_cell_csv(cells, samples[i].rows, samples[i].cols, samples[i].p_nom_wp);
    const RegressionMap& map = map_variant->maps[i]->map;
    const CellGrid grid = CellGrid::fit(samples[i].rows, samples[i].cols, map_spec.map_height(), map_spec.map_width());
    const CellLossTable table = integrate_cells(map, grid, samples[i].p_nom_wp);
    std::size_t defective = 0;
    for (double f : truth.inactive_fraction) defective += f > 0.0;
    out << i << ',' << samples[i].module_type << ',' << defective << ',';
    try {
      out << format_double(localization_score(table, truth));
    } catch (const DataError&) {
      // undefined for constant predictions or defect-free modules
    }
    out << '\n';
  }
  return out.str();
}

int cmd_cv(const std::string& config_path, const std::string& manifest, const std::string& out) {
  const RunConfig config = load_config(config_path);
  const auto samples = load_manifest(manifest);
  const InputGeometry shared = config.geometry(HeadKind::embedding_linear);
  const PreparedSet data = prepare_dataset(samples, shared);
  std::optional<PreparedSet> map_data;
  const InputGeometry map_geometry = config.geometry(HeadKind::regression_map);
  if (map_geometry.height != shared.height || map_geometry.width != shared.width)
    map_data = prepare_dataset(samples, map_geometry);
  CvConfig cv;
  cv.fold_seed = config.data.fold_seed;
  cv.stats_over_all = config.data.stats_over_all;
  for (HeadKind head : {HeadKind::embedding_linear, HeadKind::regression_map}) {
    const PreparedSet* own = head == HeadKind::regression_map && map_data ? &*map_data : nullptr;
    cv.variants.push_back({to_string(head), config.spec_for(head), config.train_for(head), own});
  }
  const CvResult result = run_cross_validation(samples, data, cv, log_line);

  StagedDir dir(out);
  write_cv_outputs(result, dir.path(), config.scatter_band_wp);
  std::vector<EvalSummary> all;
  for (const auto& v : result.variants) all.push_back(v.summary);
  all.push_back(result.baseline);
  write_file_atomic(dir.path() / "localization.csv",
                    localization_csv(result, samples, config.spec_for(HeadKind::regression_map)));
  write_file_atomic(dir.path() / "run.lock", lock_text("cv", {{"manifest", manifest}}, config.serialize()));
  dir.commit();
  std::cout << summary_csv(all);
  return kExitOk;
}

int cmd_predict(const std::string& ckpt_path, const std::string& image, double p_nom, const std::string& grid) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  PowerModel model = model_from_checkpoint(ckpt);
  const auto [rows, cols] = grid_or_default(grid);
  const Tensor x = load_input(image, ckpt.spec, rows, cols);
  const double y_hat = predict_relative(model, {x}, ckpt.normalization(), 1).front();
  const double p_mpp = y_hat * p_nom;
  std::printf("y_hat=%.17g\np_mpp_wp=%.17g\nP_mpp = %.1f Wp (y_hat %.4f x P_nom %.1f Wp)\n", y_hat, p_mpp, p_mpp, y_hat,
              p_nom);
  return kExitOk;
}

int cmd_map(const std::string& ckpt_path, const std::string& image, double p_nom, const std::string& grid_text,
            const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  if (ckpt.spec.head != HeadKind::regression_map) throw DataError("map needs a regression_map checkpoint");
  PowerModel model = model_from_checkpoint(ckpt);
  const auto [rows, cols] = parse_grid(grid_text);
  const Tensor x = load_input(image, ckpt.spec, rows, cols);
  const MapPrediction pred = predict_maps(model, {x}, ckpt.normalization(), 1).front();
  const CellGrid grid = CellGrid::fit(rows, cols, pred.map.height, pred.map.width);
  const CellLossTable table = integrate_cells(pred.map, grid, p_nom);

  StagedDir dir(out);
  export_map(pred.map, table, ckpt.spec.input_height, ckpt.spec.input_width, dir.path());
  write_file_atomic(dir.path() / "run.lock",
                    lock_text("map",
                              {{"ckpt", ckpt_path}, {"image", image}, {"p_nom", format_double(p_nom)}, {"grid", grid_text}},
                              ckpt.config_echo));
  dir.commit();
  std::printf("y_hat=%.17g\np_mpp_wp=%.17g\ncell losses (Wp):\n", pred.y_hat, pred.y_hat * p_nom);
  std::printf("   ");
  for (std::size_t c = 0; c < cols; ++c) std::printf("%7s", col_label(c).c_str());
  std::printf("\n");
  for (std::size_t r = 0; r < rows; ++r) {
    std::printf("%-3s", row_label(r).c_str());
    for (std::size_t c = 0; c < cols; ++c) std::printf("%7.2f", table.loss_wp[r * cols + c]);
    std::printf("\n");
  }
  return kExitOk;
}

int cmd_report(const std::string& dir_text) {
  const fs::path dir(dir_text);
  const CsvTable summary = read_csv(dir / "summary.csv");
  std::printf("%-18s %14s %14s %10s %10s\n", "variant", "MAE [%]", "MAE [Wp]", "RMSE [%]", "RMSE [Wp]");
  for (const auto& row : summary.rows) {
    const double v[6] = {parse_double(row[1], "mae_pct"), parse_double(row[2], "mae_std_pct"),
                         parse_double(row[3], "mae_wp"),  parse_double(row[4], "mae_std_wp"),
                         parse_double(row[5], "rmse_pct"), parse_double(row[6], "rmse_wp")};
    std::printf("%-18s %6.2f +- %5.2f %6.2f +- %5.2f %10.2f %10.2f\n", row[0].c_str(), v[0], v[1], v[2], v[3], v[4],
                v[5]);
  }
  if (fs::exists(dir / "checks.csv")) {
    for (const auto& row : read_csv(dir / "checks.csv").rows)
      if (row[3] == "false") std::printf("warning: %s does not beat the mean-predictor baseline\n", row[0].c_str());
  }
  if (fs::exists(dir / "scatter_regression_map.csv")) {
    const CsvTable scatter = read_csv(dir / "scatter_regression_map.csv");
    std::size_t outside = 0;
    for (const auto& row : scatter.rows) outside += row[4] == "1";
    std::printf("regression_map: %zu of %zu samples outside the band\n", outside, scatter.rows.size());
  }
  if (fs::exists(dir / "localization.csv")) {
    std::vector<double> rho;
    for (const auto& row : read_csv(dir / "localization.csv").rows)
      if (parse_index(row[2], "defective_cells") >= 3)
        rho.push_back(row[3].empty() ? 0.0 : parse_double(row[3], "spearman"));  // undefined counts as 0
    if (!rho.empty()) {
      std::sort(rho.begin(), rho.end());
      const std::size_t n = rho.size();
      const double median = n % 2 ? rho[n / 2] : 0.5 * (rho[n / 2 - 1] + rho[n / 2]);
      std::printf("localization: median Spearman %.3f over %zu modules with >= 3 defective cells\n", median, n);
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Power estimation and per-cell loss maps for solar module luminescence images"};
  app.require_subcommand(1);
  std::string config, out, manifest, ckpt, image, grid, dir;
  std::size_t n = 0;
  double p_nom = 0.0;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with ground truth");
  synth->add_option("--config", config, "Run configuration file");
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--n", n, "Number of samples")->required()->check(CLI::PositiveNumber);

  auto* trn = app.add_subcommand("train", "Train one model on a whole manifest");
  trn->add_option("--config", config, "Run configuration file");
  trn->add_option("--manifest", manifest, "Dataset manifest CSV")->required();
  trn->add_option("--out", out, "Checkpoint path")->required();

  auto* cv = app.add_subcommand("cv", "Three-fold cross-validation of both heads and the baseline");
  cv->add_option("--config", config, "Run configuration file");
  cv->add_option("--manifest", manifest, "Dataset manifest CSV")->required();
  cv->add_option("--out", out, "Output directory")->required();

  auto* predict = app.add_subcommand("predict", "Predict relative and absolute power for one image");
  predict->add_option("--ckpt", ckpt, "Checkpoint")->required();
  predict->add_option("--image", image, "PNG or PGM image")->required();
  predict->add_option("--p-nom", p_nom, "Nominal power in Wp")->required()->check(CLI::PositiveNumber);
  predict->add_option("--grid", grid, "Cell grid RxC (default 6x10)");

  auto* map = app.add_subcommand("map", "Export the regression map and per-cell losses");
  map->add_option("--ckpt", ckpt, "Checkpoint")->required();
  map->add_option("--image", image, "PNG or PGM image")->required();
  map->add_option("--p-nom", p_nom, "Nominal power in Wp")->required()->check(CLI::PositiveNumber);
  map->add_option("--grid", grid, "Cell grid RxC")->required();
  map->add_option("--out", out, "Output directory")->required();

  auto* report = app.add_subcommand("report", "Summarize a cross-validation output directory");
  report->add_option("--dir", dir, "Directory written by cv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(config, out, n);
    if (*trn) return cmd_train(config, manifest, out);
    if (*cv) return cmd_cv(config, manifest, out);
    if (*predict) return cmd_predict(ckpt, image, p_nom, grid);
    if (*map) return cmd_map(ckpt, image, p_nom, grid, out);
    if (*report) return cmd_report(dir);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
