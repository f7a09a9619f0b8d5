#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lumipower/data.hpp"
#include "lumipower/model.hpp"
#include "lumipower/train.hpp"

namespace lumipower {

// Mean absolute and root-mean-square error in the units of the inputs.
double mae(const std::vector<double>& y_hat, const std::vector<double>& y);
double rmse(const std::vector<double>& y_hat, const std::vector<double>& y);

struct SamplePrediction {
  std::size_t index = 0;  // manifest position
  int fold = 0;
  double y = 1.0;
  double y_hat = 1.0;
  double p_nom_wp = 0.0;
  double p_mpp_wp = 0.0;  // measured power
  std::string module_type;

  double p_mpp_pred_wp() const { return y_hat * p_nom_wp; }
};

struct EvalSummary {
  std::string variant;
  // Joined metrics over every sample; percent of nominal power and Wp.
  double mae_pct = 0.0, mae_wp = 0.0, rmse_pct = 0.0, rmse_wp = 0.0;
  // Sample standard deviation of the per-fold MAE.
  double mae_std_pct = 0.0, mae_std_wp = 0.0;
  // Standard deviation of the per-sample absolute error.
  double abs_err_std_pct = 0.0, abs_err_std_wp = 0.0;
  std::vector<int> folds;  // fold ids present, ascending
  std::vector<double> fold_mae_pct, fold_mae_wp, fold_rmse_pct, fold_rmse_wp;
  std::vector<std::size_t> fold_size;
  std::vector<SamplePrediction> samples;  // sorted by index
};

EvalSummary summarize(std::string variant, std::vector<SamplePrediction> samples);

double mean_of(const std::vector<double>& values);

// Predicts mean(train_y) for every test sample. `test_p_nom` may be empty, in
// which case Wp metrics use 1 Wp per sample.
EvalSummary baseline_mean_predictor(const std::vector<double>& train_y, const std::vector<double>& test_y,
                                    const std::vector<double>& test_p_nom = {});

struct CvVariant {
  std::string name;
  ModelSpec spec;
  TrainConfig train;
  // Images prepared at this variant's input size; the shared set when null.
  const PreparedSet* data = nullptr;
};

struct CvConfig {
  std::vector<CvVariant> variants;
  std::uint64_t fold_seed = 0;
  // Fit normalization on all images instead of each training split.
  bool stats_over_all = false;
  bool keep_models = false;
};

struct CvVariantResult {
  EvalSummary summary;
  std::vector<TrainReport> reports;                 // per fold
  std::vector<std::optional<MapPrediction>> maps;  // per sample, map heads only
  std::vector<TrainResult> models;                 // per fold when keep_models
  bool beats_baseline = false;
};

struct CvResult {
  FoldSplit split;
  std::vector<Normalization> normalization;  // per fold
  std::vector<CvVariantResult> variants;
  EvalSummary baseline;
};

using CvLog = std::function<void(const std::string&)>;

// Three-fold cross-validation: one model per (variant, fold), each sample
// predicted exactly once, baseline on the same splits. Errors are rethrown
// with the variant and fold id prefixed.
CvResult run_cross_validation(const std::vector<ModuleSample>& samples, const PreparedSet& data,
                              const CvConfig& config, const CvLog& log = {});

constexpr double kScatterBandWp = 15.0;

std::string summary_csv(const std::vector<EvalSummary>& summaries);
std::string scatter_csv(const EvalSummary& summary, double band_wp = kScatterBandWp);
std::string fold_metrics_csv(const std::vector<EvalSummary>& summaries);
std::string predictions_csv(const std::vector<EvalSummary>& summaries);

// summary.csv, scatter_<variant>.csv, folds.csv, fold_metrics.csv,
// predictions.csv, checks.csv and train_<variant>_fold<k>.csv.
void write_cv_outputs(const CvResult& result, const std::filesystem::path& dir, double band_wp = kScatterBandWp);

}  // namespace lumipower
