#include "lumipower/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "lumipower/csv.hpp"
#include "lumipower/error.hpp"
#include "lumipower/exact_sum.hpp"

namespace lumipower {

namespace {

void check_pairs(const std::vector<double>& y_hat, const std::vector<double>& y, const char* what) {
  if (y_hat.size() != y.size()) throw ShapeError(std::string(what) + ": prediction and target counts differ");
  if (y.empty()) throw DataError(std::string(what) + ": no samples");
}

// Sample standard deviation (n - 1); 0 for a single value.
double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  ExactSum s;
  for (double x : v) s.add((x - m) * (x - m));
  return std::sqrt(s.round() / static_cast<double>(v.size() - 1));
}

struct Errors {
  double mae_rel, mae_wp, rmse_rel, rmse_wp;
};

Errors errors_of(const std::vector<const SamplePrediction*>& s) {
  ExactSum abs_rel, abs_wp, sq_rel, sq_wp;
  for (const auto* p : s) {
    const double d = p->y_hat - p->y;
    const double dw = d * p->p_nom_wp;
    abs_rel.add(std::fabs(d));
    abs_wp.add(std::fabs(dw));
    sq_rel.add(d * d);
    sq_wp.add(dw * dw);
  }
  const double n = static_cast<double>(s.size());
  return {abs_rel.round() / n, abs_wp.round() / n, std::sqrt(sq_rel.round() / n), std::sqrt(sq_wp.round() / n)};
}

template <class E>
[[noreturn]] void rethrow_with(const std::string& context, const E& e) {
  throw E(context + ": " + e.what());
}

// Runs `fn`, prefixing `context` to any library error while keeping its type.
template <class F>
void in_context(const std::string& context, F&& fn) {
  try {
    fn();
  } catch (const ChecksumError& e) {
    rethrow_with(context, e);
  } catch (const VersionError& e) {
    rethrow_with(context, e);
  } catch (const ShapeError& e) {
    rethrow_with(context, e);
  } catch (const DataError& e) {
    rethrow_with(context, e);
  } catch (const NumericError& e) {
    rethrow_with(context, e);
  } catch (const Error& e) {
    rethrow_with(context, e);
  }
}

}  // namespace

double mean_of(const std::vector<double>& values) {
  if (values.empty()) throw DataError("mean of an empty set");
  return exact_sum(values) / static_cast<double>(values.size());
}

double mae(const std::vector<double>& y_hat, const std::vector<double>& y) {
  check_pairs(y_hat, y, "mae");
  ExactSum s;
  for (std::size_t i = 0; i < y.size(); ++i) s.add(std::fabs(y_hat[i] - y[i]));
  return s.round() / static_cast<double>(y.size());
}

double rmse(const std::vector<double>& y_hat, const std::vector<double>& y) {
  check_pairs(y_hat, y, "rmse");
  ExactSum s;
  for (std::size_t i = 0; i < y.size(); ++i) s.add((y_hat[i] - y[i]) * (y_hat[i] - y[i]));
  return std::sqrt(s.round() / static_cast<double>(y.size()));
}

EvalSummary summarize(std::string variant, std::vector<SamplePrediction> samples) {
  if (samples.empty()) throw DataError("summarize: no predictions for '" + variant + "'");
  std::sort(samples.begin(), samples.end(),
            [](const SamplePrediction& a, const SamplePrediction& b) { return a.index < b.index; });
  EvalSummary s;
  s.variant = std::move(variant);
  s.samples = std::move(samples);

  std::vector<const SamplePrediction*> all;
  std::set<int> folds;
  std::vector<double> abs_rel, abs_wp;
  for (const auto& p : s.samples) {
    all.push_back(&p);
    folds.insert(p.fold);
    abs_rel.push_back(std::fabs(p.y_hat - p.y));
    abs_wp.push_back(std::fabs((p.y_hat - p.y) * p.p_nom_wp));
  }
  const Errors joined = errors_of(all);
  s.mae_pct = 100.0 * joined.mae_rel;
  s.mae_wp = joined.mae_wp;
  s.rmse_pct = 100.0 * joined.rmse_rel;
  s.rmse_wp = joined.rmse_wp;
  s.abs_err_std_pct = 100.0 * sample_std(abs_rel);
  s.abs_err_std_wp = sample_std(abs_wp);

  for (int f : folds) {
    std::vector<const SamplePrediction*> members;
    for (const auto& p : s.samples)
      if (p.fold == f) members.push_back(&p);
    const Errors e = errors_of(members);
    s.folds.push_back(f);
    s.fold_size.push_back(members.size());
    s.fold_mae_pct.push_back(100.0 * e.mae_rel);
    s.fold_mae_wp.push_back(e.mae_wp);
    s.fold_rmse_pct.push_back(100.0 * e.rmse_rel);
    s.fold_rmse_wp.push_back(e.rmse_wp);
  }
  s.mae_std_pct = sample_std(s.fold_mae_pct);
  s.mae_std_wp = sample_std(s.fold_mae_wp);
  return s;
}

EvalSummary baseline_mean_predictor(const std::vector<double>& train_y, const std::vector<double>& test_y,
                                    const std::vector<double>& test_p_nom) {
  if (train_y.empty()) throw DataError("baseline: empty training split");
  if (test_y.empty()) throw DataError("baseline: empty test split");
  if (!test_p_nom.empty() && test_p_nom.size() != test_y.size()) {
    throw ShapeError("baseline: nominal power count differs from test count");
  }
  const double mu = mean_of(train_y);
  std::vector<SamplePrediction> preds;
  for (std::size_t i = 0; i < test_y.size(); ++i) {
    SamplePrediction p;
    p.index = i;
    p.y = test_y[i];
    p.y_hat = mu;
    p.p_nom_wp = test_p_nom.empty() ? 1.0 : test_p_nom[i];
    p.p_mpp_wp = p.y * p.p_nom_wp;
    preds.push_back(p);
  }
  return summarize("baseline", std::move(preds));
}

CvResult run_cross_validation(const std::vector<ModuleSample>& samples, const PreparedSet& data,
                              const CvConfig& config, const CvLog& log) {
  if (samples.size() != data.size() || data.y.size() != data.size()) {
    throw DataError("cross-validation: manifest has " + std::to_string(samples.size()) + " samples but " +
                    std::to_string(data.size()) + " prepared images");
  }
  if (config.variants.empty()) throw DataError("cross-validation: no model variants");
  CvResult result;
  result.split = stratified_three_fold(data.y, config.fold_seed);
  const Normalization global = config.stats_over_all ? fit_normalization(data.images) : Normalization{};

  std::vector<SamplePrediction> template_preds(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& p = template_preds[i];
    p.index = i;
    p.fold = result.split.fold[i];
    p.y = data.y[i];
    p.p_nom_wp = samples[i].p_nom_wp;
    p.p_mpp_wp = samples[i].p_mpp_wp;
    p.module_type = samples[i].module_type;
  }

  std::vector<SamplePrediction> baseline = template_preds;
  for (int f = 0; f < kFolds; ++f) {
    in_context("fold " + std::to_string(f), [&] {
      const auto train_idx = result.split.complement(f);
      std::vector<double> train_y;
      for (std::size_t i : train_idx) train_y.push_back(data.y[i]);
      const double mu = mean_of(train_y);
      for (std::size_t i : result.split.members(f)) baseline[i].y_hat = mu;
      result.normalization.push_back(config.stats_over_all ? global
                                                           : fit_normalization(data.subset(train_idx).images));
    });
  }
  result.baseline = summarize("baseline", std::move(baseline));

  for (const CvVariant& variant : config.variants) {
    const PreparedSet& images = variant.data ? *variant.data : data;
    if (images.size() != data.size() || images.y != data.y)
      throw DataError("cross-validation: images for " + variant.name + " do not match the manifest");
    CvVariantResult vr;
    std::vector<SamplePrediction> preds = template_preds;
    if (variant.spec.head == HeadKind::regression_map) vr.maps.resize(samples.size());
    for (int f = 0; f < kFolds; ++f) {
      const std::string context = variant.name + " fold " + std::to_string(f);
      in_context(context, [&] {
        const auto train_idx = result.split.complement(f);
        const auto test_idx = result.split.members(f);
        const PreparedSet train_set = images.subset(train_idx);
        const PreparedSet test_set = images.subset(test_idx);
        Normalization norm = result.normalization[f];
        if (&images != &data)
          norm = config.stats_over_all ? fit_normalization(images.images) : fit_normalization(train_set.images);
        if (log) log("training " + context + " on " + std::to_string(train_idx.size()) + " samples");
        TrainResult trained = train(train_set, &test_set, variant.spec, variant.train, norm);
        const std::size_t bs = variant.train.batch_size;
        if (variant.spec.head == HeadKind::regression_map) {
          auto maps = predict_maps(trained.model, test_set.images, trained.normalization, bs);
          for (std::size_t k = 0; k < test_idx.size(); ++k) {
            preds[test_idx[k]].y_hat = maps[k].y_hat;
            vr.maps[test_idx[k]] = std::move(maps[k]);
          }
        } else {
          const auto y_hat = predict_relative(trained.model, test_set.images, trained.normalization, bs);
          for (std::size_t k = 0; k < test_idx.size(); ++k) preds[test_idx[k]].y_hat = y_hat[k];
        }
        for (std::size_t i : test_idx) {
          if (!std::isfinite(preds[i].y_hat)) throw NumericError("non-finite prediction for sample " + std::to_string(i));
        }
        if (log) {
          std::ostringstream msg;
          msg << context << " done: final train loss " << format_double(trained.report.train_loss.back())
              << ", test MAE " << format_double(trained.report.val_mae.back());
          log(msg.str());
        }
        vr.reports.push_back(trained.report);
        if (config.keep_models) vr.models.push_back(std::move(trained));
      });
    }
    vr.summary = summarize(variant.name, std::move(preds));
    vr.beats_baseline = vr.summary.mae_pct < result.baseline.mae_pct;
    if (log && !vr.beats_baseline) {
      log("warning: " + variant.name + " does not beat the mean-predictor baseline");
    }
    result.variants.push_back(std::move(vr));
  }
  return result;
}

std::string summary_csv(const std::vector<EvalSummary>& summaries) {
  std::ostringstream out;
  out << "variant,mae_pct,mae_std_pct,mae_wp,mae_std_wp,rmse_pct,rmse_wp\n";
  for (const auto& s : summaries) {
    out << s.variant << ',' << format_double(s.mae_pct) << ',' << format_double(s.mae_std_pct) << ','
        << format_double(s.mae_wp) << ',' << format_double(s.mae_std_wp) << ',' << format_double(s.rmse_pct) << ','
        << format_double(s.rmse_wp) << '\n';
  }
  return out.str();
}

std::string scatter_csv(const EvalSummary& summary, double band_wp) {
  std::ostringstream out;
  out << "p_mpp_true_wp,p_mpp_pred_wp,module_type,fold,outside_band\n";
  for (const auto& p : summary.samples) {
    const double pred = p.p_mpp_pred_wp();
    out << format_double(p.p_mpp_wp) << ',' << format_double(pred) << ',' << p.module_type << ',' << p.fold << ','
        << (std::fabs(pred - p.p_mpp_wp) > band_wp ? 1 : 0) << '\n';
  }
  return out.str();
}

std::string fold_metrics_csv(const std::vector<EvalSummary>& summaries) {
  std::ostringstream out;
  out << "variant,fold,n,mae_pct,mae_wp,rmse_pct,rmse_wp\n";
  for (const auto& s : summaries)
    for (std::size_t k = 0; k < s.folds.size(); ++k)
      out << s.variant << ',' << s.folds[k] << ',' << s.fold_size[k] << ',' << format_double(s.fold_mae_pct[k]) << ','
          << format_double(s.fold_mae_wp[k]) << ',' << format_double(s.fold_rmse_pct[k]) << ','
          << format_double(s.fold_rmse_wp[k]) << '\n';
  return out.str();
}

std::string predictions_csv(const std::vector<EvalSummary>& summaries) {
  std::ostringstream out;
  out << "variant,sample_index,fold,module_type,y,y_hat,p_nom_wp\n";
  for (const auto& s : summaries)
    for (const auto& p : s.samples)
      out << s.variant << ',' << p.index << ',' << p.fold << ',' << p.module_type << ',' << format_double(p.y) << ','
          << format_double(p.y_hat) << ',' << format_double(p.p_nom_wp) << '\n';
  return out.str();
}

void write_cv_outputs(const CvResult& result, const std::filesystem::path& dir, double band_wp) {
  std::vector<EvalSummary> all;
  for (const auto& v : result.variants) all.push_back(v.summary);
  all.push_back(result.baseline);
  write_file_atomic(dir / "summary.csv", summary_csv(all));
  for (const auto& s : all) write_file_atomic(dir / ("scatter_" + s.variant + ".csv"), scatter_csv(s, band_wp));
  write_file_atomic(dir / "folds.csv", folds_csv(result.split));
  write_file_atomic(dir / "fold_metrics.csv", fold_metrics_csv(all));
  write_file_atomic(dir / "predictions.csv", predictions_csv(all));

  std::ostringstream checks;
  checks << "variant,abs_err_std_pct,abs_err_std_wp,beats_baseline\n";
  for (const auto& v : result.variants)
    checks << v.summary.variant << ',' << format_double(v.summary.abs_err_std_pct) << ','
           << format_double(v.summary.abs_err_std_wp) << ',' << (v.beats_baseline ? "true" : "false") << '\n';
  checks << "baseline," << format_double(result.baseline.abs_err_std_pct) << ','
         << format_double(result.baseline.abs_err_std_wp) << ",\n";
  write_file_atomic(dir / "checks.csv", checks.str());

  for (const auto& v : result.variants)
    for (std::size_t f = 0; f < v.reports.size(); ++f)
      write_file_atomic(dir / ("train_" + v.summary.variant + "_fold" + std::to_string(f) + ".csv"),
                        report_csv(v.reports[f]));
}

}  // namespace lumipower
