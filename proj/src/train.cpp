#include "lumipower/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "lumipower/csv.hpp"
#include "lumipower/error.hpp"
#include "lumipower/exact_sum.hpp"
#include "lumipower/parallel.hpp"
#include "lumipower/random.hpp"

namespace lumipower {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw DataError("learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw DataError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw DataError("weight_decay must be >= 0");
  if (batch_size == 0) throw DataError("batch_size must be at least 1");
}

std::string to_string(LrSchedule schedule) { return schedule == LrSchedule::cosine ? "cosine" : "constant"; }

LrSchedule parse_lr_schedule(std::string_view text) {
  if (text == "constant") return LrSchedule::constant;
  if (text == "cosine") return LrSchedule::cosine;
  throw DataError("unknown learning-rate schedule '" + std::string(text) + "'");
}

double TrainConfig::learning_rate_at(std::size_t epoch) const {
  if (lr_schedule == LrSchedule::constant || epochs == 0) return learning_rate;
  const double t = static_cast<double>(epoch) / static_cast<double>(epochs);
  return learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

std::string serialize(const TrainConfig& c) {
  std::ostringstream out;
  out << "augment=" << (c.augment ? "true" : "false") << "\nbatch_size=" << c.batch_size
      << "\nepochs=" << c.epochs << "\neval_every=" << c.eval_every
      << "\nlearning_rate=" << format_double(c.learning_rate) << "\nlr_schedule=" << to_string(c.lr_schedule)
      << "\nmomentum=" << format_double(c.momentum)
      << "\nrecalibrate_bn=" << (c.recalibrate_bn ? "true" : "false") << "\nseed=" << c.seed << "\nweight_decay=" << format_double(c.weight_decay) << "\n";
  return out.str();
}

Tensor mse_loss(const Tensor& y_hat, const Tensor& y) {
  if (y_hat.numel() != y.numel() || y_hat.shape() != y.shape()) {
    throw ShapeError("mse_loss: prediction shape " + to_string(y_hat.shape()) + " vs target " + to_string(y.shape()));
  }
  if (y.numel() == 0) throw ShapeError("mse_loss: empty batch");
  const Tensor d = sub(y_hat, y);
  return mean(mul(d, d));
}

Sgd::Sgd(double learning_rate, double momentum, double weight_decay)
    : lr_(learning_rate), momentum_(momentum), decay_(weight_decay) {}

void Sgd::step(std::vector<Parameter>& params) {
  if (velocity_.empty()) {
    for (const auto& p : params) {
      names_.push_back(p.name);
      velocity_.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (velocity_.size() != params.size()) throw ShapeError("Sgd: parameter list changed between steps");
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = params[k];
    auto values = p.tensor.mutable_values();
    auto& v = velocity_[k];
    if (v.size() != values.size()) throw ShapeError("Sgd: parameter '" + p.name + "' changed size");
    const double lambda = decays(p.kind) ? decay_ : 0.0;
    const bool has = p.tensor.has_grad();
    const auto g = has ? p.tensor.grad() : std::span<const double>{};
    for (std::size_t i = 0; i < values.size(); ++i) {
      v[i] = momentum_ * v[i] + (has ? g[i] : 0.0);
      values[i] -= lr_ * (v[i] + lambda * values[i]);
    }
  }
  ++steps_;
}

std::vector<NamedTensor> Sgd::state() const {
  std::vector<NamedTensor> out;
  for (std::size_t k = 0; k < velocity_.size(); ++k)
    out.push_back({names_[k] + ".momentum", Tensor({velocity_[k].size()}, velocity_[k])});
  out.push_back({"sgd.steps", Tensor::scalar(static_cast<double>(steps_))});
  return out;
}

void Sgd::load_state(const std::vector<NamedTensor>& tensors) {
  names_.clear();
  velocity_.clear();
  steps_ = 0;
  for (const auto& t : tensors) {
    if (t.name == "sgd.steps") {
      steps_ = static_cast<std::size_t>(t.tensor.item());
      continue;
    }
    const std::string suffix = ".momentum";
    if (t.name.size() <= suffix.size() || t.name.compare(t.name.size() - suffix.size(), suffix.size(), suffix) != 0) {
      throw DataError("unexpected optimizer tensor '" + t.name + "'");
    }
    names_.push_back(t.name.substr(0, t.name.size() - suffix.size()));
    velocity_.emplace_back(t.tensor.values().begin(), t.tensor.values().end());
  }
}

PreparedSet PreparedSet::subset(const std::vector<std::size_t>& indices) const {
  PreparedSet out;
  for (std::size_t i : indices) {
    out.images.push_back(images.at(i));
    out.y.push_back(y.at(i));
  }
  return out;
}

PreparedSet prepare_dataset(const std::vector<ModuleSample>& samples, const InputGeometry& geometry) {
  for (const auto& s : samples) geometry.check_tiles(s.rows, s.cols);
  PreparedSet set;
  set.images.resize(samples.size());
  set.y.resize(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    set.images[i] = prepare_image(read_image(samples[i].image_path), geometry, samples[i].rows, samples[i].cols);
    set.y[i] = samples[i].y;
  });
  return set;
}

std::string report_csv(const TrainReport& report) {
  std::ostringstream out;
  out << "epoch,train_loss,val_mae\n";
  for (std::size_t e = 0; e < report.train_loss.size(); ++e) {
    out << e + 1 << ',' << format_double(report.train_loss[e]) << ',';
    if (e < report.val_mae.size() && !std::isnan(report.val_mae[e])) out << format_double(report.val_mae[e]);
    out << '\n';
  }
  return out.str();
}

namespace {

Tensor stack(const std::vector<Tensor>& items) {
  const Shape& one = items.front().shape();
  const std::size_t n = items.front().numel();
  std::vector<double> data(items.size() * n);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != one) throw ShapeError("batch images differ in shape");
    std::copy(items[i].values().begin(), items[i].values().end(), data.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  Shape shape = one;
  if (shape.size() == 4) {
    shape[0] = items.size();
  } else {
    shape.insert(shape.begin(), items.size());
  }
  return Tensor(std::move(shape), std::move(data));
}

Tensor batch_inputs(const PreparedSet& set, const std::vector<std::size_t>& idx, const Normalization& norm,
                    const TrainConfig* augmentation, std::size_t epoch) {
  std::vector<Tensor> items(idx.size());
  parallel_for(idx.size(), [&](std::size_t k) {
    Tensor x = normalize(set.images[idx[k]], norm);
    if (augmentation && augmentation->augment) {
      std::mt19937_64 rng(derive_seed(augmentation->seed, {epoch, idx[k], 0xa5}));
      x = augment(x, rng);
    }
    items[k] = x;
  });
  return stack(items);
}

double mean_absolute_error(const std::vector<double>& pred, const std::vector<double>& y) {
  ExactSum s;
  for (std::size_t i = 0; i < y.size(); ++i) s.add(std::fabs(pred[i] - y[i]));
  return s.round() / static_cast<double>(y.size());
}

}  // namespace

namespace {
void recalibrate(PowerModel& model, const PreparedSet& set, const Normalization& normalization, std::size_t batch_size) {
  model.recalibrate_batchnorm((set.size() + batch_size - 1) / batch_size, [&](std::size_t k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = k * batch_size; i < std::min(set.size(), (k + 1) * batch_size); ++i) idx.push_back(i);
    return batch_inputs(set, idx, normalization, nullptr, 0);
  });
}
}  // namespace

TrainResult train(const PreparedSet& train_set, const PreparedSet* validation, const ModelSpec& spec,
                  const TrainConfig& config, const Normalization& normalization,
                  const std::vector<NamedTensor>* init) {
  config.validate();
  spec.validate();
  if (train_set.size() == 0) throw DataError("train: empty training split");
  if (train_set.y.size() != train_set.size()) throw DataError("train: images and targets differ in count");
  if (config.batch_size > train_set.size()) {
    throw DataError("batch_size " + std::to_string(config.batch_size) + " exceeds the training set size " +
                    std::to_string(train_set.size()));
  }
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result{PowerModel(spec, derive_seed(config.seed, {0x1e1f})), Sgd(config), TrainReport{}, normalization};
  if (init) result.model.load_state(*init);
  result.report.config_echo = serialize(config);

  const std::size_t n = train_set.size();
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed(config.seed, {epoch, 0x5eed}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    result.optimizer.set_learning_rate(config.learning_rate_at(epoch));
    ExactSum epoch_loss;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++batch_no) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + config.batch_size)));
      const Tensor x = batch_inputs(train_set, idx, normalization, &config, epoch);
      std::vector<double> targets;
      for (std::size_t i : idx) targets.push_back(train_set.y[i]);
      const Tensor y({idx.size(), 1}, std::move(targets));
      result.model.zero_grad();
      Tensor loss = mse_loss(result.model.predict(x, Mode::train), y);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(batch_no + 1));
      }
      loss.backward();
      result.optimizer.step(result.model.parameters());
      epoch_loss.add(value * static_cast<double>(idx.size()));
    }
    result.report.train_loss.push_back(epoch_loss.round() / static_cast<double>(n));
    double val = std::nan("");
    const bool last = epoch + 1 == config.epochs;
    const bool evaluate = validation && validation->size() > 0 &&
                          ((config.eval_every > 0 && (epoch + 1) % config.eval_every == 0) || last);
    if (config.recalibrate_bn && (evaluate || last)) recalibrate(result.model, train_set, normalization, config.batch_size);
    if (evaluate) {
      val = mean_absolute_error(predict_relative(result.model, validation->images, normalization, config.batch_size),
                                validation->y);
    }
    result.report.val_mae.push_back(val);
  }
  result.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

std::vector<double> predict_relative(PowerModel& model, const std::vector<Tensor>& images,
                                     const Normalization& normalization, std::size_t batch_size) {
  NoGradGuard guard;
  std::vector<double> out;
  out.reserve(images.size());
  PreparedSet view{images, std::vector<double>(images.size(), 0.0)};
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(images.size(), start + batch_size); ++i) idx.push_back(i);
    const Tensor y = model.predict(batch_inputs(view, idx, normalization, nullptr, 0), Mode::eval);
    for (double v : y.values()) out.push_back(v);
  }
  return out;
}

std::vector<MapPrediction> predict_maps(PowerModel& model, const std::vector<Tensor>& images,
                                        const Normalization& normalization, std::size_t batch_size) {
  if (model.spec().head != HeadKind::regression_map) throw DataError("predict_maps needs the regression-map head");
  NoGradGuard guard;
  std::vector<MapPrediction> out;
  PreparedSet view{images, std::vector<double>(images.size(), 0.0)};
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(images.size(), start + batch_size); ++i) idx.push_back(i);
    const auto res = model.forward_map(batch_inputs(view, idx, normalization, nullptr, 0), Mode::eval);
    auto maps = split_maps(res.map);
    for (std::size_t k = 0; k < idx.size(); ++k) out.push_back({res.y_hat.at(k), std::move(maps[k])});
  }
  return out;
}

}  // namespace lumipower
