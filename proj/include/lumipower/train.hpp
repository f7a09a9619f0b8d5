#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lumipower/data.hpp"
#include "lumipower/model.hpp"
#include "lumipower/tensor.hpp"

namespace lumipower {

enum class LrSchedule { constant, cosine };

std::string to_string(LrSchedule schedule);
LrSchedule parse_lr_schedule(std::string_view text);

struct TrainConfig {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.1;
  std::size_t batch_size = 8;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  bool augment = true;
  // Validation MAE is computed every `eval_every` epochs (0 = never) and at
  // the final epoch when a validation set is given.
  std::size_t eval_every = 1;
  // Re-estimate batchnorm running statistics from the unaugmented training
  // set before each evaluation and after the final epoch.
  bool recalibrate_bn = true;
  // cosine: epoch e runs at lr * (1 + cos(pi e / epochs)) / 2.
  LrSchedule lr_schedule = LrSchedule::constant;

  double learning_rate_at(std::size_t epoch) const;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// (1/N) * sum (y_hat - y)^2 over [N,1] (or [N]) tensors.
Tensor mse_loss(const Tensor& y_hat, const Tensor& y);

// Momentum SGD with decoupled weight decay:
//   v <- m v + g;  p <- p - lr (v + lambda p)
// lambda applies to conv and linear weights only.
class Sgd {
 public:
  Sgd(double learning_rate, double momentum, double weight_decay);
  explicit Sgd(const TrainConfig& config) : Sgd(config.learning_rate, config.momentum, config.weight_decay) {}

  void step(std::vector<Parameter>& params);

  static bool decays(ParamKind kind) { return kind == ParamKind::conv_weight || kind == ParamKind::linear_weight; }

  // Momentum buffers named "<param>.momentum" plus a scalar step counter.
  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& tensors);

  std::size_t steps() const { return steps_; }
  void set_learning_rate(double learning_rate) { lr_ = learning_rate; }

 private:
  double lr_, momentum_, decay_;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> velocity_;
  std::size_t steps_ = 0;
};

// Preprocessed, unnormalized network inputs ([1,1,H,W] each) with targets.
struct PreparedSet {
  std::vector<Tensor> images;
  std::vector<double> y;

  std::size_t size() const { return images.size(); }
  PreparedSet subset(const std::vector<std::size_t>& indices) const;
};

// Reads and prepares every manifest image for the common input geometry.
PreparedSet prepare_dataset(const std::vector<ModuleSample>& samples, const InputGeometry& geometry);

struct TrainReport {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_mae;     // per epoch, NaN when not evaluated
  double wall_seconds = 0.0;
  std::string config_echo;
};

std::string report_csv(const TrainReport& report);

struct TrainResult {
  PowerModel model;
  Sgd optimizer;
  TrainReport report;
  Normalization normalization;
};

std::string serialize(const TrainConfig& config);

// Runs `config.epochs` epochs of seeded shuffled mini-batches. `init`, when
// given, is loaded into the freshly built model before training.
TrainResult train(const PreparedSet& train_set, const PreparedSet* validation, const ModelSpec& spec,
                  const TrainConfig& config, const Normalization& normalization,
                  const std::vector<NamedTensor>* init = nullptr);

// Eval-mode relative power predictions.
std::vector<double> predict_relative(PowerModel& model, const std::vector<Tensor>& images,
                                     const Normalization& normalization, std::size_t batch_size = 8);

struct MapPrediction {
  double y_hat = 1.0;
  RegressionMap map;
};

std::vector<MapPrediction> predict_maps(PowerModel& model, const std::vector<Tensor>& images,
                                        const Normalization& normalization, std::size_t batch_size = 8);

}  // namespace lumipower
