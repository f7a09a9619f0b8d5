#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lumipower/tensor.hpp"

namespace lumipower {

enum class HeadKind { embedding_linear, regression_map };
// How the 1x1-conv output f becomes the map: -relu(f), -|f|, or f itself.
// `none` is a diagnostic mode that drops the sign constraint.
enum class MapNegation { relu, abs, none };

// How the 1x1 map projection is scaled before negation. `mean` divides by the
// number of map positions so the head's total output has the magnitude of a
// pooled linear head; `sum` leaves the per-position projection unscaled.
enum class MapScale { mean, sum };

std::string to_string(HeadKind kind);
std::string to_string(MapNegation negation);
std::string to_string(MapScale scale);
HeadKind parse_head_kind(std::string_view text);
MapNegation parse_map_negation(std::string_view text);
MapScale parse_map_scale(std::string_view text);

struct ModelSpec {
  std::vector<std::size_t> stage_widths{8, 16, 32, 64};
  std::size_t blocks_per_stage = 2;
  HeadKind head = HeadKind::regression_map;
  MapNegation negation = MapNegation::relu;
  bool map_bias = true;
  MapScale map_scale = MapScale::mean;
  std::size_t input_channels = 1;
  std::size_t input_height = 192;
  std::size_t input_width = 320;

  static ModelSpec mini();
  static ModelSpec full();

  std::size_t embedding_dim() const { return stage_widths.back(); }
  // Output stride of the backbone: 2 (stem) * 2 (pool) * 2^(stages-1).
  std::size_t output_stride() const;
  std::size_t map_height() const;
  std::size_t map_width() const;

  void validate() const;
  std::string serialize() const;
  static ModelSpec parse(std::string_view text);

  bool operator==(const ModelSpec&) const = default;
};

// Which optimizer treatment a parameter gets.
enum class ParamKind { conv_weight, linear_weight, bias, bn_gamma, bn_beta };

struct ParameterInfo {
  std::string name;
  Shape shape;
  ParamKind kind;
};

// Ordered parameter table for a spec; the checkpoint tensor set follows it.
std::vector<ParameterInfo> parameter_layout(const ModelSpec& spec);
// Names and shapes of the batchnorm running statistics.
std::vector<std::pair<std::string, Shape>> buffer_layout(const ModelSpec& spec);
std::size_t count_parameters(const ModelSpec& spec);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Parameter {
  std::string name;
  Tensor tensor;
  ParamKind kind;
};

// Nonpositive map of per-location relative power loss for one sample.
struct RegressionMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double at(std::size_t row, std::size_t col) const { return values[row * width + col]; }
};

// ResNet-style backbone with either the embedding/linear head or the
// regression-map head.
class PowerModel {
 public:
  PowerModel(ModelSpec spec, std::uint64_t seed);
  ~PowerModel();
  PowerModel(PowerModel&&) noexcept;
  PowerModel& operator=(PowerModel&&) noexcept;

  const ModelSpec& spec() const { return spec_; }

  struct EmbeddingOutput {
    Tensor y_hat;      // [N,1]
    Tensor embedding;  // [N,D]
  };
  struct MapOutput {
    Tensor y_hat;  // [N,1]
    Tensor map;    // [N,1,h,w]
  };

  // Backbone feature stack [N,D,h,w].
  Tensor features(const Tensor& images, Mode mode);
  EmbeddingOutput forward_embedding(const Tensor& images, Mode mode);
  MapOutput forward_map(const Tensor& images, Mode mode);
  // Relative power estimate from whichever head the spec selects.
  Tensor predict(const Tensor& images, Mode mode);

  std::vector<Parameter>& parameters() { return parameters_; }
  const std::vector<Parameter>& parameters() const { return parameters_; }
  Tensor parameter(std::string_view name) const;

  // Parameters followed by batchnorm running statistics.
  std::vector<NamedTensor> state() const;
  // Copies values from `tensors`; throws ShapeError naming every missing or
  // mismatched tensor (first mismatch first).
  void load_state(const std::vector<NamedTensor>& tensors);

  // Replaces the batchnorm running statistics with the mean of the
  // train-mode batch statistics over `count` batches of normalized inputs.
  void recalibrate_batchnorm(std::size_t count, const std::function<Tensor(std::size_t)>& batch);

  void zero_grad();

 private:
  struct Layers;
  void check_input(const Tensor& images) const;

  ModelSpec spec_;
  std::unique_ptr<Layers> layers_;
  std::vector<Parameter> parameters_;
  std::vector<NamedTensor> buffers_;
};

std::vector<RegressionMap> split_maps(const Tensor& map);

}  // namespace lumipower
