#include "lumipower/model.hpp"

#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "lumipower/error.hpp"

namespace lumipower {

std::string to_string(HeadKind kind) {
  return kind == HeadKind::embedding_linear ? "embedding_linear" : "regression_map";
}

std::string to_string(MapNegation negation) {
  switch (negation) {
    case MapNegation::relu: return "relu";
    case MapNegation::abs: return "abs";
    case MapNegation::none: return "none";
  }
  return "relu";
}

std::string to_string(MapScale scale) { return scale == MapScale::mean ? "mean" : "sum"; }

MapScale parse_map_scale(std::string_view text) {
  if (text == "mean") return MapScale::mean;
  if (text == "sum") return MapScale::sum;
  throw DataError("unknown map scale '" + std::string(text) + "' (expected mean or sum)");
}

HeadKind parse_head_kind(std::string_view text) {
  if (text == "embedding_linear") return HeadKind::embedding_linear;
  if (text == "regression_map") return HeadKind::regression_map;
  throw DataError("unknown head kind '" + std::string(text) + "' (expected embedding_linear or regression_map)");
}

MapNegation parse_map_negation(std::string_view text) {
  if (text == "relu") return MapNegation::relu;
  if (text == "abs") return MapNegation::abs;
  if (text == "none") return MapNegation::none;
  throw DataError("unknown map negation '" + std::string(text) + "' (expected relu, abs or none)");
}

// ---------------------------------------------------------------- ModelSpec

ModelSpec ModelSpec::mini() { return ModelSpec{}; }

ModelSpec ModelSpec::full() {
  ModelSpec s;
  s.stage_widths = {64, 128, 256, 512};
  return s;
}

std::size_t ModelSpec::output_stride() const { return std::size_t{4} << (stage_widths.size() - 1); }

namespace {

std::size_t conv_out(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < kernel) return 0;
  return (in + 2 * pad - kernel) / stride + 1;
}

std::size_t backbone_extent(std::size_t in, std::size_t stages) {
  std::size_t e = conv_out(in, 7, 2, 3);
  e = conv_out(e, 3, 2, 1);
  for (std::size_t s = 1; s < stages; ++s) e = conv_out(e, 3, 2, 1);
  return e;
}

}  // namespace

std::size_t ModelSpec::map_height() const { return backbone_extent(input_height, stage_widths.size()); }
std::size_t ModelSpec::map_width() const { return backbone_extent(input_width, stage_widths.size()); }

void ModelSpec::validate() const {
  if (stage_widths.empty()) throw DataError("model spec needs at least one stage");
  for (std::size_t w : stage_widths)
    if (w == 0) throw DataError("model spec stage widths must be positive");
  if (blocks_per_stage == 0) throw DataError("model spec needs at least one block per stage");
  if (input_channels == 0) throw DataError("model spec needs at least one input channel");
  if (map_height() == 0 || map_width() == 0) {
    throw DataError("input " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                    " is too small for the backbone");
  }
}

std::string ModelSpec::serialize() const {
  std::ostringstream out;
  out << "stage_widths=";
  for (std::size_t i = 0; i < stage_widths.size(); ++i) out << (i ? "," : "") << stage_widths[i];
  out << "\nblocks_per_stage=" << blocks_per_stage << "\nhead=" << to_string(head)
      << "\nmap_negation=" << to_string(negation) << "\nmap_bias=" << (map_bias ? "true" : "false")
      << "\nmap_scale=" << to_string(map_scale)
      << "\ninput_channels=" << input_channels << "\ninput_height=" << input_height
      << "\ninput_width=" << input_width << "\n";
  return out.str();
}

namespace {

std::size_t parse_size(std::string_view key, std::string_view value) {
  try {
    std::size_t pos = 0;
    const std::string s(value);
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw DataError("model spec: invalid integer for " + std::string(key) + ": '" + std::string(value) + "'");
  }
}

}  // namespace

ModelSpec ModelSpec::parse(std::string_view text) {
  ModelSpec s;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("model spec: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "stage_widths") {
      s.stage_widths.clear();
      std::istringstream parts(value);
      std::string p;
      while (std::getline(parts, p, ',')) s.stage_widths.push_back(parse_size(key, p));
    } else if (key == "blocks_per_stage") {
      s.blocks_per_stage = parse_size(key, value);
    } else if (key == "head") {
      s.head = parse_head_kind(value);
    } else if (key == "map_negation") {
      s.negation = parse_map_negation(value);
    } else if (key == "map_bias") {
      if (value != "true" && value != "false") throw DataError("model spec: map_bias must be true or false");
      s.map_bias = value == "true";
    } else if (key == "map_scale") {
      s.map_scale = parse_map_scale(value);
    } else if (key == "input_channels") {
      s.input_channels = parse_size(key, value);
    } else if (key == "input_height") {
      s.input_height = parse_size(key, value);
    } else if (key == "input_width") {
      s.input_width = parse_size(key, value);
    } else {
      throw DataError("model spec: unknown key '" + key + "'");
    }
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------- layout

namespace {

struct BlockLayout {
  std::string prefix;
  std::size_t in_channels;
  std::size_t width;
  std::size_t stride;
  bool downsample;
};

std::vector<BlockLayout> block_layout(const ModelSpec& spec) {
  std::vector<BlockLayout> blocks;
  std::size_t in = spec.stage_widths.front();
  for (std::size_t s = 0; s < spec.stage_widths.size(); ++s) {
    const std::size_t w = spec.stage_widths[s];
    for (std::size_t b = 0; b < spec.blocks_per_stage; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      blocks.push_back({"stage" + std::to_string(s + 1) + ".block" + std::to_string(b), in, w, stride,
                        stride != 1 || in != w});
      in = w;
    }
  }
  return blocks;
}

std::vector<std::string> batchnorm_names(const ModelSpec& spec) {
  std::vector<std::string> names{"stem.bn"};
  for (const auto& b : block_layout(spec)) {
    names.push_back(b.prefix + ".bn1");
    names.push_back(b.prefix + ".bn2");
    if (b.downsample) names.push_back(b.prefix + ".down.bn");
  }
  return names;
}

}  // namespace

std::vector<ParameterInfo> parameter_layout(const ModelSpec& spec) {
  spec.validate();
  std::vector<ParameterInfo> out;
  auto add_bn = [&](const std::string& prefix, std::size_t c) {
    out.push_back({prefix + ".gamma", {c}, ParamKind::bn_gamma});
    out.push_back({prefix + ".beta", {c}, ParamKind::bn_beta});
  };
  const std::size_t stem = spec.stage_widths.front();
  out.push_back({"stem.conv.weight", {stem, spec.input_channels, 7, 7}, ParamKind::conv_weight});
  add_bn("stem.bn", stem);
  for (const auto& b : block_layout(spec)) {
    out.push_back({b.prefix + ".conv1.weight", {b.width, b.in_channels, 3, 3}, ParamKind::conv_weight});
    add_bn(b.prefix + ".bn1", b.width);
    out.push_back({b.prefix + ".conv2.weight", {b.width, b.width, 3, 3}, ParamKind::conv_weight});
    add_bn(b.prefix + ".bn2", b.width);
    if (b.downsample) {
      out.push_back({b.prefix + ".down.conv.weight", {b.width, b.in_channels, 1, 1}, ParamKind::conv_weight});
      add_bn(b.prefix + ".down.bn", b.width);
    }
  }
  const std::size_t D = spec.embedding_dim();
  if (spec.head == HeadKind::embedding_linear) {
    out.push_back({"head.fc.weight", {1, D}, ParamKind::linear_weight});
  } else {
    out.push_back({"head.map.weight", {1, D, 1, 1}, ParamKind::conv_weight});
    if (spec.map_bias) out.push_back({"head.map.bias", {1}, ParamKind::bias});
  }
  return out;
}

std::vector<std::pair<std::string, Shape>> buffer_layout(const ModelSpec& spec) {
  std::vector<std::pair<std::string, Shape>> out;
  const auto params = parameter_layout(spec);
  for (const std::string& bn : batchnorm_names(spec)) {
    std::size_t channels = 0;
    for (const auto& p : params)
      if (p.name == bn + ".gamma") channels = p.shape[0];
    out.emplace_back(bn + ".running_mean", Shape{channels});
    out.emplace_back(bn + ".running_var", Shape{channels});
  }
  return out;
}

std::size_t count_parameters(const ModelSpec& spec) {
  std::size_t total = 0;
  for (const auto& p : parameter_layout(spec)) total += numel(p.shape);
  return total;
}

// ---------------------------------------------------------------- model

namespace {

struct BatchNormLayer {
  Tensor gamma, beta;
  BatchNormStats stats;

  Tensor operator()(const Tensor& x, Mode mode) { return batchnorm2d(x, gamma, beta, stats, mode); }
};

struct Block {
  Tensor conv1, conv2, down;
  BatchNormLayer bn1, bn2, down_bn;
  std::size_t stride = 1;
  bool downsample = false;

  Tensor operator()(const Tensor& x, Mode mode) {
    Tensor out = relu(bn1(conv2d(x, conv1, stride, 1), mode));
    out = bn2(conv2d(out, conv2, 1, 1), mode);
    Tensor shortcut = downsample ? down_bn(conv2d(x, down, stride, 0), mode) : x;
    return relu(add(out, shortcut));
  }
};

}  // namespace

struct PowerModel::Layers {
  Tensor stem_conv;
  BatchNormLayer stem_bn;
  std::vector<Block> blocks;
  Tensor fc_weight;
  Tensor map_weight;
  std::optional<Tensor> map_bias;
};

PowerModel::PowerModel(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)), layers_(std::make_unique<Layers>()) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  std::map<std::string, Tensor> by_name;
  for (const auto& info : parameter_layout(spec_)) {
    Tensor t = Tensor::zeros(info.shape, true);
    auto v = t.mutable_values();
    switch (info.kind) {
      case ParamKind::conv_weight: {
        // Kaiming normal (fan-out) for the backbone; the map projection starts
        // small so the initial estimate sits near 1.
        const double fan_out = static_cast<double>(info.shape[0] * info.shape[2] * info.shape[3]);
        const double std_dev = info.name == "head.map.weight" ? 1e-3 : std::sqrt(2.0 / fan_out);
        std::normal_distribution<double> dist(0.0, std_dev);
        for (double& x : v) x = dist(rng);
        break;
      }
      case ParamKind::linear_weight: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(info.shape[1]));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& x : v) x = dist(rng);
        break;
      }
      case ParamKind::bn_gamma:
        std::fill(v.begin(), v.end(), 1.0);
        break;
      case ParamKind::bn_beta:
      case ParamKind::bias:
        break;
    }
    parameters_.push_back({info.name, t, info.kind});
    by_name.emplace(info.name, t);
  }
  std::map<std::string, BatchNormLayer> bns;
  for (const std::string& bn : batchnorm_names(spec_)) {
    BatchNormLayer layer{by_name.at(bn + ".gamma"), by_name.at(bn + ".beta"),
                         BatchNormStats::identity(by_name.at(bn + ".gamma").numel())};
    buffers_.push_back({bn + ".running_mean", layer.stats.running_mean});
    buffers_.push_back({bn + ".running_var", layer.stats.running_var});
    bns.emplace(bn, std::move(layer));
  }
  layers_->stem_conv = by_name.at("stem.conv.weight");
  layers_->stem_bn = bns.at("stem.bn");
  for (const auto& b : block_layout(spec_)) {
    Block block;
    block.conv1 = by_name.at(b.prefix + ".conv1.weight");
    block.conv2 = by_name.at(b.prefix + ".conv2.weight");
    block.bn1 = bns.at(b.prefix + ".bn1");
    block.bn2 = bns.at(b.prefix + ".bn2");
    block.stride = b.stride;
    block.downsample = b.downsample;
    if (b.downsample) {
      block.down = by_name.at(b.prefix + ".down.conv.weight");
      block.down_bn = bns.at(b.prefix + ".down.bn");
    }
    layers_->blocks.push_back(std::move(block));
  }
  if (spec_.head == HeadKind::embedding_linear) {
    layers_->fc_weight = by_name.at("head.fc.weight");
  } else {
    layers_->map_weight = by_name.at("head.map.weight");
    if (spec_.map_bias) layers_->map_bias = by_name.at("head.map.bias");
  }
}

PowerModel::~PowerModel() = default;
PowerModel::PowerModel(PowerModel&&) noexcept = default;
PowerModel& PowerModel::operator=(PowerModel&&) noexcept = default;

void PowerModel::check_input(const Tensor& images) const {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[0] == 0 || s[1] != spec_.input_channels || s[2] != spec_.input_height ||
      s[3] != spec_.input_width) {
    throw ShapeError("model expects input [N," + std::to_string(spec_.input_channels) + "," +
                     std::to_string(spec_.input_height) + "," + std::to_string(spec_.input_width) + "], got " +
                     to_string(s));
  }
}

Tensor PowerModel::features(const Tensor& images, Mode mode) {
  check_input(images);
  Tensor x = relu(layers_->stem_bn(conv2d(images, layers_->stem_conv, 2, 3), mode));
  x = max_pool2d(x, 3, 2, 1);
  for (Block& block : layers_->blocks) x = block(x, mode);
  return x;
}

PowerModel::EmbeddingOutput PowerModel::forward_embedding(const Tensor& images, Mode mode) {
  if (spec_.head != HeadKind::embedding_linear) throw Error("forward_embedding needs the embedding_linear head");
  Tensor embedding = global_avg_pool(features(images, mode));
  return {linear(embedding, layers_->fc_weight), embedding};
}

PowerModel::MapOutput PowerModel::forward_map(const Tensor& images, Mode mode) {
  if (spec_.head != HeadKind::regression_map) throw Error("forward_map needs the regression_map head");
  Tensor f = conv2d(features(images, mode), layers_->map_weight, 1, 0);
  if (layers_->map_bias) f = add_channel_bias(f, *layers_->map_bias);
  if (spec_.map_scale == MapScale::mean) f = scale(f, 1.0 / static_cast<double>(f.dim(2) * f.dim(3)));
  Tensor map;
  switch (spec_.negation) {
    case MapNegation::relu: map = neg(relu(f)); break;
    case MapNegation::abs: map = neg(abs(f)); break;
    case MapNegation::none: map = f; break;
  }
  const std::size_t n = map.dim(0);
  Tensor y_hat = add_scalar(reshape(sum(map, {1, 2, 3}), {n, 1}), 1.0);
  return {y_hat, map};
}

Tensor PowerModel::predict(const Tensor& images, Mode mode) {
  return spec_.head == HeadKind::embedding_linear ? forward_embedding(images, mode).y_hat
                                                  : forward_map(images, mode).y_hat;
}

Tensor PowerModel::parameter(std::string_view name) const {
  for (const auto& p : parameters_)
    if (p.name == name) return p.tensor;
  throw Error("model has no parameter '" + std::string(name) + "'");
}

std::vector<NamedTensor> PowerModel::state() const {
  std::vector<NamedTensor> out;
  for (const auto& p : parameters_) out.push_back({p.name, p.tensor});
  for (const auto& b : buffers_) out.push_back(b);
  return out;
}

void PowerModel::load_state(const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const Tensor*> given;
  for (const auto& t : tensors) given.emplace(t.name, &t.tensor);
  std::vector<std::string> problems;
  const auto expected = state();
  for (const auto& e : expected) {
    auto it = given.find(e.name);
    if (it == given.end()) {
      problems.push_back(e.name + " missing");
    } else if (it->second->shape() != e.tensor.shape()) {
      problems.push_back(e.name + " expected " + to_string(e.tensor.shape()) + " got " +
                         to_string(it->second->shape()));
    }
  }
  for (const auto& t : tensors) {
    bool known = false;
    for (const auto& e : expected) known = known || e.name == t.name;
    if (!known) problems.push_back(t.name + " unexpected");
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match model: ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
    throw ShapeError(msg);
  }
  for (auto& e : expected) {
    const auto src = given.at(e.name)->values();
    Tensor dst = e.tensor;
    std::copy(src.begin(), src.end(), dst.mutable_values().begin());
  }
}

void PowerModel::recalibrate_batchnorm(std::size_t count, const std::function<Tensor(std::size_t)>& batch) {
  std::vector<BatchNormStats*> stats{&layers_->stem_bn.stats};
  for (auto& b : layers_->blocks) {
    stats.push_back(&b.bn1.stats);
    stats.push_back(&b.bn2.stats);
    if (b.downsample) stats.push_back(&b.down_bn.stats);
  }
  std::vector<double> saved;
  for (auto* s : stats) saved.push_back(s->momentum);
  NoGradGuard guard;
  for (std::size_t k = 0; k < count; ++k) {
    // momentum 1/(k+1) keeps the running value equal to the mean over batches
    for (auto* s : stats) s->momentum = 1.0 / static_cast<double>(k + 1);
    features(batch(k), Mode::train);
  }
  for (std::size_t i = 0; i < stats.size(); ++i) stats[i]->momentum = saved[i];
}

void PowerModel::zero_grad() {
  for (auto& p : parameters_) p.tensor.zero_grad();
}

std::vector<RegressionMap> split_maps(const Tensor& map) {
  if (map.rank() != 4 || map.dim(1) != 1) throw ShapeError("regression map tensor must be [N,1,h,w]");
  const std::size_t n = map.dim(0), h = map.dim(2), w = map.dim(3);
  std::vector<RegressionMap> out;
  const auto v = map.values();
  for (std::size_t i = 0; i < n; ++i) {
    RegressionMap m{h, w, std::vector<double>(v.begin() + i * h * w, v.begin() + (i + 1) * h * w)};
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace lumipower
