#include "lumipower/persistence.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <functional>
#include <sstream>

#include "lumipower/csv.hpp"
#include "lumipower/error.hpp"

namespace lumipower {

namespace {

constexpr std::uint8_t kDtypeF64 = 1;

class Writer {
 public:
  void bytes(std::string_view s) { out_.append(s); }
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void text(std::string_view s) {
    uint(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  void tensors(const std::vector<NamedTensor>& list) {
    uint(static_cast<std::uint32_t>(list.size()));
    for (const auto& t : list) {
      if (t.name.size() > 0xffff) throw DataError("tensor name too long: " + t.name.substr(0, 40));
      uint(static_cast<std::uint16_t>(t.name.size()));
      bytes(t.name);
      uint(kDtypeF64);
      const Shape& shape = t.tensor.shape();
      uint(static_cast<std::uint8_t>(shape.size()));
      for (std::size_t d : shape) uint(static_cast<std::uint64_t>(d));
      for (double v : t.tensor.values()) uint(std::bit_cast<std::uint64_t>(v));
    }
  }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  std::string_view bytes(std::size_t n) {
    if (n > in_.size() - pos_) throw DataError("checkpoint: unexpected end of data");
    const auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <class U>
  U uint() {
    const auto b = bytes(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(b[i])) << (8 * i));
    return v;
  }
  std::string text() { return std::string(bytes(uint<std::uint32_t>())); }
  std::vector<NamedTensor> tensors() {
    const auto count = uint<std::uint32_t>();
    std::vector<NamedTensor> out;
    for (std::uint32_t k = 0; k < count; ++k) {
      std::string name(bytes(uint<std::uint16_t>()));
      const auto dtype = uint<std::uint8_t>();
      if (dtype != kDtypeF64) throw DataError("checkpoint: tensor '" + name + "' has unsupported dtype");
      const auto rank = uint<std::uint8_t>();
      Shape shape;
      std::size_t numel = 1;
      for (std::uint8_t d = 0; d < rank; ++d) {
        const auto dim = uint<std::uint64_t>();
        if (dim != 0 && numel > (in_.size() - pos_) / dim) throw DataError("checkpoint: tensor '" + name + "' too large");
        shape.push_back(static_cast<std::size_t>(dim));
        numel *= static_cast<std::size_t>(dim);
      }
      if (numel > (in_.size() - pos_) / 8) throw DataError("checkpoint: tensor '" + name + "' exceeds the file");
      std::vector<double> values(numel);
      for (double& v : values) v = std::bit_cast<double>(uint<std::uint64_t>());
      out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
    }
    return out;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::map<std::string, std::string> parse_key_values(std::string_view text, std::string_view what) {
  std::map<std::string, std::string> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError(std::string(what) + " line " + std::to_string(number) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (out.count(key)) throw DataError(std::string(what) + " line " + std::to_string(number) + ": duplicate key '" + key + "'");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

}  // namespace

std::map<std::string, std::string> Checkpoint::echo() const { return parse_key_values(config_echo, "config echo"); }

Normalization Checkpoint::normalization() const {
  const auto kv = echo();
  const auto mean = kv.find("norm.mean"), stddev = kv.find("norm.stddev");
  if (mean == kv.end() || stddev == kv.end()) throw DataError("checkpoint has no normalization statistics");
  return {parse_double(mean->second, "norm.mean"), parse_double(stddev->second, "norm.stddev")};
}

std::string encode_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.uint(kCheckpointVersion);
  w.text(c.spec.serialize());
  w.tensors(c.tensors);
  w.uint(static_cast<std::uint8_t>(c.optimizer.empty() ? 0 : 1));
  if (!c.optimizer.empty()) w.tensors(c.optimizer);
  w.text(c.config_echo);
  w.uint(crc_of(w.str()));
  return std::move(w.str());
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  const std::string_view magic(kCheckpointMagic, 4);
  if (bytes.size() < 4 && magic.substr(0, bytes.size()) == bytes) {
    throw ChecksumError("checkpoint checksum mismatch (file truncated)");
  }
  if (bytes.substr(0, 4) != magic) throw DataError("not a checkpoint file (bad magic)");
  if (bytes.size() < 4 + 2 + 4) throw ChecksumError("checkpoint checksum mismatch (file truncated)");
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  Reader tail(bytes.substr(bytes.size() - 4));
  if (tail.uint<std::uint32_t>() != crc_of(body)) throw ChecksumError("checkpoint checksum mismatch");
  Reader r(body);
  r.bytes(4);
  const auto version = r.uint<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  c.spec = ModelSpec::parse(r.text());
  c.tensors = r.tensors();
  if (r.uint<std::uint8_t>()) c.optimizer = r.tensors();
  c.config_echo = r.text();
  if (!r.done()) throw DataError("checkpoint: trailing bytes before checksum");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  write_file_atomic(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const ChecksumError& e) {
    throw ChecksumError("'" + path.string() + "': " + e.what());
  } catch (const VersionError& e) {
    throw VersionError("'" + path.string() + "': " + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError("'" + path.string() + "': " + e.what());
  } catch (const DataError& e) {
    throw DataError("'" + path.string() + "': " + e.what());
  }
}

PowerModel model_from_checkpoint(const Checkpoint& checkpoint) {
  PowerModel model(checkpoint.spec, 0);
  model.load_state(checkpoint.tensors);
  return model;
}

// ---------------------------------------------------------------- RunConfig

namespace {

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string bool_text(bool b) { return b ? "true" : "false"; }

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw DataError("config: " + key + " must be true or false, got '" + v + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long x = std::stoull(v, &pos, 0);
    if (pos != v.size() || v.front() == '-') throw std::invalid_argument("bad");
    return x;
  } catch (const std::exception&) {
    throw DataError("config: " + key + " must be a non-negative integer, got '" + v + "'");
  }
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) throw DataError("config: empty list entry in '" + v + "'");
    out.push_back(item);
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& items) {
  std::ostringstream out;
  for (std::size_t i = 0; i < items.size(); ++i) out << (i ? "," : "") << items[i];
  return out.str();
}

#define LP_DOUBLE(member)                                                                 \
  Field {                                                                                 \
    [](const RunConfig& c) { return format_double(c.member); },                          \
        [](RunConfig& c, const std::string& v) { c.member = parse_double(v, #member); }  \
  }
#define LP_SIZE(key, member)                                                                               \
  Field {                                                                                                  \
    [](const RunConfig& c) { return std::to_string(c.member); },                                          \
        [](RunConfig& c, const std::string& v) { c.member = static_cast<std::size_t>(parse_u64(key, v)); } \
  }
#define LP_U64(key, member)                                                   \
  Field {                                                                     \
    [](const RunConfig& c) { return std::to_string(c.member); },             \
        [](RunConfig& c, const std::string& v) { c.member = parse_u64(key, v); } \
  }
#define LP_BOOL(key, member)                                                    \
  Field {                                                                       \
    [](const RunConfig& c) { return bool_text(c.member); },                    \
        [](RunConfig& c, const std::string& v) { c.member = parse_bool(key, v); } \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"model.stage_widths",
       {[](const RunConfig& c) { return join(c.model.stage_widths); },
        [](RunConfig& c, const std::string& v) {
          c.model.stage_widths.clear();
          for (const auto& w : split_list(v)) c.model.stage_widths.push_back(parse_u64("model.stage_widths", w));
        }}},
      {"model.blocks_per_stage", LP_SIZE("model.blocks_per_stage", model.blocks_per_stage)},
      {"model.input_channels", LP_SIZE("model.input_channels", model.input_channels)},
      {"model.head",
       {[](const RunConfig& c) { return to_string(c.model.head); },
        [](RunConfig& c, const std::string& v) { c.model.head = parse_head_kind(v); }}},
      {"model.map_negation",
       {[](const RunConfig& c) { return to_string(c.model.negation); },
        [](RunConfig& c, const std::string& v) { c.model.negation = parse_map_negation(v); }}},
      {"model.map_bias", LP_BOOL("model.map_bias", model.map_bias)},
      {"model.map_scale",
       {[](const RunConfig& c) { return to_string(c.model.map_scale); },
        [](RunConfig& c, const std::string& v) { c.model.map_scale = parse_map_scale(v); }}},
      {"train.learning_rate", LP_DOUBLE(train.learning_rate)},
      {"train.map_learning_rate", LP_DOUBLE(map_learning_rate)},
      {"train.map_epochs", LP_SIZE("train.map_epochs", map_epochs)},
      {"train.lr_schedule",
       {[](const RunConfig& c) { return to_string(c.train.lr_schedule); },
        [](RunConfig& c, const std::string& v) { c.train.lr_schedule = parse_lr_schedule(v); }}},
      {"train.momentum", LP_DOUBLE(train.momentum)},
      {"train.weight_decay", LP_DOUBLE(train.weight_decay)},
      {"train.batch_size", LP_SIZE("train.batch_size", train.batch_size)},
      {"train.epochs", LP_SIZE("train.epochs", train.epochs)},
      {"train.seed", LP_U64("train.seed", train.seed)},
      {"train.augment", LP_BOOL("train.augment", train.augment)},
      {"train.recalibrate_bn", LP_BOOL("train.recalibrate_bn", train.recalibrate_bn)},
      {"train.eval_every", LP_SIZE("train.eval_every", train.eval_every)},
      {"train.init",
       {[](const RunConfig& c) { return c.init; },
        [](RunConfig& c, const std::string& v) {
          if (v.empty()) throw DataError("config: train.init must be 'random' or a checkpoint path");
          c.init = v;
        }}},
      {"data.height", LP_SIZE("data.height", data.height)},
      {"data.width", LP_SIZE("data.width", data.width)},
      {"data.map_head_height", LP_SIZE("data.map_head_height", data.map_head_height)},
      {"data.map_head_width", LP_SIZE("data.map_head_width", data.map_head_width)},
      {"data.stats_over_all", LP_BOOL("data.stats_over_all", data.stats_over_all)},
      {"data.fold_seed", LP_U64("data.fold_seed", data.fold_seed)},
      {"synth.cell_px", LP_SIZE("synth.cell_px", synth.base.cell_px)},
      {"synth.margin_px", LP_SIZE("synth.margin_px", synth.base.margin_px)},
      {"synth.defect_density", LP_DOUBLE(synth.base.defect_density)},
      {"synth.intensity_ambiguity", LP_DOUBLE(synth.base.intensity_ambiguity)},
      {"synth.noise_sigma", LP_DOUBLE(synth.base.noise_sigma)},
      {"synth.seed", LP_U64("synth.seed", synth.base.rng_seed)},
      {"synth.types",
       {[](const RunConfig& c) { return join(c.synth.types); },
        [](RunConfig& c, const std::string& v) {
          c.synth.types = split_list(v);
          for (const auto& t : c.synth.types) module_preset(t);
        }}},
      {"output.scatter_band_wp", LP_DOUBLE(scatter_band_wp)},
  };
  return table;
}

#undef LP_DOUBLE
#undef LP_SIZE
#undef LP_U64
#undef LP_BOOL

}  // namespace

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : fields()) keys.push_back(k);
  return keys;
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig c;
  for (const auto& [key, value] : parse_key_values(text, "config")) {
    const auto it = fields().find(key);
    if (it == fields().end()) throw DataError("config: unknown key '" + key + "'");
    it->second.set(c, value);
  }
  c.train.validate();
  c.model.validate();
  c.synth.base.validate();
  if (!(c.map_learning_rate >= 0.0)) throw DataError("config: train.map_learning_rate must be >= 0");
  if (!(c.scatter_band_wp >= 0.0)) throw DataError("config: output.scatter_band_wp must be >= 0");
  if ((c.data.map_head_height == 0) != (c.data.map_head_width == 0))
    throw DataError("config: data.map_head_height and data.map_head_width must be set together");
  for (HeadKind head : {HeadKind::embedding_linear, HeadKind::regression_map}) {
    const ModelSpec probe = c.spec_for(head);
    probe.validate();
    const std::size_t stride = probe.output_stride();
    if (probe.input_height % stride || probe.input_width % stride) {
      throw DataError("config: input size " + std::to_string(probe.input_height) + "x" +
                      std::to_string(probe.input_width) + " for " + to_string(head) +
                      " is not a multiple of the backbone stride " + std::to_string(stride));
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  try {
    return parse(read_file(path));
  } catch (const DataError& e) {
    throw DataError("'" + path.string() + "': " + e.what());
  }
}

std::string RunConfig::serialize() const {
  std::ostringstream out;
  for (const auto& [key, field] : fields()) out << key << '=' << field.get(*this) << '\n';
  return out.str();
}

ModelSpec RunConfig::spec_for(HeadKind head) const {
  ModelSpec s = model;
  s.head = head;
  const bool own = head == HeadKind::regression_map && data.map_head_height > 0;
  s.input_height = own ? data.map_head_height : data.height;
  s.input_width = own ? data.map_head_width : data.width;
  return s;
}

TrainConfig RunConfig::train_for(HeadKind head) const {
  TrainConfig t = train;
  if (head == HeadKind::regression_map && map_learning_rate > 0.0) t.learning_rate = map_learning_rate;
  if (head == HeadKind::regression_map && map_epochs > 0) t.epochs = map_epochs;
  return t;
}

InputGeometry RunConfig::geometry(HeadKind head) const {
  const ModelSpec s = spec_for(head);
  InputGeometry g;
  g.height = s.input_height;
  g.width = s.input_width;
  g.stride = s.output_stride();
  return g;
}

}  // namespace lumipower
