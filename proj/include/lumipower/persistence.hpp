#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "lumipower/data.hpp"
#include "lumipower/model.hpp"
#include "lumipower/synth.hpp"
#include "lumipower/train.hpp"

namespace lumipower {

inline constexpr char kCheckpointMagic[4] = {'L', 'P', 'W', 'R'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

// File layout, integers little-endian:
//   "LPWR" | u16 version | u32 len + model spec text
//   | u32 count + tensor records | u8 has_optimizer [u32 count + tensor records]
//   | u32 len + config echo text | u32 CRC-32 of every preceding byte
// tensor record: u16 name length | name | u8 dtype (1 = f64) | u8 rank
//   | u64 dims[rank] | raw values
struct Checkpoint {
  ModelSpec spec;
  std::vector<NamedTensor> tensors;
  std::vector<NamedTensor> optimizer;  // empty when absent
  std::string config_echo;             // key=value lines

  // Values recorded in the config echo.
  std::map<std::string, std::string> echo() const;
  Normalization normalization() const;
};

std::string encode_checkpoint(const Checkpoint& checkpoint);
// Checks magic, then checksum, then version.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Builds the checkpoint's model and loads its tensors.
PowerModel model_from_checkpoint(const Checkpoint& checkpoint);

struct DataSettings {
  std::size_t height = 192;
  std::size_t width = 320;
  // Input size for the regression-map head; 0 means height x width.
  std::size_t map_head_height = 0;
  std::size_t map_head_width = 0;
  bool stats_over_all = false;
  std::uint64_t fold_seed = 0;

  bool operator==(const DataSettings&) const = default;
};

// Plain-text key=value run configuration. Keys are grouped as model.*,
// train.*, data.*, synth.* and output.*; unknown keys are rejected and
// serialize() writes every key in sorted order.
struct RunConfig {
  ModelSpec model;
  TrainConfig train;
  // Learning rate for the regression-map variant in cross-validation; 0
  // means train.learning_rate.
  double map_learning_rate = 0.0;
  std::size_t map_epochs = 0;  // 0 means train.epochs
  std::string init = "random";  // or a checkpoint path
  DataSettings data;
  DatasetConfig synth;
  double scatter_band_wp = kScatterBand;

  static constexpr double kScatterBand = 15.0;

  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);
  std::string serialize() const;

  // Model spec for `head` at that head's configured input size.
  ModelSpec spec_for(HeadKind head) const;
  TrainConfig train_for(HeadKind head) const;
  InputGeometry geometry(HeadKind head) const;

  bool operator==(const RunConfig& other) const { return serialize() == other.serialize(); }
};

std::vector<std::string> run_config_keys();

}  // namespace lumipower
