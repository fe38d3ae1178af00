#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "massseg/data_io.hpp"
#include "massseg/metrics.hpp"
#include "massseg/models.hpp"
#include "massseg/preprocessing.hpp"
#include "massseg/training.hpp"

namespace massseg::cli {

/// Every setting a subcommand can read. Stored as a YAML document with one mapping per section
/// (`model`, `preprocess`, `train`, `evaluate`, `paths`, `synthetic`) holding scalar keys.
struct RunConfig {
  struct Model {
    ModelVariant variant = ModelVariant::kConnectedUnetsPlusPlus;
    int input_size = 224;
    std::uint64_t seed = 42;
    LayerOrder layer_order = LayerOrder::kActivationThenNorm;
    BridgeMode bridge = BridgeMode::kDuplicate;

    friend bool operator==(const Model&, const Model&) = default;
  } model;

  struct Preprocess {
    Profile profile = Profile::kCbisDdsm;
    double crop_fraction = 0.02;
    double clahe_clip_limit = 0.01;
    int clahe_tiles = 8;
    int clahe_bins = 256;

    friend bool operator==(const Preprocess&, const Preprocess&) = default;
  } preprocess;

  struct Train {
    double learning_rate = 1e-4;
    int batch_size = 16;
    int epochs = 300;
    bool use_validation = true;
    double val_fraction = 0.15;
    int early_stop_patience = 30;
    int lr_reduce_patience = 10;
    double lr_reduce_factor = 0.5;
    double min_lr = 1e-6;
    double stop_at_dice = 0.0;  // 0 disables; otherwise stop once inference-mode train Dice reaches it

    friend bool operator==(const Train&, const Train&) = default;
  } train;

  struct Evaluate {
    double threshold = 0.5;
    std::vector<ThresholdRule> thresholds = default_threshold_rules();
    double hausdorff_scale = 1.0;

    friend bool operator==(const Evaluate&, const Evaluate&) = default;
  } evaluate;

  struct Paths {
    std::filesystem::path data;
    std::filesystem::path out_dir = "out";
    std::filesystem::path checkpoint;

    friend bool operator==(const Paths&, const Paths&) = default;
  } paths;

  SyntheticSpec synthetic;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  /// Throws ConfigError on out-of-range values. The synthetic section is checked when used.
  void validate() const;

  ModelOptions model_options() const;
  PreprocessOptions preprocess_options() const;
  TrainConfig train_config() const;
};

/// Overlays the keys present in `text` on `base`. Throws ConfigError for unknown sections or
/// keys, non-scalar values and values that do not parse.
RunConfig parse_run_config(const std::string& text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
/// Sets one key from its text form, e.g. ("train.epochs", "200").
void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& text);

/// Writes every key; parse_run_config(dump_run_config(c)) == c.
std::string dump_run_config(const RunConfig& config);

struct ConfigKey {
  std::string section;
  std::string key;
  std::string description;
};

std::vector<ConfigKey> config_keys();

}  // namespace massseg::cli
