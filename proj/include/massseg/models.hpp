#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "massseg/blocks.hpp"

namespace massseg {

enum class ModelVariant {
  kUnet,
  kConnectedUnets,
  kConnectedResUnets,
  kConnectedUnetsPlus,
  kConnectedUnetsPlusPlus,
};

std::string_view to_string(ModelVariant variant);
/// Accepts the snake_case names (`unet`, `connected_unets`, `connected_resunets`,
/// `connected_unets_plus`, `connected_unets_plusplus`).
ModelVariant parse_variant(std::string_view name);
std::vector<ModelVariant> all_variants();

/// How the bridge between the two U-Nets forms its output.
enum class BridgeMode {
  kDuplicate,       // concat(conv(d), conv(d))
  kConvWithInput,   // concat(conv(d), d)
};

std::string_view to_string(BridgeMode mode);
/// Accepts `duplicate`, `conv_with_input`.
BridgeMode parse_bridge_mode(std::string_view name);
std::string_view to_string(LayerOrder order);
/// Accepts `activation_then_norm`, `norm_then_activation`.
LayerOrder parse_layer_order(std::string_view name);

struct ModelOptions {
  int input_channels = 1;
  NormOptions norm;
  BridgeMode bridge = BridgeMode::kDuplicate;
  FilterSchedule schedule;
};

/// Introspection record for one top-level block.
struct BlockInfo {
  std::string name;
  std::string kind;
  int level = 0;             // schedule level (1..4) or 0 when not level-bound
  int resolution_level = 0;  // number of 2x poolings applied to the input at this block's output
  int out_channels = 0;
  int length = 0;            // ResPath unit count
  int filters = 0;           // ResPath / ASPP / conv width
  std::vector<int> multires_filters;
  std::vector<int> dilations;
  std::int64_t params = 0;
};

/// 3x3 conv on UNet1's final decoder output, concatenated (see BridgeMode), then ReLU and BN.
template <typename T>
class Bridge : public Module<T> {
 public:
  Bridge(int in_channels, int filters, BridgeMode mode, NormOptions norm = {});

  ag::Var<T> forward(const ag::Var<T>& d, Mode mode);

  int out_channels() const { return out_; }

 private:
  BridgeMode mode_;
  NormOptions norm_;
  int out_;
  Conv2d<T>* conv_;
  BatchNorm<T>* bn_;
};

/// Complete segmentation network. Output is a (N, H, W, 1) probability map.
template <typename T>
class SegmentationModel : public Module<T> {
 public:
  SegmentationModel(ModelVariant variant, int input_size, std::uint64_t seed, ModelOptions options = {});

  ag::Var<T> forward(const ag::Var<T>& x, Mode mode);
  /// Inference-mode forward without recording a tape.
  Tensor<T> predict(const Tensor<T>& x);

  ModelVariant variant() const { return variant_; }
  int input_size() const { return input_size_; }
  int input_channels() const { return options_.input_channels; }
  std::uint64_t seed() const { return seed_; }
  const ModelOptions& options() const { return options_; }

  std::vector<BlockInfo> blocks() const;

 private:
  struct Stage {
    std::array<Block<T>*, 4> encoders{};
    std::array<ResPath<T>*, 4> skips{};  // null for plain skip connections
    Block<T>* bottleneck = nullptr;
    std::array<Upsample<T>*, 4> ups{};
    std::array<Block<T>*, 4> decoders{};  // indexed by level - 1
    std::array<Conv2d<T>*, 4> inter_convs{};
    std::array<ResPath<T>*, 4> inter_paths{};
  };

  int block_out_channels(int level) const;
  Block<T>& make_block(const std::string& name, int in_channels, int level);
  void build_stage(Stage& stage, int stage_index, int in_channels, const std::array<int, 4>* inter_channels);
  std::array<ag::Var<T>, 4> run_stage(Stage& stage, const ag::Var<T>& x, const std::array<ag::Var<T>, 4>* inter,
                                      Mode mode);
  void check_input(const Tensor<T>& x) const;

  ModelVariant variant_;
  int input_size_;
  std::uint64_t seed_;
  ModelOptions options_;
  bool multires_ = false;
  bool residual_blocks_ = false;
  bool respaths_ = false;
  bool connected_ = false;

  Stage first_;
  Stage second_;
  Bridge<T>* bridge_ = nullptr;
  Aspp<T>* head_aspp_ = nullptr;
  Conv2d<T>* head_conv_ = nullptr;
  std::vector<std::pair<std::string, int>> resolution_of_;  // top-level block -> resolution level
};

/// Result of comparing a model's ResPaths and MultiRes blocks with the reference schedule tables.
struct ScheduleCensus {
  int respaths = 0;
  int multires_blocks = 0;
  std::vector<std::string> mismatches;

  bool ok() const { return mismatches.empty(); }
};

/// Variants with ResPaths must have exactly respath01..11 with the reference (length, filters);
/// plusplus must have four MultiRes blocks per level whose 3x3 widths match the reference triple
/// and sum to the level's 1x1 width. Other variants must have neither.
ScheduleCensus schedule_census(ModelVariant variant, const std::vector<BlockInfo>& blocks);

/// Rejects sizes that are not multiples of 16, below 32, or leave an odd bottleneck.
void validate_input_size(int input_size);

template <typename T>
std::unique_ptr<SegmentationModel<T>> build_model(ModelVariant variant, int input_size, std::uint64_t seed,
                                                  ModelOptions options = {}) {
  return std::make_unique<SegmentationModel<T>>(variant, input_size, seed, std::move(options));
}

}  // namespace massseg
