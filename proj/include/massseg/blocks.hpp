#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "massseg/module.hpp"

namespace massseg {

enum class LayerOrder {
  kActivationThenNorm,  // conv -> ReLU -> BN
  kNormThenActivation,  // conv -> BN -> ReLU
};

struct NormOptions {
  double momentum = 0.99;
  double epsilon = 1e-3;
  LayerOrder order = LayerOrder::kActivationThenNorm;
};

/// Per-depth filter counts shared by every variant. Index 0 is the full-resolution level.
struct FilterSchedule {
  std::array<int, 4> respath_filters{32, 64, 128, 256};
  std::array<int, 4> respath_lengths{4, 3, 2, 1};
  std::array<std::array<int, 3>, 4> multires_3x3_filters{{{8, 17, 26}, {17, 35, 53}, {35, 71, 106}, {71, 142, 213}}};
  std::array<int, 4> multires_1x1_filters{51, 105, 212, 426};
  std::array<int, 4> standard_block_filters{32, 64, 128, 256};
  int bottleneck_filters = 512;
  int aspp_bottleneck_filters = 512;
  int aspp_output_filters = 32;
  std::vector<int> aspp_dilations{1, 6, 8, 12};

  /// Throws ConfigError if the 3x3 triples do not sum to the 1x1 widths or the ResPath
  /// lengths are not strictly decreasing with depth.
  void validate() const;

  friend bool operator==(const FilterSchedule&, const FilterSchedule&) = default;
};

/// Single-input block with a train/eval forward.
template <typename T>
class Block : public Module<T> {
 public:
  using Module<T>::Module;
  virtual ag::Var<T> forward(const ag::Var<T>& x, Mode mode) = 0;
};

/// `level` is 1-based (1 = full resolution, 4 = deepest before the bottleneck).
void check_level(int level);

struct ConvUnitSpec {
  int kernel_size = 3;
  int filters = 1;
  int dilation = 1;
  bool activation = true;
  bool batchnorm = true;

  void validate() const;
};

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(int in_channels, int filters, int kernel_size, int dilation = 1, bool bias = true);

  ag::Var<T> forward(const ag::Var<T>& x) const;

  int in_channels() const { return in_; }
  int filters() const { return filters_; }
  int kernel_size() const { return k_; }
  int dilation() const { return dilation_; }

 private:
  int in_, filters_, k_, dilation_;
  Parameter<T>* kernel_;
  Parameter<T>* bias_ = nullptr;
};

template <typename T>
class BatchNorm : public Module<T> {
 public:
  BatchNorm(int channels, NormOptions options);

  ag::Var<T> forward(const ag::Var<T>& x, Mode mode);

  int channels() const { return channels_; }

 private:
  int channels_;
  NormOptions options_;
  Parameter<T>* gamma_;
  Parameter<T>* beta_;
  Parameter<T>* moving_mean_;
  Parameter<T>* moving_variance_;
};

/// ReLU and BN in the configured order. Used after every conv unit and residual merge.
template <typename T>
ag::Var<T> activate_and_normalize(const ag::Var<T>& x, BatchNorm<T>* bn, bool activation, LayerOrder order,
                                  Mode mode);

template <typename T>
class ConvUnit : public Block<T> {
 public:
  ConvUnit(int in_channels, ConvUnitSpec spec, NormOptions norm = {});

  ag::Var<T> forward(const ag::Var<T>& x, Mode mode) override;

  const ConvUnitSpec& spec() const { return spec_; }

 private:
  ConvUnitSpec spec_;
  NormOptions norm_;
  Conv2d<T>* conv_;
  BatchNorm<T>* bn_ = nullptr;
};

/// Three chained 3x3 units whose outputs are concatenated and added to a 1x1 projection of
/// the block input, followed by ReLU and BN.
template <typename T>
class MultiResBlock : public Block<T> {
 public:
  MultiResBlock(int in_channels, int level, const FilterSchedule& schedule, NormOptions norm = {});

  ag::Var<T> forward(const ag::Var<T>& x, Mode mode) override;

  int level() const { return level_; }
  std::array<int, 3> conv_filters() const { return filters_; }
  int out_channels() const { return out_; }

 private:
  int level_;
  std::array<int, 3> filters_;
  int out_;
  NormOptions norm_;
  std::array<ConvUnit<T>*, 3> convs_;
  Conv2d<T>* shortcut_;
  BatchNorm<T>* bn_;
};

/// Two 3x3 conv units. The residual form replaces the second unit's activation/BN with a
/// 1x1-shortcut sum followed by ReLU and BN.
template <typename T>
class StandardBlock : public Block<T> {
 public:
  StandardBlock(int in_channels, int filters, bool residual = false, NormOptions norm = {});

  ag::Var<T> forward(const ag::Var<T>& x, Mode mode) override;

  int out_channels() const { return filters_; }
  bool residual() const { return residual_; }

 private:
  int filters_;
  bool residual_;
  NormOptions norm_;
  ConvUnit<T>* first_;
  ConvUnit<T>* second_ = nullptr;
  Conv2d<T>* second_conv_ = nullptr;
  Conv2d<T>* shortcut_ = nullptr;
  BatchNorm<T>* bn_ = nullptr;
};

template <typename T>
class ResPathUnit : public Block<T> {
 public:
  ResPathUnit(int in_channels, int filters, NormOptions norm = {});

  ag::Var<T> forward(const ag::Var<T>& x, Mode mode) override;

 private:
  NormOptions norm_;
  Conv2d<T>* conv3_;
  Conv2d<T>* conv1_;
  BatchNorm<T>* bn_;
};

/// Residual skip connection: a chain of `respath_lengths[level]` units.
template <typename T>
class ResPath : public Block<T> {
 public:
  ResPath(int in_channels, int level, const FilterSchedule& schedule, NormOptions norm = {});

  ag::Var<T> forward(const ag::Var<T>& x, Mode mode) override;

  int level() const { return level_; }
  int length() const { return static_cast<int>(units_.size()); }
  int filters() const { return filters_; }

 private:
  int level_;
  int filters_;
  std::vector<ResPathUnit<T>*> units_;
};

/// Parallel dilated 3x3 units, channel-concatenated and projected by a 1x1 unit.
template <typename T>
class Aspp : public Block<T> {
 public:
  Aspp(int in_channels, int filters, std::vector<int> dilations = {1, 6, 8, 12}, NormOptions norm = {});

  ag::Var<T> forward(const ag::Var<T>& x, Mode mode) override;

  int filters() const { return filters_; }
  const std::vector<int>& dilations() const { return dilations_; }

 private:
  int filters_;
  std::vector<int> dilations_;
  std::vector<ConvUnit<T>*> branches_;
  ConvUnit<T>* projection_;
  bool warned_ = false;
};

/// 2x2 stride-2 transposed convolution.
template <typename T>
class Upsample : public Module<T> {
 public:
  Upsample(int in_channels, int filters);

  ag::Var<T> forward(const ag::Var<T>& x) const;

  int filters() const { return filters_; }

 private:
  int filters_;
  Parameter<T>* kernel_;
  Parameter<T>* bias_;
};

}  // namespace massseg
