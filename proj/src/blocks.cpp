#include "massseg/blocks.hpp"

#include <cmath>
#include <numeric>

#include "massseg/log.hpp"
#include "massseg/random.hpp"

namespace massseg {

void FilterSchedule::validate() const {
  for (std::size_t l = 0; l < 4; ++l) {
    const auto& t = multires_3x3_filters[l];
    if (t[0] + t[1] + t[2] != multires_1x1_filters[l]) {
      throw ConfigError("filter schedule: level " + std::to_string(l + 1) + " 3x3 filters " + std::to_string(t[0]) +
                        "+" + std::to_string(t[1]) + "+" + std::to_string(t[2]) + " do not sum to 1x1 width " +
                        std::to_string(multires_1x1_filters[l]));
    }
    if (respath_filters[l] < 1 || standard_block_filters[l] < 1 || respath_lengths[l] < 1) {
      throw ConfigError("filter schedule: non-positive entry at level " + std::to_string(l + 1));
    }
    if (l > 0 && respath_lengths[l] >= respath_lengths[l - 1]) {
      throw ConfigError("filter schedule: ResPath lengths must strictly decrease with depth");
    }
  }
  if (aspp_dilations.empty()) throw ConfigError("filter schedule: ASPP needs at least one branch");
  for (int d : aspp_dilations) {
    if (d < 1) throw ConfigError("filter schedule: ASPP dilation must be >= 1");
  }
}

void check_level(int level) {
  if (level < 1 || level > 4) throw ConfigError("block level must be in 1..4, got " + std::to_string(level));
}

void ConvUnitSpec::validate() const {
  if (kernel_size < 1 || kernel_size > 3) {
    throw ConfigError("conv unit kernel size must be 1, 2 or 3, got " + std::to_string(kernel_size));
  }
  if (filters < 1) throw ConfigError("conv unit needs at least one filter");
  if (dilation < 1) throw ConfigError("conv unit dilation must be >= 1");
}

template <typename T>
void initialize_parameters(Module<T>& module, std::uint64_t seed) {
  Rng rng(seed);
  module.visit_parameters(typename Module<T>::Visitor([&](const std::string&, Parameter<T>& p) {
    auto& v = p.value();
    switch (p.init) {
      case Init::kHeUniform: {
        const double limit = std::sqrt(6.0 / std::max(1, p.fan_in));
        for (auto& x : v.values()) x = static_cast<T>(static_cast<float>(rng.uniform(-limit, limit)));
        break;
      }
      case Init::kZeros:
        v.fill(T(0));
        break;
      case Init::kOnes:
        v.fill(T(1));
        break;
    }
  }));
}

// --- Conv2d -------------------------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(int in_channels, int filters, int kernel_size, int dilation, bool bias)
    : Module<T>("conv2d"), in_(in_channels), filters_(filters), k_(kernel_size), dilation_(dilation) {
  if (in_channels < 1) throw ConfigError("conv2d needs at least one input channel");
  ConvUnitSpec{kernel_size, filters, dilation, false, false}.validate();
  kernel_ = &this->add_parameter("kernel", {k_, k_, in_, filters_}, Init::kHeUniform, k_ * k_ * in_);
  if (bias) bias_ = &this->add_parameter("bias", {filters_}, Init::kZeros);
}

template <typename T>
ag::Var<T> Conv2d<T>::forward(const ag::Var<T>& x) const {
  return ag::conv2d(x, kernel_->var, bias_ ? bias_->var : ag::Var<T>(), dilation_);
}

// --- BatchNorm ----------------------------------------------------------------------------

template <typename T>
BatchNorm<T>::BatchNorm(int channels, NormOptions options) : Module<T>("batch_norm"), channels_(channels), options_(options) {
  gamma_ = &this->add_parameter("gamma", {channels}, Init::kOnes);
  beta_ = &this->add_parameter("beta", {channels}, Init::kZeros);
  moving_mean_ = &this->add_parameter("moving_mean", {channels}, Init::kZeros, 0, false);
  moving_variance_ = &this->add_parameter("moving_variance", {channels}, Init::kOnes, 0, false);
}

template <typename T>
ag::Var<T> BatchNorm<T>::forward(const ag::Var<T>& x, Mode mode) {
  ag::BatchNormSettings s;
  s.training = mode == Mode::kTrain;
  s.momentum = options_.momentum;
  s.epsilon = options_.epsilon;
  return ag::batch_norm(x, gamma_->var, beta_->var, moving_mean_->value(), moving_variance_->value(), s);
}

template <typename T>
ag::Var<T> activate_and_normalize(const ag::Var<T>& x, BatchNorm<T>* bn, bool activation, LayerOrder order,
                                  Mode mode) {
  ag::Var<T> y = x;
  if (order == LayerOrder::kActivationThenNorm) {
    if (activation) y = ag::relu(y);
    if (bn) y = bn->forward(y, mode);
  } else {
    if (bn) y = bn->forward(y, mode);
    if (activation) y = ag::relu(y);
  }
  return y;
}

// --- ConvUnit -----------------------------------------------------------------------------

template <typename T>
ConvUnit<T>::ConvUnit(int in_channels, ConvUnitSpec spec, NormOptions norm)
    : Block<T>("conv_unit"), spec_(spec), norm_(norm) {
  spec_.validate();
  conv_ = &this->template add_child<Conv2d<T>>("conv", in_channels, spec.filters, spec.kernel_size, spec.dilation);
  if (spec.batchnorm) bn_ = &this->template add_child<BatchNorm<T>>("bn", spec.filters, norm);
}

template <typename T>
ag::Var<T> ConvUnit<T>::forward(const ag::Var<T>& x, Mode mode) {
  return activate_and_normalize(conv_->forward(x), bn_, spec_.activation, norm_.order, mode);
}

// --- MultiResBlock ------------------------------------------------------------------------

template <typename T>
MultiResBlock<T>::MultiResBlock(int in_channels, int level, const FilterSchedule& schedule, NormOptions norm)
    : Block<T>("multires_block"), level_(level), norm_(norm) {
  check_level(level);
  schedule.validate();
  filters_ = schedule.multires_3x3_filters[static_cast<std::size_t>(level - 1)];
  out_ = schedule.multires_1x1_filters[static_cast<std::size_t>(level - 1)];
  int in = in_channels;
  const char* names[] = {"conv3x3_a", "conv3x3_b", "conv3x3_c"};
  for (int i = 0; i < 3; ++i) {
    convs_[i] = &this->template add_child<ConvUnit<T>>(names[i], in, ConvUnitSpec{3, filters_[i], 1, true, true}, norm);
    in = filters_[i];
  }
  shortcut_ = &this->template add_child<Conv2d<T>>("shortcut1x1", in_channels, out_, 1);
  bn_ = &this->template add_child<BatchNorm<T>>("bn", out_, norm);
}

template <typename T>
ag::Var<T> MultiResBlock<T>::forward(const ag::Var<T>& x, Mode mode) {
  auto a = convs_[0]->forward(x, mode);
  auto b = convs_[1]->forward(a, mode);
  auto c = convs_[2]->forward(b, mode);
  auto merged = ag::add(ag::concat_channels<T>({a, b, c}), shortcut_->forward(x));
  return activate_and_normalize(merged, bn_, true, norm_.order, mode);
}

// --- StandardBlock ------------------------------------------------------------------------

template <typename T>
StandardBlock<T>::StandardBlock(int in_channels, int filters, bool residual, NormOptions norm)
    : Block<T>(residual ? "residual_block" : "standard_block"), filters_(filters), residual_(residual), norm_(norm) {
  first_ = &this->template add_child<ConvUnit<T>>("conv3x3_a", in_channels, ConvUnitSpec{3, filters, 1, true, true}, norm);
  if (!residual) {
    second_ = &this->template add_child<ConvUnit<T>>("conv3x3_b", filters, ConvUnitSpec{3, filters, 1, true, true}, norm);
  } else {
    second_conv_ = &this->template add_child<Conv2d<T>>("conv3x3_b", filters, filters, 3);
    shortcut_ = &this->template add_child<Conv2d<T>>("shortcut1x1", in_channels, filters, 1);
    bn_ = &this->template add_child<BatchNorm<T>>("bn", filters, norm);
  }
}

template <typename T>
ag::Var<T> StandardBlock<T>::forward(const ag::Var<T>& x, Mode mode) {
  auto a = first_->forward(x, mode);
  if (!residual_) return second_->forward(a, mode);
  auto merged = ag::add(second_conv_->forward(a), shortcut_->forward(x));
  return activate_and_normalize(merged, bn_, true, norm_.order, mode);
}

// --- ResPath ------------------------------------------------------------------------------

template <typename T>
ResPathUnit<T>::ResPathUnit(int in_channels, int filters, NormOptions norm) : Block<T>("respath_unit"), norm_(norm) {
  conv3_ = &this->template add_child<Conv2d<T>>("conv3x3", in_channels, filters, 3);
  conv1_ = &this->template add_child<Conv2d<T>>("conv1x1", in_channels, filters, 1);
  bn_ = &this->template add_child<BatchNorm<T>>("bn", filters, norm);
}

template <typename T>
ag::Var<T> ResPathUnit<T>::forward(const ag::Var<T>& x, Mode mode) {
  return activate_and_normalize(ag::add(conv3_->forward(x), conv1_->forward(x)), bn_, true, norm_.order, mode);
}

template <typename T>
ResPath<T>::ResPath(int in_channels, int level, const FilterSchedule& schedule, NormOptions norm)
    : Block<T>("respath"), level_(level) {
  check_level(level);
  filters_ = schedule.respath_filters[static_cast<std::size_t>(level - 1)];
  const int length = schedule.respath_lengths[static_cast<std::size_t>(level - 1)];
  int in = in_channels;
  for (int i = 0; i < length; ++i) {
    units_.push_back(&this->template add_child<ResPathUnit<T>>("unit" + std::to_string(i + 1), in, filters_, norm));
    in = filters_;
  }
}

template <typename T>
ag::Var<T> ResPath<T>::forward(const ag::Var<T>& x, Mode mode) {
  ag::Var<T> y = x;
  for (auto* u : units_) y = u->forward(y, mode);
  return y;
}

// --- ASPP ---------------------------------------------------------------------------------

template <typename T>
Aspp<T>::Aspp(int in_channels, int filters, std::vector<int> dilations, NormOptions norm)
    : Block<T>("aspp"), filters_(filters), dilations_(std::move(dilations)) {
  if (dilations_.empty()) throw ConfigError("ASPP needs at least one branch");
  for (std::size_t i = 0; i < dilations_.size(); ++i) {
    branches_.push_back(&this->template add_child<ConvUnit<T>>(
        "branch" + std::to_string(i + 1) + "_rate" + std::to_string(dilations_[i]), in_channels,
        ConvUnitSpec{3, filters, dilations_[i], true, true}, norm));
  }
  projection_ = &this->template add_child<ConvUnit<T>>(
      "projection1x1", filters * static_cast<int>(dilations_.size()), ConvUnitSpec{1, filters, 1, true, true}, norm);
}

template <typename T>
ag::Var<T> Aspp<T>::forward(const ag::Var<T>& x, Mode mode) {
  const int max_rate = *std::max_element(dilations_.begin(), dilations_.end());
  const int extent = 2 * max_rate + 1;
  if (!warned_ && (x.shape()[1] < extent || x.shape()[2] < extent)) {
    warned_ = true;
    log::warn("ASPP input " + shape_string(x.shape()) + " is smaller than the dilated kernel extent " +
              std::to_string(extent) + "; outer taps read zero padding");
  }
  std::vector<ag::Var<T>> outs;
  outs.reserve(branches_.size());
  for (auto* b : branches_) outs.push_back(b->forward(x, mode));
  return projection_->forward(ag::concat_channels(outs), mode);
}

// --- Upsample -----------------------------------------------------------------------------

template <typename T>
Upsample<T>::Upsample(int in_channels, int filters) : Module<T>("upsample"), filters_(filters) {
  if (in_channels < 1 || filters < 1) throw ConfigError("upsample needs positive channel counts");
  kernel_ = &this->add_parameter("kernel", {2, 2, in_channels, filters}, Init::kHeUniform, 4 * in_channels);
  bias_ = &this->add_parameter("bias", {filters}, Init::kZeros);
}

template <typename T>
ag::Var<T> Upsample<T>::forward(const ag::Var<T>& x) const {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] % 2 || s[2] % 2) {
    throw ConfigError("upsample: input spatial dims must be even, got " + shape_string(s));
  }
  return ag::conv_transpose2x2(x, kernel_->var, bias_->var);
}

#define MASSSEG_INSTANTIATE_BLOCKS(T)                                                                   \
  template void initialize_parameters(Module<T>&, std::uint64_t);                                       \
  template ag::Var<T> activate_and_normalize(const ag::Var<T>&, BatchNorm<T>*, bool, LayerOrder, Mode); \
  template class Conv2d<T>;                                                                             \
  template class BatchNorm<T>;                                                                          \
  template class ConvUnit<T>;                                                                           \
  template class MultiResBlock<T>;                                                                      \
  template class StandardBlock<T>;                                                                      \
  template class ResPathUnit<T>;                                                                        \
  template class ResPath<T>;                                                                            \
  template class Aspp<T>;                                                                               \
  template class Upsample<T>;

MASSSEG_INSTANTIATE_BLOCKS(float)
MASSSEG_INSTANTIATE_BLOCKS(double)

}  // namespace massseg
