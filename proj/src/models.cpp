#include "massseg/models.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace massseg {

namespace {

std::string numbered(const char* prefix, int n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%02d", prefix, n);
  return buf;
}

}  // namespace

std::string_view to_string(ModelVariant variant) {
  switch (variant) {
    case ModelVariant::kUnet:
      return "unet";
    case ModelVariant::kConnectedUnets:
      return "connected_unets";
    case ModelVariant::kConnectedResUnets:
      return "connected_resunets";
    case ModelVariant::kConnectedUnetsPlus:
      return "connected_unets_plus";
    case ModelVariant::kConnectedUnetsPlusPlus:
      return "connected_unets_plusplus";
  }
  return "unknown";
}

std::vector<ModelVariant> all_variants() {
  return {ModelVariant::kUnet, ModelVariant::kConnectedUnets, ModelVariant::kConnectedResUnets,
          ModelVariant::kConnectedUnetsPlus, ModelVariant::kConnectedUnetsPlusPlus};
}

ModelVariant parse_variant(std::string_view name) {
  for (auto v : all_variants()) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown model variant '" + std::string(name) +
                    "' (expected unet, connected_unets, connected_resunets, connected_unets_plus or "
                    "connected_unets_plusplus)");
}

std::string_view to_string(BridgeMode mode) {
  return mode == BridgeMode::kDuplicate ? "duplicate" : "conv_with_input";
}

BridgeMode parse_bridge_mode(std::string_view name) {
  if (name == "duplicate") return BridgeMode::kDuplicate;
  if (name == "conv_with_input") return BridgeMode::kConvWithInput;
  throw ConfigError("unknown bridge mode '" + std::string(name) + "' (expected duplicate or conv_with_input)");
}

std::string_view to_string(LayerOrder order) {
  return order == LayerOrder::kActivationThenNorm ? "activation_then_norm" : "norm_then_activation";
}

LayerOrder parse_layer_order(std::string_view name) {
  if (name == "activation_then_norm") return LayerOrder::kActivationThenNorm;
  if (name == "norm_then_activation") return LayerOrder::kNormThenActivation;
  throw ConfigError("unknown layer order '" + std::string(name) +
                    "' (expected activation_then_norm or norm_then_activation)");
}

void validate_input_size(int input_size) {
  if (input_size < 32 || input_size % 16 != 0) {
    throw ConfigError("input size must be a multiple of 16 and at least 32, got " + std::to_string(input_size));
  }
  if ((input_size / 16) % 2 != 0) {
    throw ConfigError("input size " + std::to_string(input_size) + " leaves an odd " + std::to_string(input_size / 16) +
                      "x" + std::to_string(input_size / 16) +
                      " bottleneck that the 2x transposed convolutions cannot upsample; use a multiple of 32");
  }
}

// --- Bridge -------------------------------------------------------------------------------

template <typename T>
Bridge<T>::Bridge(int in_channels, int filters, BridgeMode mode, NormOptions norm)
    : Module<T>("bridge"), mode_(mode), norm_(norm) {
  out_ = mode == BridgeMode::kDuplicate ? 2 * filters : filters + in_channels;
  conv_ = &this->template add_child<Conv2d<T>>("conv3x3", in_channels, filters, 3);
  bn_ = &this->template add_child<BatchNorm<T>>("bn", out_, norm);
}

template <typename T>
ag::Var<T> Bridge<T>::forward(const ag::Var<T>& d, Mode mode) {
  auto c = conv_->forward(d);
  auto joined = mode_ == BridgeMode::kDuplicate ? ag::concat_channels<T>({c, c}) : ag::concat_channels<T>({c, d});
  return activate_and_normalize(joined, bn_, true, norm_.order, mode);
}

// --- SegmentationModel --------------------------------------------------------------------

template <typename T>
SegmentationModel<T>::SegmentationModel(ModelVariant variant, int input_size, std::uint64_t seed, ModelOptions options)
    : Module<T>("segmentation_model"), variant_(variant), input_size_(input_size), seed_(seed), options_(std::move(options)) {
  validate_input_size(input_size);
  options_.schedule.validate();
  if (options_.input_channels < 1) throw ConfigError("model needs at least one input channel");
  multires_ = variant == ModelVariant::kConnectedUnetsPlusPlus;
  residual_blocks_ = variant == ModelVariant::kConnectedResUnets;
  respaths_ = variant == ModelVariant::kConnectedUnetsPlus || variant == ModelVariant::kConnectedUnetsPlusPlus;
  connected_ = variant != ModelVariant::kUnet;

  build_stage(first_, 0, options_.input_channels, nullptr);
  if (!connected_) {
    head_conv_ = &this->template add_child<Conv2d<T>>("output_conv1x1", block_out_channels(1), 1, 1);
    resolution_of_.emplace_back("output_conv1x1", 0);
  } else {
    const int width = block_out_channels(1);
    // Bridge conv width follows the level-1 block width.
    bridge_ = &this->template add_child<Bridge<T>>("bridge", width, width, options_.bridge, options_.norm);
    resolution_of_.emplace_back("bridge", 0);
    std::array<int, 4> inter{};
    for (int l = 1; l <= 4; ++l) inter[static_cast<std::size_t>(l - 1)] = block_out_channels(l);
    build_stage(second_, 1, bridge_->out_channels(), &inter);
    head_aspp_ = &this->template add_child<Aspp<T>>("output_aspp", width, options_.schedule.aspp_output_filters,
                                                    options_.schedule.aspp_dilations, options_.norm);
    head_conv_ = &this->template add_child<Conv2d<T>>("output_conv1x1", options_.schedule.aspp_output_filters, 1, 1);
    resolution_of_.emplace_back("output_aspp", 0);
    resolution_of_.emplace_back("output_conv1x1", 0);
  }
  initialize_parameters(*this, seed);
}

template <typename T>
int SegmentationModel<T>::block_out_channels(int level) const {
  const auto idx = static_cast<std::size_t>(level - 1);
  return multires_ ? options_.schedule.multires_1x1_filters[idx] : options_.schedule.standard_block_filters[idx];
}

template <typename T>
Block<T>& SegmentationModel<T>::make_block(const std::string& name, int in_channels, int level) {
  if (multires_) {
    return this->template add_child<MultiResBlock<T>>(name, in_channels, level, options_.schedule, options_.norm);
  }
  return this->template add_child<StandardBlock<T>>(
      name, in_channels, options_.schedule.standard_block_filters[static_cast<std::size_t>(level - 1)], residual_blocks_,
      options_.norm);
}

template <typename T>
void SegmentationModel<T>::build_stage(Stage& stage, int stage_index, int in_channels,
                                       const std::array<int, 4>* inter_channels) {
  const auto& sched = options_.schedule;
  std::array<int, 4> enc_out{};
  int in = in_channels;
  for (int l = 0; l < 4; ++l) {
    const auto li = static_cast<std::size_t>(l);
    if (inter_channels && l > 0) {
      const int pooled = enc_out[li - 1];
      const std::string conv_name = numbered("pool_conv", 4 * stage_index + l + 1);
      stage.inter_convs[li] = &this->template add_child<Conv2d<T>>(conv_name, pooled, pooled, 3);
      resolution_of_.emplace_back(conv_name, l);
      int carried = (*inter_channels)[li];
      if (respaths_) {
        // ResPaths 05..07 carry UNet1 decoder features at levels 2..4.
        const std::string path_name = numbered("respath", 4 + l);
        stage.inter_paths[li] =
            &this->template add_child<ResPath<T>>(path_name, carried, l + 1, sched, options_.norm);
        resolution_of_.emplace_back(path_name, l);
        carried = stage.inter_paths[li]->filters();
      }
      in = pooled + carried;
    }
    const std::string enc_name = numbered("encoder", 4 * stage_index + l + 1);
    stage.encoders[li] = &make_block(enc_name, in, l + 1);
    resolution_of_.emplace_back(enc_name, l);
    enc_out[li] = block_out_channels(l + 1);
    if (respaths_) {
      const std::string path_name = numbered("respath", stage_index == 0 ? l + 1 : l + 8);
      stage.skips[li] = &this->template add_child<ResPath<T>>(path_name, enc_out[li], l + 1, sched, options_.norm);
      resolution_of_.emplace_back(path_name, l);
    }
    in = enc_out[li];
  }

  const std::string bottleneck_name = "bottleneck" + std::to_string(stage_index + 1);
  if (connected_) {
    stage.bottleneck = &this->template add_child<Aspp<T>>(bottleneck_name, in, sched.aspp_bottleneck_filters,
                                                         sched.aspp_dilations, options_.norm);
    in = sched.aspp_bottleneck_filters;
  } else {
    stage.bottleneck =
        &this->template add_child<StandardBlock<T>>(bottleneck_name, in, sched.bottleneck_filters, false, options_.norm);
    in = sched.bottleneck_filters;
  }
  resolution_of_.emplace_back(bottleneck_name, 4);

  for (int l = 3; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    // Decoder 01 is the deepest decoder of the first U-Net, 04 the shallowest.
    const int number = 4 * stage_index + (4 - l);
    const std::string up_name = numbered("upsample", number);
    const int up_filters = sched.standard_block_filters[li];
    stage.ups[li] = &this->template add_child<Upsample<T>>(up_name, in, up_filters);
    resolution_of_.emplace_back(up_name, l);
    const int skip = stage.skips[li] ? stage.skips[li]->filters() : enc_out[li];
    const std::string dec_name = numbered("decoder", number);
    stage.decoders[li] = &make_block(dec_name, up_filters + skip, l + 1);
    resolution_of_.emplace_back(dec_name, l);
    in = block_out_channels(l + 1);
  }
}

template <typename T>
std::array<ag::Var<T>, 4> SegmentationModel<T>::run_stage(Stage& stage, const ag::Var<T>& x,
                                                          const std::array<ag::Var<T>, 4>* inter, Mode mode) {
  std::array<ag::Var<T>, 4> enc;
  for (std::size_t l = 0; l < 4; ++l) {
    ag::Var<T> h;
    if (l == 0) {
      h = x;
    } else {
      h = ag::max_pool2(enc[l - 1]);
      if (inter) {
        auto carried = stage.inter_paths[l] ? stage.inter_paths[l]->forward((*inter)[l], mode) : (*inter)[l];
        h = ag::concat_channels<T>({stage.inter_convs[l]->forward(h), carried});
      }
    }
    enc[l] = stage.encoders[l]->forward(h, mode);
  }
  ag::Var<T> c = stage.bottleneck->forward(ag::max_pool2(enc[3]), mode);
  std::array<ag::Var<T>, 4> dec;
  for (int l = 3; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    auto up = stage.ups[li]->forward(c);
    auto skip = stage.skips[li] ? stage.skips[li]->forward(enc[li], mode) : enc[li];
    c = stage.decoders[li]->forward(ag::concat_channels<T>({up, skip}), mode);
    dec[li] = c;
  }
  return dec;
}

template <typename T>
void SegmentationModel<T>::check_input(const Tensor<T>& x) const {
  const auto& s = x.shape();
  if (s.size() != 4 || s[0] < 1 || s[1] != input_size_ || s[2] != input_size_ || s[3] != options_.input_channels) {
    throw InputError("model expects input (N, " + std::to_string(input_size_) + ", " + std::to_string(input_size_) +
                     ", " + std::to_string(options_.input_channels) + "), got " + shape_string(s));
  }
}

template <typename T>
ag::Var<T> SegmentationModel<T>::forward(const ag::Var<T>& x, Mode mode) {
  check_input(x.value());
  if (!connected_) {
    auto dec = run_stage(first_, x, nullptr, mode);
    return ag::sigmoid(head_conv_->forward(dec[0]));
  }
  auto first = run_stage(first_, x, nullptr, mode);
  auto bridged = bridge_->forward(first[0], mode);
  auto second = run_stage(second_, bridged, &first, mode);
  return ag::sigmoid(head_conv_->forward(head_aspp_->forward(second[0], mode)));
}

template <typename T>
Tensor<T> SegmentationModel<T>::predict(const Tensor<T>& x) {
  ag::NoGradGuard guard;
  return forward(ag::Var<T>(x), Mode::kEval).value();
}

template <typename T>
std::vector<BlockInfo> SegmentationModel<T>::blocks() const {
  std::vector<BlockInfo> out;
  for (const auto& [name, child] : this->children()) {
    BlockInfo info;
    info.name = name;
    info.kind = child->kind();
    info.params = child->trainable_count();
    for (const auto& [n, r] : resolution_of_) {
      if (n == name) info.resolution_level = r;
    }
    const Module<T>* m = child.get();
    if (auto* rp = dynamic_cast<const ResPath<T>*>(m)) {
      info.level = rp->level();
      info.length = rp->length();
      info.filters = rp->filters();
      info.out_channels = rp->filters();
    } else if (auto* mr = dynamic_cast<const MultiResBlock<T>*>(m)) {
      info.level = mr->level();
      const auto f = mr->conv_filters();
      info.multires_filters.assign(f.begin(), f.end());
      info.out_channels = mr->out_channels();
    } else if (auto* sb = dynamic_cast<const StandardBlock<T>*>(m)) {
      info.level = info.resolution_level < 4 ? info.resolution_level + 1 : 0;
      info.out_channels = sb->out_channels();
      info.filters = sb->out_channels();
    } else if (auto* as = dynamic_cast<const Aspp<T>*>(m)) {
      info.filters = as->filters();
      info.dilations = as->dilations();
      info.out_channels = as->filters();
    } else if (auto* up = dynamic_cast<const Upsample<T>*>(m)) {
      info.filters = up->filters();
      info.out_channels = up->filters();
    } else if (auto* cv = dynamic_cast<const Conv2d<T>*>(m)) {
      info.filters = cv->filters();
      info.out_channels = cv->filters();
      if (name.rfind("pool_conv", 0) == 0) info.level = info.resolution_level + 1;
    } else if (auto* br = dynamic_cast<const Bridge<T>*>(m)) {
      info.out_channels = br->out_channels();
    }
    out.push_back(std::move(info));
  }
  return out;
}

ScheduleCensus schedule_census(ModelVariant variant, const std::vector<BlockInfo>& blocks) {
  struct PathRow {
    const char* name;
    int length;
    int filters;
  };
  static constexpr PathRow kPaths[] = {
      {"respath01", 4, 32},  {"respath02", 3, 64},  {"respath03", 2, 128}, {"respath04", 1, 256},
      {"respath05", 3, 64},  {"respath06", 2, 128}, {"respath07", 1, 256}, {"respath08", 4, 32},
      {"respath09", 3, 64},  {"respath10", 2, 128}, {"respath11", 1, 256},
  };
  const FilterSchedule reference;
  const bool want_paths = variant == ModelVariant::kConnectedUnetsPlus || variant == ModelVariant::kConnectedUnetsPlusPlus;
  const bool want_multires = variant == ModelVariant::kConnectedUnetsPlusPlus;

  ScheduleCensus c;
  std::vector<const BlockInfo*> paths;
  std::array<int, 4> per_level{};
  for (const auto& b : blocks) {
    if (b.kind == "respath") paths.push_back(&b);
    if (b.kind != "multires_block") continue;
    ++c.multires_blocks;
    if (b.level < 1 || b.level > 4) {
      c.mismatches.push_back(b.name + ": level " + std::to_string(b.level) + " out of range");
      continue;
    }
    ++per_level[b.level - 1];
    const auto& triple = reference.multires_3x3_filters[b.level - 1];
    if (b.multires_filters != std::vector<int>(triple.begin(), triple.end())) {
      c.mismatches.push_back(b.name + ": 3x3 widths differ from the level " + std::to_string(b.level) + " triple");
    }
    const int sum = std::accumulate(b.multires_filters.begin(), b.multires_filters.end(), 0);
    if (sum != b.out_channels || sum != reference.multires_1x1_filters[b.level - 1]) {
      c.mismatches.push_back(b.name + ": 3x3 widths sum to " + std::to_string(sum) + ", block width " +
                             std::to_string(b.out_channels));
    }
  }
  c.respaths = static_cast<int>(paths.size());
  std::sort(paths.begin(), paths.end(), [](const BlockInfo* a, const BlockInfo* b) { return a->name < b->name; });

  const std::size_t want_count = want_paths ? std::size(kPaths) : 0;
  if (paths.size() != want_count) {
    c.mismatches.push_back(std::to_string(paths.size()) + " ResPaths, expected " + std::to_string(want_count));
  } else if (want_paths) {
    for (std::size_t i = 0; i < paths.size(); ++i) {
      const BlockInfo& b = *paths[i];
      const PathRow& row = kPaths[i];
      if (b.name != row.name || b.length != row.length || b.filters != row.filters) {
        c.mismatches.push_back(b.name + ": (" + std::to_string(b.length) + ", " + std::to_string(b.filters) +
                               "), expected " + row.name + " (" + std::to_string(row.length) + ", " +
                               std::to_string(row.filters) + ")");
      }
    }
  }
  for (int l = 0; l < 4; ++l) {
    const int want = want_multires ? 4 : 0;
    if (per_level[l] != want) {
      c.mismatches.push_back("level " + std::to_string(l + 1) + ": " + std::to_string(per_level[l]) +
                             " MultiRes blocks, expected " + std::to_string(want));
    }
  }
  return c;
}

template class Bridge<float>;
template class Bridge<double>;
template class SegmentationModel<float>;
template class SegmentationModel<double>;

}  // namespace massseg
