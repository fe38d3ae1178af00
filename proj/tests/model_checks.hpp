#pragma once

// Architecture checks shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "massseg/models.hpp"

namespace checks {

using namespace massseg;

inline bool within(double value, double target, double rel) { return std::abs(value - target) <= rel * target; }

struct ExpectedPath {
  const char* name;
  int length;
  int filters;
};

inline const std::vector<ExpectedPath>& expected_respaths() {
  static const std::vector<ExpectedPath> table = {
      {"respath01", 4, 32},  {"respath02", 3, 64},  {"respath03", 2, 128}, {"respath04", 1, 256},
      {"respath05", 3, 64},  {"respath06", 2, 128}, {"respath07", 1, 256}, {"respath08", 4, 32},
      {"respath09", 3, 64},  {"respath10", 2, 128}, {"respath11", 1, 256},
  };
  return table;
}

struct Census {
  int respaths = 0;
  int multires = 0;
  std::vector<std::string> failures;
};

/// ResPath names, lengths and widths against the fixed table; for MultiRes models also the
/// per-level 3x3 triples, their sums and four blocks per level.
template <typename T>
Census census(const SegmentationModel<T>& model) {
  Census c;
  const auto blocks = model.blocks();
  const FilterSchedule& s = model.options().schedule;
  std::vector<const BlockInfo*> paths;
  for (const auto& b : blocks) {
    if (b.kind == "respath") paths.push_back(&b);
  }
  c.respaths = static_cast<int>(paths.size());
  std::sort(paths.begin(), paths.end(), [](const BlockInfo* a, const BlockInfo* b) { return a->name < b->name; });
  const auto& expected = expected_respaths();
  if (paths.size() != expected.size()) {
    c.failures.push_back("found " + std::to_string(paths.size()) + " ResPaths, expected 11");
  } else {
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto& e = expected[i];
      const BlockInfo& b = *paths[i];
      if (b.name != e.name || b.length != e.length || b.filters != e.filters) {
        c.failures.push_back(b.name + " is (" + std::to_string(b.length) + ", " + std::to_string(b.filters) +
                             "), expected " + e.name + " (" + std::to_string(e.length) + ", " +
                             std::to_string(e.filters) + ")");
      }
    }
  }
  const bool multires = model.variant() == ModelVariant::kConnectedUnetsPlusPlus;
  std::array<int, 4> per_level{};
  for (const auto& b : blocks) {
    if (b.kind != "multires_block") continue;
    ++c.multires;
    if (b.level < 1 || b.level > 4) {
      c.failures.push_back(b.name + " has level " + std::to_string(b.level));
      continue;
    }
    ++per_level[b.level - 1];
    const auto& want = s.multires_3x3_filters[b.level - 1];
    if (b.multires_filters != std::vector<int>(want.begin(), want.end())) {
      c.failures.push_back(b.name + " has the wrong 3x3 filter triple");
    }
    const int sum = std::accumulate(b.multires_filters.begin(), b.multires_filters.end(), 0);
    if (sum != b.out_channels || sum != s.multires_1x1_filters[b.level - 1]) {
      c.failures.push_back(b.name + " triple sums to " + std::to_string(sum) + ", 1x1 width " +
                           std::to_string(b.out_channels));
    }
  }
  for (int l = 0; l < 4; ++l) {
    const int want = multires ? 4 : 0;
    if (per_level[l] != want) {
      c.failures.push_back("level " + std::to_string(l + 1) + " has " + std::to_string(per_level[l]) +
                           " MultiRes blocks, expected " + std::to_string(want));
    }
  }
  return c;
}

/// Names of trainable parameters whose gradient is missing or identically zero.
template <typename T>
std::vector<std::string> dead_parameter_groups(SegmentationModel<T>& model) {
  std::vector<std::string> dead;
  model.visit_parameters(typename Module<T>::Visitor([&](const std::string& name, Parameter<T>& p) {
    if (!p.trainable) return;
    const auto& g = p.var.grad();
    if (g.empty() || std::all_of(g.values().begin(), g.values().end(), [](T v) { return v == T(0); })) {
      dead.push_back(name);
    }
  }));
  return dead;
}

/// Trainable leaves of `module` and a probe source that picks a parameter tensor uniformly and
/// then an element uniformly.
struct ProbeSource {
  std::vector<ag::Var<double>*> leaves;
  std::vector<std::string> names;
  Rng* rng = nullptr;

  gradcheck::Probe operator()() const {
    const std::size_t l = rng->below(leaves.size());
    return {leaves[l], rng->below(leaves[l]->value().size()), names[l]};
  }
};

inline ProbeSource probe_source(Module<double>& module, Rng& rng) {
  ProbeSource s;
  s.rng = &rng;
  module.visit_parameters(Module<double>::Visitor([&](const std::string& name, Parameter<double>& p) {
    if (!p.trainable) return;
    s.leaves.push_back(&p.var);
    s.names.push_back(name);
  }));
  return s;
}

inline constexpr double kStep = 1e-7;

/// Central differences (tolerance 1e-3, floor 1e-7) on `samples` sampled parameters of a
/// double-precision block; the loss is a random weighting of the training-mode output.
inline gradcheck::Result block_gradcheck(Block<double>& block, const Shape& input_shape, std::uint64_t seed,
                                         int samples) {
  Rng rng(seed);
  const ag::Var<double> x(gradcheck::random_tensor(rng, input_shape), false);
  const Shape out_shape = block.forward(x, Mode::kTrain).value().shape();
  const Tensor<double> w = gradcheck::random_tensor(rng, out_shape);
  const ProbeSource s = probe_source(block, rng);
  return gradcheck::run_sampled([&] { return ag::weighted_sum(block.forward(x, Mode::kTrain), w); }, s.leaves, s,
                                samples, kStep, 1e-3, 1e-7);
}

/// Same check on a whole double-precision model with a single-image batch.
inline gradcheck::Result model_gradcheck(ModelVariant variant, int size, std::uint64_t seed, int samples) {
  auto model = build_model<double>(variant, size, seed);
  Rng rng(seed);
  const ag::Var<double> x(gradcheck::random_tensor(rng, {1, size, size, 1}), false);
  const Tensor<double> w = gradcheck::random_tensor(rng, {1, size, size, 1});
  const ProbeSource s = probe_source(*model, rng);
  return gradcheck::run_sampled([&] { return ag::weighted_sum(model->forward(x, Mode::kTrain), w); }, s.leaves, s,
                                samples, kStep, 1e-3, 1e-7);
}

}  // namespace checks
