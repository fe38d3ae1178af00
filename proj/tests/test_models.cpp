#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>

#include "gradcheck.hpp"
#include "massseg/log.hpp"
#include "massseg/models.hpp"
#include "model_checks.hpp"

using namespace massseg;
using ag::Var;

namespace {

template <typename T>
Var<T> input(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(scale * rng.normal());
  return Var<T>(std::move(t), false);
}

// Hand parameter formulas: conv k x k with bias, BN scale + shift.
std::int64_t conv_params(int k, int cin, int cout) { return std::int64_t{k} * k * cin * cout + cout; }
std::int64_t bn_params(int c) { return 2 * std::int64_t{c}; }

struct QuietLog {
  log::Level saved = log::level();
  QuietLog() { log::set_level(log::Level::kQuiet); }
  ~QuietLog() { log::set_level(saved); }
};

// Every parameter of `block` probed through a random linear read-out of its output.
gradcheck::Result check_block(Block<double>& block, const Shape& in_shape, std::uint64_t seed) {
  Rng rng(seed);
  initialize_parameters(block, seed);
  const Var<double> x = input<double>(rng, in_shape);
  Shape out_shape = block.forward(x, Mode::kTrain).shape();
  const Tensor<double> w = gradcheck::random_tensor(rng, out_shape);
  std::vector<Var<double>*> leaves;
  for (auto* p : block.trainable_parameters()) leaves.push_back(&p->var);
  return gradcheck::run([&] { return ag::weighted_sum(block.forward(x, Mode::kTrain), w); }, leaves,
                        gradcheck::all_probes(leaves), 1e-6, 1e-3, 1e-8);
}

}  // namespace

TEST_SUITE("models") {
  TEST_CASE("filter schedule identities") {
    const FilterSchedule s;
    for (int l = 0; l < 4; ++l) {
      const auto& t = s.multires_3x3_filters[l];
      CHECK(t[0] + t[1] + t[2] == s.multires_1x1_filters[l]);
    }
    CHECK(s.multires_1x1_filters == std::array<int, 4>{51, 105, 212, 426});
    CHECK(s.respath_lengths == std::array<int, 4>{4, 3, 2, 1});
    CHECK(s.aspp_dilations == std::vector<int>{1, 6, 8, 12});
    CHECK_NOTHROW(s.validate());
    FilterSchedule bad = s;
    bad.multires_3x3_filters[2][0] += 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s;
    bad.respath_lengths = {4, 3, 3, 1};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("conv unit shapes, linearity and errors") {
    Rng rng(1);
    ConvUnit<float> u3(3, {3, 32, 1, true, true});
    initialize_parameters(u3, 1);
    CHECK(u3.forward(input<float>(rng, {1, 8, 8, 3}), Mode::kTrain).shape() == Shape{1, 8, 8, 32});
    ConvUnit<float> u1(3, {1, 51, 1, true, true});
    initialize_parameters(u1, 1);
    CHECK(u1.forward(input<float>(rng, {1, 8, 8, 3}), Mode::kEval).shape() == Shape{1, 8, 8, 51});

    ConvUnit<float> plain(3, {3, 16, 2, true, false});
    initialize_parameters(plain, 2);
    const auto zero = plain.forward(Var<float>(Tensor<float>({1, 8, 8, 3}), false), Mode::kTrain);
    CHECK(std::all_of(zero.value().values().begin(), zero.value().values().end(), [](float v) { return v == 0.0f; }));

    CHECK_THROWS_AS(u3.forward(input<float>(rng, {1, 8, 8, 4}), Mode::kTrain), ConfigError);
    CHECK_THROWS_AS(ConvUnit<float>(3, {5, 8, 1, true, true}), ConfigError);
    CHECK_THROWS_AS(ConvUnit<float>(3, {3, 0, 1, true, true}), ConfigError);
    CHECK_THROWS_AS(ConvUnit<float>(3, {3, 8, 0, true, true}), ConfigError);
  }

  TEST_CASE("single conv parameter count") {
    Conv2d<float> c(1, 32, 3);
    CHECK(count_params(c) == 320);
  }

  TEST_CASE("multires block shapes and parameter formula") {
    Rng rng(2);
    const FilterSchedule s;
    MultiResBlock<float> l1(1, 1, s);
    initialize_parameters(l1, 3);
    CHECK(l1.forward(input<float>(rng, {1, 16, 16, 1}), Mode::kTrain).shape() == Shape{1, 16, 16, 51});
    MultiResBlock<float> l4(426, 4, s);
    initialize_parameters(l4, 3);
    CHECK(l4.forward(input<float>(rng, {1, 4, 4, 426}), Mode::kTrain).shape() == Shape{1, 4, 4, 426});

    const std::int64_t expected = conv_params(3, 1, 8) + bn_params(8) + conv_params(3, 8, 17) + bn_params(17) +
                                  conv_params(3, 17, 26) + bn_params(26) + conv_params(1, 1, 51) + bn_params(51);
    CHECK(count_params(l1) == expected);
    CHECK_THROWS_AS(MultiResBlock<float>(1, 5, s), ConfigError);
  }

  TEST_CASE("standard block shapes") {
    Rng rng(3);
    StandardBlock<float> a(1, 32);
    initialize_parameters(a, 1);
    CHECK(a.forward(input<float>(rng, {1, 16, 16, 1}), Mode::kTrain).shape() == Shape{1, 16, 16, 32});
    StandardBlock<float> b(32, 64);
    initialize_parameters(b, 1);
    CHECK(b.forward(input<float>(rng, {1, 8, 8, 32}), Mode::kTrain).shape() == Shape{1, 8, 8, 64});
    CHECK(count_params(a) == conv_params(3, 1, 32) + bn_params(32) + conv_params(3, 32, 32) + bn_params(32));
  }

  TEST_CASE("respath shapes and lengths") {
    Rng rng(4);
    const FilterSchedule s;
    ResPath<float> p1(51, 1, s);
    initialize_parameters(p1, 1);
    CHECK(p1.length() == 4);
    CHECK(p1.forward(input<float>(rng, {1, 32, 32, 51}), Mode::kTrain).shape() == Shape{1, 32, 32, 32});
    ResPath<float> p2(105, 2, s);
    CHECK(p2.length() == 3);
    CHECK(p2.filters() == 64);
    ResPath<float> p4(426, 4, s);
    initialize_parameters(p4, 1);
    CHECK(p4.length() == 1);
    CHECK(p4.forward(input<float>(rng, {1, 4, 4, 426}), Mode::kTrain).shape() == Shape{1, 4, 4, 256});
    CHECK(count_params(p4) == conv_params(3, 426, 256) + conv_params(1, 426, 256) + bn_params(256));
  }

  TEST_CASE("aspp shapes and dilations") {
    QuietLog quiet;
    Rng rng(5);
    Aspp<float> bottleneck(426, 512);
    initialize_parameters(bottleneck, 1);
    CHECK(bottleneck.dilations() == std::vector<int>{1, 6, 8, 12});
    CHECK(bottleneck.forward(input<float>(rng, {1, 14, 14, 426}), Mode::kTrain).shape() == Shape{1, 14, 14, 512});
    Aspp<float> head(51, 32);
    initialize_parameters(head, 1);
    CHECK(head.forward(input<float>(rng, {1, 56, 56, 51}), Mode::kTrain).shape() == Shape{1, 56, 56, 32});
    // Four dilated 3x3 branches, then a 1x1 projection of their concatenation.
    CHECK(count_params(head) == 4 * (conv_params(3, 51, 32) + bn_params(32)) + conv_params(1, 128, 32) + bn_params(32));
    // Smaller than the widest dilation: allowed, padding covers it.
    CHECK(head.forward(input<float>(rng, {1, 4, 4, 51}), Mode::kTrain).shape() == Shape{1, 4, 4, 32});
  }

  TEST_CASE("upsample and pooling shapes") {
    Rng rng(6);
    Upsample<float> up(512, 256);
    initialize_parameters(up, 1);
    CHECK(up.forward(input<float>(rng, {1, 14, 14, 512})).shape() == Shape{1, 28, 28, 256});
    Upsample<float> up2(64, 32);
    initialize_parameters(up2, 1);
    CHECK(up2.forward(input<float>(rng, {1, 112, 112, 64})).shape() == Shape{1, 224, 224, 32});
    const auto x = input<float>(rng, {1, 20, 20, 64});
    CHECK(up2.forward(ag::max_pool2(x)).shape() == Shape{1, 20, 20, 32});
    CHECK_THROWS_AS(up2.forward(input<float>(rng, {1, 7, 7, 64})), ConfigError);
  }

  TEST_CASE("bridge doubles channels and maps zero to zero") {
    Rng rng(7);
    Bridge<float> br(51, 32, BridgeMode::kDuplicate);
    initialize_parameters(br, 1);
    CHECK(br.out_channels() == 64);
    CHECK(br.forward(input<float>(rng, {1, 16, 16, 51}), Mode::kTrain).shape() == Shape{1, 16, 16, 64});
    Bridge<float> b2(32, 32, BridgeMode::kDuplicate);
    initialize_parameters(b2, 1);
    for (Mode m : {Mode::kTrain, Mode::kEval}) {
      const auto z = b2.forward(Var<float>(Tensor<float>({1, 64, 64, 32}), false), m);
      CHECK(z.shape() == Shape{1, 64, 64, 64});
      CHECK(std::all_of(z.value().values().begin(), z.value().values().end(), [](float v) { return v == 0.0f; }));
    }
    Bridge<float> alt(32, 32, BridgeMode::kConvWithInput);
    CHECK(alt.out_channels() == 64);
  }

  TEST_CASE("block gradients match finite differences") {
    QuietLog quiet;
    FilterSchedule small;
    small.respath_filters = {4, 5, 6, 7};
    SUBCASE("multires level 1") {
      MultiResBlock<double> b(1, 1, FilterSchedule{});
      const auto r = check_block(b, {1, 8, 8, 1}, 11);
      INFO(r.worst);
      CHECK(r.checked == count_params(b));
      CHECK(r.failures == 0);
    }
    SUBCASE("respath level 1") {
      ResPath<double> p(3, 1, small);
      const auto r = check_block(p, {1, 8, 8, 3}, 12);
      INFO(r.worst);
      CHECK(r.checked == count_params(p));
      CHECK(r.failures == 0);
    }
    SUBCASE("aspp") {
      Aspp<double> a(3, 4);
      const auto r = check_block(a, {1, 8, 8, 3}, 13);
      INFO(r.worst);
      CHECK(r.checked == count_params(a));
      CHECK(r.failures == 0);
    }
    SUBCASE("standard residual block") {
      StandardBlock<double> b(2, 6, true);
      const auto r = check_block(b, {2, 8, 8, 2}, 14);
      INFO(r.worst);
      CHECK(r.failures == 0);
    }
  }

  TEST_CASE("parameter counts") {
    std::map<ModelVariant, std::int64_t> counts;
    for (ModelVariant v : all_variants()) counts[v] = count_params(*build_model<float>(v, 224, 1));
    CHECK(checks::within(counts[ModelVariant::kConnectedUnetsPlusPlus], 28.15e6, 0.05));
    CHECK(checks::within(counts[ModelVariant::kConnectedUnetsPlus], 23.5e6, 0.05));
    CHECK(checks::within(counts[ModelVariant::kUnet], 7.8e6, 0.05));
    CHECK(counts[ModelVariant::kConnectedUnetsPlusPlus] > counts[ModelVariant::kConnectedUnetsPlus]);
    CHECK(counts[ModelVariant::kConnectedUnetsPlus] > counts[ModelVariant::kConnectedUnets]);
    CHECK(counts[ModelVariant::kConnectedUnets] > counts[ModelVariant::kUnet]);
    for (ModelVariant v : all_variants()) {
      for (int size : {64, 128}) CHECK(count_params(*build_model<float>(v, size, 2)) == counts[v]);
    }
  }

  TEST_CASE("respath and multires census") {
    for (ModelVariant v : {ModelVariant::kConnectedUnetsPlus, ModelVariant::kConnectedUnetsPlusPlus}) {
      const auto model = build_model<float>(v, 64, 1);
      const auto census = checks::census(*model);
      INFO(to_string(v));
      CHECK(census.failures.empty());
      for (const auto& f : census.failures) INFO(f);
    }
    const auto unet = build_model<float>(ModelVariant::kUnet, 64, 1);
    for (const auto& b : unet->blocks()) CHECK(b.kind != "respath");
  }

  TEST_CASE("identical seeds give identical parameters") {
    auto a = build_model<float>(ModelVariant::kConnectedUnetsPlus, 32, 9);
    auto b = build_model<float>(ModelVariant::kConnectedUnetsPlus, 32, 9);
    auto c = build_model<float>(ModelVariant::kConnectedUnetsPlus, 32, 10);
    std::vector<const Tensor<float>*> va, vb, vc;
    auto collect = [](const SegmentationModel<float>& m, std::vector<const Tensor<float>*>& out) {
      m.visit_parameters(Module<float>::ConstVisitor(
          [&](const std::string&, const Parameter<float>& p) { out.push_back(&p.value()); }));
    };
    collect(*a, va);
    collect(*b, vb);
    collect(*c, vc);
    REQUIRE(va.size() == vb.size());
    bool differs = false;
    for (std::size_t i = 0; i < va.size(); ++i) {
      CHECK(*va[i] == *vb[i]);
      differs = differs || !(*va[i] == *vc[i]);
    }
    CHECK(differs);
  }

  TEST_CASE("forward contracts and output range") {
    QuietLog quiet;
    Rng rng(8);
    for (ModelVariant v : all_variants()) {
      auto model = build_model<float>(v, 32, 3);
      INFO(to_string(v));
      for (double scale : {1.0, 1e3, -1e3}) {
        for (Mode mode : {Mode::kTrain, Mode::kEval}) {
          const auto y = model->forward(input<float>(rng, {2, 32, 32, 1}, scale), mode);
          CHECK(y.shape() == Shape{2, 32, 32, 1});
          CHECK(std::all_of(y.value().values().begin(), y.value().values().end(),
                            [](float p) { return p > 0.0f && p < 1.0f; }));
        }
      }
      CHECK_THROWS_AS(model->predict(Tensor<float>({1, 64, 64, 1})), InputError);
      CHECK_THROWS_AS(model->predict(Tensor<float>({1, 32, 32, 3})), InputError);
    }
    CHECK(build_model<float>(ModelVariant::kConnectedUnetsPlusPlus, 64, 1)->predict(Tensor<float>({1, 64, 64, 1})).shape() ==
          Shape{1, 64, 64, 1});
  }

  TEST_CASE("invalid input sizes") {
    for (int size : {0, 16, 40, 48, 100}) CHECK_THROWS_AS(build_model<float>(ModelVariant::kUnet, size, 1), ConfigError);
    CHECK_THROWS_AS(parse_variant("unet3"), ConfigError);
    for (ModelVariant v : all_variants()) CHECK(parse_variant(to_string(v)) == v);
  }

  TEST_CASE("every parameter group receives gradient") {
    QuietLog quiet;
    Rng rng(9);
    for (ModelVariant v : all_variants()) {
      auto model = build_model<float>(v, 32, 4);
      model->zero_grad();
      ag::mean(model->forward(input<float>(rng, {2, 32, 32, 1}), Mode::kTrain)).backward();
      const auto dead = checks::dead_parameter_groups(*model);
      INFO(to_string(v));
      for (const auto& d : dead) INFO(d);
      CHECK(dead.empty());
    }
  }

  TEST_CASE("desk-scale model gradient check" * doctest::test_suite("models_slow")) {
    QuietLog quiet;
    const auto r = checks::model_gradcheck(ModelVariant::kConnectedUnetsPlusPlus, 32, 21, 200);
    INFO(r.worst);
    CHECK(r.checked >= 200);
    CHECK(r.failures == 0);
  }
}
