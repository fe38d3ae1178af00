#include "doctest.h"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "gradcheck.hpp"
#include "massseg/data_io.hpp"
#include "massseg/log.hpp"
#include "massseg/training.hpp"
#include "scratch_dir.hpp"

using namespace massseg;

namespace {

std::vector<CasePair> blank_cases(std::size_t n) {
  std::vector<CasePair> cases(n);
  for (std::size_t i = 0; i < n; ++i) cases[i].source_id = "c" + std::to_string(i);
  return cases;
}

std::vector<CasePair> small_synthetic(int n, int size, std::uint64_t seed = 7) {
  SyntheticSpec spec;
  spec.n_cases = n;
  spec.size = size;
  spec.blob_radius_min = 3;
  spec.blob_radius_max = size / 6.0;
  spec.seed = seed;
  return generate_synthetic(spec);
}

TrainConfig quick_config(int size) {
  TrainConfig cfg;
  cfg.input_size = size;
  cfg.batch_size = 4;
  cfg.max_epochs = 3;
  return cfg;
}

Parameter<float>& head_bias(SegmentationModel<float>& model) {
  Parameter<float>* found = nullptr;
  model.visit_parameters(Module<float>::Visitor([&](const std::string& name, Parameter<float>& p) {
    if (name.find("output_conv1x1") != std::string::npos && name.find("bias") != std::string::npos) found = &p;
  }));
  REQUIRE(found != nullptr);
  return *found;
}

struct QuietLog {
  log::Level saved = log::level();
  QuietLog() { log::set_level(log::Level::kQuiet); }
  ~QuietLog() { log::set_level(saved); }
};

// Textbook Adam written out independently, one scalar at a time.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double p, double g, double lr) {
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t));
    const double vh = v / (1 - std::pow(0.999, t));
    return p - lr * mh / (std::sqrt(vh) + 1e-8);
  }
};

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("split sizes follow round(f * N)") {
    auto s = split_indices(1231, 0.15, 42);
    CHECK(s.train.size() == 1046);
    CHECK(s.val.size() == 185);
    s = split_indices(86, 0.2, 42);
    CHECK(s.train.size() == 69);
    CHECK(s.val.size() == 17);
    const auto d = split_dataset(blank_cases(86), 0.2, 1);
    CHECK(d.train.size() == 69);
    CHECK(d.val.size() == 17);
  }

  TEST_CASE("splits are deterministic, disjoint and covering") {
    for (std::uint64_t seed : {0u, 1u, 99u}) {
      const auto a = split_indices(100, 0.15, seed);
      const auto b = split_indices(100, 0.15, seed);
      CHECK(a.train == b.train);
      CHECK(a.val == b.val);
      std::set<std::size_t> all(a.train.begin(), a.train.end());
      for (auto i : a.val) CHECK(all.insert(i).second);
      CHECK(all.size() == 100);
      CHECK(*all.rbegin() == 99);
    }
    CHECK_FALSE(split_indices(100, 0.15, 1).val == split_indices(100, 0.15, 2).val);
  }

  TEST_CASE("split errors") {
    CHECK_THROWS_AS(split_indices(1, 0.5, 0), InputError);
    CHECK_THROWS_AS(split_dataset(blank_cases(0), 0.5, 0), InputError);
    CHECK_THROWS_AS(split_indices(10, 0.0, 0), ConfigError);
    CHECK_THROWS_AS(split_indices(10, 1.0, 0), ConfigError);
    CHECK_THROWS_AS(split_indices(3, 0.1, 0), ConfigError);
  }

  TEST_CASE("bce closed forms") {
    BinaryMask t(4, 4);
    t(1, 1) = t(2, 3) = 1;
    FloatImage half(4, 4, 0.5f);
    CHECK(bce_loss(half, t) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    FloatImage perfect(4, 4);
    for (std::size_t i = 0; i < t.size(); ++i) perfect.data()[i] = t.data()[i];
    CHECK(bce_loss(perfect, t) == doctest::Approx(-std::log(1 - 1e-7)).epsilon(1e-9));
    CHECK(bce_loss(perfect, t) < 1e-6);
    FloatImage wrong(4, 4);
    for (std::size_t i = 0; i < t.size(); ++i) wrong.data()[i] = 1.0f - t.data()[i];
    CHECK(bce_loss(wrong, t) == doctest::Approx(-std::log(1e-7)).epsilon(1e-6));
    CHECK_THROWS_AS(bce_loss(FloatImage(4, 5, 0.5f), t), InputError);
  }

  TEST_CASE("bce matches the graph loss and its gradient") {
    Rng rng(4);
    FloatImage p(6, 7);
    BinaryMask t(6, 7);
    Tensor<double> pd({1, 6, 7, 1}), td({1, 6, 7, 1});
    for (std::size_t i = 0; i < p.size(); ++i) {
      p.data()[i] = static_cast<float>(rng.uniform(0.05, 0.95));
      t.data()[i] = rng.uniform() < 0.3;
      pd[i] = p.data()[i];
      td[i] = t.data()[i];
    }
    ag::Var<double> pred(pd, true);
    CHECK(ag::binary_cross_entropy(pred, td).value()[0] == doctest::Approx(bce_loss(p, t)).epsilon(1e-12));
    const auto r = gradcheck::run([&] { return ag::binary_cross_entropy(pred, td); }, {&pred},
                                  gradcheck::all_probes({&pred}), 1e-6, 1e-6, 1e-8);
    INFO(r.worst);
    CHECK(r.failures == 0);
    CHECK(r.max_rel_error < 1e-6);
  }

  TEST_CASE("adam: zero gradients leave parameters unchanged") {
    std::vector<double> p{1.0, -2.0, 0.5}, g(3, 0.0);
    AdamMoments st;
    for (int i = 0; i < 5; ++i) adam_step<double>(p, g, st, 1e-3);
    CHECK(p == std::vector<double>{1.0, -2.0, 0.5});
  }

  TEST_CASE("adam: first step moves by lr against the gradient sign") {
    for (double g : {3.0, -0.02, 1e-3}) {
      std::vector<double> p{0.25}, gv{g};
      AdamMoments st;
      adam_step<double>(p, gv, st, 1e-4);
      const double expected = 0.25 - 1e-4 * g / (std::abs(g) + 1e-8);
      CHECK(p[0] == doctest::Approx(expected).epsilon(1e-14));
      CHECK(std::abs(p[0] - 0.25) == doctest::Approx(1e-4).epsilon(1e-4));
    }
  }

  TEST_CASE("adam matches a scalar reference over many steps") {
    Rng rng(8);
    std::vector<double> p(5), g(5);
    for (auto& v : p) v = rng.normal();
    std::vector<double> ref = p;
    std::vector<ScalarAdam> oracle(5);
    AdamMoments st;
    for (int step = 0; step < 50; ++step) {
      for (auto& v : g) v = rng.normal();
      adam_step<double>(p, g, st, 1e-2);
      for (int i = 0; i < 5; ++i) ref[i] = oracle[i].step(ref[i], g[i], 1e-2);
    }
    for (int i = 0; i < 5; ++i) CHECK(p[i] == doctest::Approx(ref[i]).epsilon(1e-13));
  }

  TEST_CASE("adam: constant gradient gives monotone drift") {
    std::vector<float> p{1.0f}, g{0.7f};
    AdamMoments st;
    float prev = p[0];
    for (int i = 0; i < 100; ++i) {
      adam_step<float>(p, g, st, 1e-3);
      CHECK(p[0] < prev);
      prev = p[0];
    }
    CHECK_THROWS_AS(adam_step<float>(p, std::vector<float>{1.0f, 2.0f}, st, 1e-3), ConfigError);
  }

  TEST_CASE("plateau tracker") {
    PlateauTracker t(3);
    CHECK(t.update(1.0));
    CHECK_FALSE(t.update(1.0));
    CHECK_FALSE(t.update(2.0));
    CHECK_FALSE(t.exhausted());
    CHECK_FALSE(t.update(1.5));
    CHECK(t.exhausted());
    CHECK(t.update(0.9));
    CHECK(t.wait() == 0);
    CHECK(t.best() == 0.9);
    CHECK_THROWS_AS(PlateauTracker(0), ConfigError);
  }

  TEST_CASE("config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    auto bad = [](auto mutate) {
      TrainConfig c;
      mutate(c);
      CHECK_THROWS_AS(c.validate(), ConfigError);
    };
    bad([](TrainConfig& c) { c.learning_rate = 0; });
    bad([](TrainConfig& c) { c.batch_size = 0; });
    bad([](TrainConfig& c) { c.val_fraction = 1.0; });
    bad([](TrainConfig& c) { c.lr_reduce_factor = 1.0; });
    bad([](TrainConfig& c) { c.min_lr = 1.0; });
    bad([](TrainConfig& c) { c.input_size = 100; });
  }

  TEST_CASE("train rejects mismatched inputs") {
    QuietLog quiet;
    auto model = build_model<float>(ModelVariant::kUnet, 32, 1);
    auto cfg = quick_config(32);
    CHECK_THROWS_AS(train(*model, {}, {}, cfg), InputError);
    CHECK_THROWS_AS(train(*model, small_synthetic(2, 64), {}, cfg), InputError);
    cfg.input_size = 64;
    CHECK_THROWS_AS(train(*model, small_synthetic(2, 64), {}, cfg), ConfigError);
  }

  TEST_CASE("non-finite loss names the epoch and batch") {
    QuietLog quiet;
    auto model = build_model<float>(ModelVariant::kUnet, 32, 1);
    head_bias(*model).value().fill(std::numeric_limits<float>::quiet_NaN());
    try {
      train(*model, small_synthetic(2, 32), {}, quick_config(32));
      FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
      CHECK(std::string(e.what()).find("epoch 0, batch 0") != std::string::npos);
    }
  }

  TEST_CASE("history invariants, checkpoints and best-weight restore") {
    QuietLog quiet;
    testing::ScratchDir dir("train");
    const auto cases = small_synthetic(6, 32);
    const auto split = split_dataset(cases, 0.34, 3);
    auto model = build_model<float>(ModelVariant::kUnet, 32, 2);
    auto cfg = quick_config(32);
    cfg.max_epochs = 12;
    cfg.batch_size = 3;
    cfg.learning_rate = 3e-3;
    cfg.lr_reduce_patience = 1;
    cfg.early_stop_patience = 3;
    cfg.checkpoint_path = dir.path() / "best.ckpt";
    const TrainHistory h = train(*model, split.train, split.val, cfg);

    REQUIRE_FALSE(h.epochs.empty());
    CHECK(h.monitor == "val_loss");
    for (std::size_t i = 1; i < h.epochs.size(); ++i) CHECK(h.epochs[i].learning_rate <= h.epochs[i - 1].learning_rate);
    double best = std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    for (const auto& e : h.epochs) {
      REQUIRE(e.val_loss.has_value());
      CHECK(e.learning_rate >= cfg.min_lr);
      if (*e.val_loss < best) {
        best = *e.val_loss;
        best_epoch = e.epoch;
      }
    }
    CHECK(h.best_epoch == best_epoch);
    const int last = h.epochs.back().epoch;
    if (h.stopped_early) {
      CHECK(last - h.best_epoch == cfg.early_stop_patience);
    } else {
      CHECK(last == cfg.max_epochs - 1);
      CHECK(last - h.best_epoch < cfg.early_stop_patience);
    }

    // The restored model reproduces the best validation loss and equals the checkpoint.
    const auto probs = predict_cases(*model, split.val);
    double vl = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) vl += bce_loss(probs[i], split.val[i].mask);
    CHECK(vl / probs.size() == doctest::Approx(best).epsilon(1e-5));
    CHECK(read_checkpoint_info(*cfg.checkpoint_path).meta.at("epoch") == h.best_epoch);
    auto loaded = load_checkpoint(*cfg.checkpoint_path);
    const auto a = evaluate(*model, cases), b = evaluate(*loaded, cases);
    CHECK(a.mean_dice == b.mean_dice);
    CHECK(a.mean_iou == b.mean_iou);
    CHECK(a.mean_accuracy == b.mean_accuracy);

    const auto j = to_json(h);
    CHECK(j.at("epochs").size() == h.epochs.size());
    CHECK(j.at("best_epoch") == h.best_epoch);
    h.write_csv(dir.path() / "epochs.csv");
    std::ifstream csv(dir.path() / "epochs.csv");
    std::string line;
    int lines = 0;
    while (std::getline(csv, line)) ++lines;
    CHECK(lines == static_cast<int>(h.epochs.size()) + 1);
  }

  TEST_CASE("early stopping fires on a stagnant monitor") {
    QuietLog quiet;
    auto model = build_model<float>(ModelVariant::kUnet, 32, 3);
    auto cases = small_synthetic(4, 32);
    for (auto& c : cases) c.mask = BinaryMask(32, 32);
    auto cfg = quick_config(32);
    cfg.max_epochs = 40;
    cfg.early_stop_patience = 5;
    cfg.lr_reduce_patience = 2;
    cfg.learning_rate = 1e-6;
    cfg.min_lr = 1e-6;
    // A saturated head on empty masks gives every pixel the same clamped loss, so no epoch improves.
    head_bias(*model).value().fill(-1e4f);
    const TrainHistory h = train(*model, cases, {}, cfg);
    CHECK(h.stopped_early);
    CHECK(h.epochs.back().epoch - h.best_epoch == 5);
    CHECK(h.epochs.size() < 40);
  }

  TEST_CASE("same seed gives a bit-identical epoch-0 loss") {
    QuietLog quiet;
    const auto cases = small_synthetic(6, 32);
    auto cfg = quick_config(32);
    cfg.max_epochs = 1;
    auto run = [&] {
      auto model = build_model<float>(ModelVariant::kUnet, 32, 5);
      return train(*model, cases, {}, cfg).epochs.at(0).train_loss;
    };
    const double a = run(), b = run();
    CHECK(a == b);
  }

  TEST_CASE("callback can stop training and keeps that epoch's weights") {
    QuietLog quiet;
    testing::ScratchDir dir("callback");
    auto model = build_model<float>(ModelVariant::kUnet, 32, 3);
    auto cfg = quick_config(32);
    cfg.max_epochs = 10;
    cfg.checkpoint_path = dir.path() / "model.ckpt";
    const auto cases = small_synthetic(2, 32);
    int calls = 0;
    Tensor<float> at_stop;
    const auto h = train(*model, cases, {}, cfg, [&](const EpochRecord&, SegmentationModel<float>& m) {
      if (++calls < 2) return false;
      at_stop = m.predict(make_batch(cases, std::vector<std::size_t>{0, 1}).first);
      return true;
    });
    CHECK(h.epochs.size() == 2);
    CHECK(h.stopped_early);
    CHECK(h.stopped_by_callback);
    const auto x = make_batch(cases, std::vector<std::size_t>{0, 1}).first;
    CHECK(model->predict(x) == at_stop);
    CHECK(load_checkpoint(*cfg.checkpoint_path)->predict(x) == at_stop);
    CHECK(read_checkpoint_info(*cfg.checkpoint_path).meta.at("epoch") == 1);
  }

  TEST_CASE("evaluate conventions") {
    auto model = build_model<float>(ModelVariant::kUnet, 32, 4);
    auto cases = small_synthetic(3, 32);
    const auto probs = predict_cases(*model, cases);
    auto self = cases;
    for (std::size_t i = 0; i < self.size(); ++i) self[i].mask = binarize(probs[i]);
    const MetricReport r = evaluate(*model, self);
    CHECK(r.mean_dice == 1.0);
    CHECK(r.mean_iou == 1.0);
    CHECK(r.thresholds.rows.size() == 5);
    CHECK(r.cases.size() == 3);

    head_bias(*model).value().fill(-1e4f);
    const MetricReport empty = evaluate(*model, cases);
    for (const auto& c : empty.cases) {
      CHECK(c.dice == 0.0);
      CHECK(std::isinf(c.hausdorff));
    }
    CHECK_THROWS_AS(evaluate(*model, {}), InputError);
    CHECK_THROWS_AS(evaluate(*model, small_synthetic(1, 64)), InputError);
  }

  TEST_CASE("one small Adam step lowers the same batch's loss" * doctest::test_suite("training_slow")) {
    QuietLog quiet;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      auto model = build_model<float>(ModelVariant::kConnectedUnetsPlusPlus, 32, seed);
      const auto cases = small_synthetic(2, 32, seed + 10);
      auto [x, y] = make_batch(cases, std::vector<std::size_t>{0, 1});
      Adam opt(model->trainable_parameters());
      auto loss_of = [&] {
        return ag::binary_cross_entropy(model->forward(ag::Var<float>(x, false), Mode::kTrain), y);
      };
      model->zero_grad();
      auto loss = loss_of();
      const double before = loss.value()[0];
      loss.backward();
      opt.step(1e-4);
      ag::NoGradGuard guard;
      const double after = loss_of().value()[0];
      INFO("seed " << seed << " before " << before << " after " << after);
      CHECK(after < before);
    }
  }

  TEST_CASE("training loss falls for every variant" * doctest::test_suite("training_slow")) {
    QuietLog quiet;
    const auto cases = small_synthetic(4, 32);
    for (ModelVariant v : all_variants()) {
      auto model = build_model<float>(v, 32, 1);
      auto cfg = quick_config(32);
      cfg.max_epochs = 50;
      cfg.early_stop_patience = 50;
      cfg.lr_reduce_patience = 50;
      const auto h = train(*model, cases, {}, cfg);
      INFO(to_string(v) << " epoch1 " << h.epochs.at(0).train_loss << " epoch50 " << h.epochs.at(49).train_loss);
      CHECK(h.epochs.at(49).train_loss < h.epochs.at(0).train_loss);
    }
  }
}
