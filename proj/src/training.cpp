#include "massseg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "massseg/data_io.hpp"
#include "massseg/log.hpp"
#include "massseg/random.hpp"

namespace massseg {

namespace {

constexpr double kBceEps = 1e-7;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void check_case(const CasePair& c, int size, const char* set) {
  if (c.image.height() != size || c.image.width() != size) {
    throw InputError(std::string(set) + " case " + c.source_id + " is " + dims_string(c.image.height(), c.image.width()) +
                     ", expected " + dims_string(size, size));
  }
  if (!c.mask.same_dims(c.image)) throw InputError(std::string(set) + " case " + c.source_id + " lacks a matching mask");
}

FloatImage slice(const Tensor<float>& t, int n) {
  FloatImage img(t.height(), t.width());
  std::copy_n(t.data() + t.offset(n, 0, 0, 0), img.size(), img.data());
  return img;
}

std::vector<Tensor<float>> snapshot(SegmentationModel<float>& model) {
  std::vector<Tensor<float>> out;
  model.visit_parameters(Module<float>::Visitor([&](const std::string&, Parameter<float>& p) { out.push_back(p.value()); }));
  return out;
}

void restore(SegmentationModel<float>& model, const std::vector<Tensor<float>>& values) {
  std::size_t i = 0;
  model.visit_parameters(Module<float>::Visitor([&](const std::string&, Parameter<float>& p) { p.value() = values[i++]; }));
}

std::string opt_csv(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be at least 1");
  if (lr_reduce_patience < 1) throw ConfigError("lr_reduce_patience must be at least 1");
  if (!(lr_reduce_factor > 0.0 && lr_reduce_factor < 1.0)) throw ConfigError("lr_reduce_factor must lie in (0, 1)");
  if (!(min_lr >= 0.0) || min_lr > learning_rate) throw ConfigError("min_lr must lie in [0, learning_rate]");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  validate_input_size(input_size);
}

void TrainHistory::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,train_loss,val_loss,train_dice,val_dice,learning_rate,seconds\n";
  for (const auto& e : epochs) {
    out << e.epoch << ',' << fmt(e.train_loss) << ',' << opt_csv(e.val_loss) << ',' << fmt(e.train_dice) << ','
        << opt_csv(e.val_dice) << ',' << fmt(e.learning_rate) << ',' << fmt(e.seconds) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

nlohmann::json to_json(const TrainHistory& history) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : history.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_loss", e.val_loss ? nlohmann::json(*e.val_loss) : nlohmann::json(nullptr)},
                      {"train_dice", e.train_dice},
                      {"val_dice", e.val_dice ? nlohmann::json(*e.val_dice) : nlohmann::json(nullptr)},
                      {"learning_rate", e.learning_rate},
                      {"seconds", e.seconds}});
  }
  return {{"epochs", epochs},
          {"best_epoch", history.best_epoch},
          {"stopped_early", history.stopped_early},
          {"stopped_by_callback", history.stopped_by_callback},
          {"monitor", history.monitor}};
}

SplitIndices split_indices(std::size_t n, double val_fraction, std::uint64_t seed) {
  if (n < 2) throw InputError("need at least 2 cases to split, got " + std::to_string(n));
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  if (n_val == 0 || n_val >= n) {
    throw ConfigError("val_fraction " + fmt(val_fraction) + " leaves an empty split for " + std::to_string(n) + " cases");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  SplitIndices out;
  out.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  out.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.train.begin(), out.train.end());
  return out;
}

DatasetSplit split_dataset(const std::vector<CasePair>& cases, double val_fraction, std::uint64_t seed) {
  const SplitIndices idx = split_indices(cases.size(), val_fraction, seed);
  DatasetSplit out;
  for (auto i : idx.train) out.train.push_back(cases[i]);
  for (auto i : idx.val) out.val.push_back(cases[i]);
  return out;
}

double bce_loss(const FloatImage& pred, const BinaryMask& target) {
  if (!pred.same_dims(target)) {
    throw InputError("bce_loss: prediction " + dims_string(pred.height(), pred.width()) + " vs target " +
                     dims_string(target.height(), target.width()));
  }
  if (pred.empty()) throw InputError("bce_loss: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(static_cast<double>(pred.data()[i]), kBceEps, 1.0 - kBceEps);
    sum -= target.data()[i] ? std::log(p) : std::log(1.0 - p);
  }
  return sum / static_cast<double>(pred.size());
}

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamMoments& state, double lr,
               const AdamOptions& options) {
  if (params.size() != grads.size()) throw ConfigError("adam_step: parameter and gradient sizes differ");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw ConfigError("adam_step: moment size does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(options.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(options.beta2, static_cast<double>(state.step));
  const double b1 = options.beta1, b2 = options.beta2, eps = options.epsilon;
  const double step_size = lr / c1, inv_sqrt_c2 = 1.0 / std::sqrt(c2);
  T* __restrict p = params.data();
  const T* __restrict g = grads.data();
  double* __restrict m = state.m.data();
  double* __restrict v = state.v.data();
  const std::size_t n = params.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double gi = g[i];
    m[i] = b1 * m[i] + (1.0 - b1) * gi;
    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
    p[i] = static_cast<T>(p[i] - step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + eps));
  }
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamMoments&, double, const AdamOptions&);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamMoments&, double, const AdamOptions&);

Adam::Adam(std::vector<Parameter<float>*> params, AdamOptions options)
    : params_(std::move(params)), moments_(params_.size()), options_(options) {}

void Adam::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter<float>& p = *params_[i];
    const Tensor<float>& g = p.var.grad();
    if (g.empty()) continue;
    adam_step<float>(p.value().values(), g.values(), moments_[i], lr, options_);
  }
}

PlateauTracker::PlateauTracker(int patience)
    : patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw ConfigError("patience must be at least 1");
}

bool PlateauTracker::update(double value) {
  if (value < best_) {
    best_ = value;
    wait_ = 0;
    return true;
  }
  ++wait_;
  return false;
}

std::pair<Tensor<float>, Tensor<float>> make_batch(const std::vector<CasePair>& cases,
                                                   std::span<const std::size_t> indices) {
  if (indices.empty()) throw InputError("empty batch");
  const int h = cases[indices[0]].image.height(), w = cases[indices[0]].image.width();
  const int b = static_cast<int>(indices.size());
  Tensor<float> x({b, h, w, 1}), y({b, h, w, 1});
  for (int n = 0; n < b; ++n) {
    const CasePair& c = cases[indices[n]];
    if (c.image.height() != h || c.image.width() != w) throw InputError("batch cases differ in size");
    std::copy_n(c.image.data(), c.image.size(), x.data() + x.offset(n, 0, 0, 0));
    if (!c.mask.empty()) {
      float* dst = y.data() + y.offset(n, 0, 0, 0);
      for (std::size_t k = 0; k < c.mask.size(); ++k) dst[k] = c.mask.data()[k];
    }
  }
  return {std::move(x), std::move(y)};
}

std::vector<FloatImage> predict_cases(SegmentationModel<float>& model, const std::vector<CasePair>& cases,
                                      int batch_size) {
  std::vector<FloatImage> out;
  out.reserve(cases.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < cases.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(cases.size(), start + batch_size); ++i) idx.push_back(i);
    const Tensor<float> probs = model.predict(make_batch(cases, idx).first);
    for (int n = 0; n < probs.batch(); ++n) out.push_back(slice(probs, n));
  }
  return out;
}

MetricReport evaluate(SegmentationModel<float>& model, const std::vector<CasePair>& cases, double threshold,
                      const std::vector<ThresholdRule>& rules, double hausdorff_scale) {
  if (cases.empty()) throw InputError("evaluate: no cases");
  for (const auto& c : cases) check_case(c, model.input_size(), "evaluation");
  const auto probs = predict_cases(model, cases);
  std::vector<CaseScore> scores;
  scores.reserve(cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    scores.push_back(score_case(cases[i].source_id, cases[i].mask, binarize(probs[i], threshold), hausdorff_scale));
  }
  return summarize(std::move(scores), rules);
}

TrainHistory train(SegmentationModel<float>& model, const std::vector<CasePair>& train_set,
                   const std::vector<CasePair>& val_set, const TrainConfig& cfg, const EpochCallback& on_epoch_end) {
  cfg.validate();
  if (train_set.empty()) throw InputError("training set is empty");
  if (model.input_size() != cfg.input_size) {
    throw ConfigError("model input size " + std::to_string(model.input_size()) + " differs from configured " +
                      std::to_string(cfg.input_size));
  }
  for (const auto& c : train_set) check_case(c, cfg.input_size, "training");
  for (const auto& c : val_set) check_case(c, cfg.input_size, "validation");

  TrainHistory history;
  history.monitor = val_set.empty() ? "train_loss" : "val_loss";
  Adam optimizer(model.trainable_parameters());
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  double lr = cfg.learning_rate;
  PlateauTracker stopper(cfg.early_stop_patience), plateau(cfg.lr_reduce_patience);
  std::vector<Tensor<float>> best_weights;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rng.shuffle(order);
    double loss_sum = 0.0, dice_sum = 0.0;
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      auto [x, y] = make_batch(train_set, idx);
      model.zero_grad();
      ag::Var<float> probs = model.forward(ag::Var<float>(std::move(x), false), Mode::kTrain);
      ag::Var<float> loss = ag::binary_cross_entropy(probs, y);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite loss " + fmt(value) + " at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index));
      }
      loss_sum += value * static_cast<double>(idx.size());
      for (std::size_t n = 0; n < idx.size(); ++n) {
        dice_sum += dice(train_set[idx[n]].mask, binarize(slice(probs.value(), static_cast<int>(n)), cfg.threshold));
      }
      loss.backward();
      optimizer.step(lr);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.train_dice = dice_sum / static_cast<double>(train_set.size());
    rec.learning_rate = lr;
    if (!val_set.empty()) {
      const auto probs = predict_cases(model, val_set, cfg.batch_size);
      double vl = 0.0, vd = 0.0;
      for (std::size_t i = 0; i < val_set.size(); ++i) {
        vl += bce_loss(probs[i], val_set[i].mask);
        vd += dice(val_set[i].mask, binarize(probs[i], cfg.threshold));
      }
      rec.val_loss = vl / static_cast<double>(val_set.size());
      rec.val_dice = vd / static_cast<double>(val_set.size());
      if (!std::isfinite(*rec.val_loss)) {
        throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
      }
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(rec);
    log::info("epoch " + std::to_string(epoch) + " loss " + fmt(rec.train_loss) + " dice " + fmt(rec.train_dice) +
              (rec.val_loss ? " val_loss " + fmt(*rec.val_loss) + " val_dice " + fmt(*rec.val_dice) : std::string()) +
              " lr " + fmt(lr) + " (" + fmt(rec.seconds) + " s)");

    const double monitored = rec.val_loss.value_or(rec.train_loss);
    if (stopper.update(monitored)) {
      history.best_epoch = epoch;
      best_weights = snapshot(model);
      if (cfg.checkpoint_path) {
        save_checkpoint(model, *cfg.checkpoint_path,
                        {{"epoch", epoch}, {"monitor", history.monitor}, {"value", monitored}, {"learning_rate", lr}});
      }
    }
    plateau.update(monitored);
    if (plateau.exhausted()) {
      const double reduced = std::max(lr * cfg.lr_reduce_factor, cfg.min_lr);
      if (reduced < lr) {
        log::info("reducing learning rate to " + fmt(reduced));
        lr = reduced;
      }
      plateau.reset_wait();
    }

    if (stopper.exhausted()) {
      log::info("early stopping at epoch " + std::to_string(epoch) + "; best epoch " + std::to_string(history.best_epoch));
      history.stopped_early = true;
      break;
    }
    if (on_epoch_end && on_epoch_end(rec, model)) {
      history.stopped_early = epoch + 1 < cfg.max_epochs;
      history.stopped_by_callback = true;
      best_weights.clear();
      if (cfg.checkpoint_path) {
        save_checkpoint(model, *cfg.checkpoint_path,
                        {{"epoch", epoch}, {"monitor", "callback"}, {"value", monitored}, {"learning_rate", lr}});
      }
      break;
    }
  }
  if (!best_weights.empty()) restore(model, best_weights);
  return history;
}

}  // namespace massseg
