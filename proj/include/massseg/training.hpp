#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "massseg/metrics.hpp"
#include "massseg/models.hpp"
#include "massseg/preprocessing.hpp"

namespace massseg {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 16;
  int max_epochs = 300;
  double val_fraction = 0.15;
  int early_stop_patience = 30;
  int lr_reduce_patience = 10;
  double lr_reduce_factor = 0.5;
  double min_lr = 1e-6;
  std::uint64_t seed = 42;
  int input_size = 224;
  double threshold = 0.5;  // binarization for the Dice columns
  std::optional<std::filesystem::path> checkpoint_path;

  /// Throws ConfigError on out-of-range values.
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EpochRecord {
  int epoch = 0;  // zero-based
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double train_dice = 0.0;  // from the training-mode outputs of the epoch
  std::optional<double> val_dice;
  double learning_rate = 0.0;  // rate used during the epoch
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  bool stopped_early = false;
  bool stopped_by_callback = false;  // the final epoch's weights were kept
  std::string monitor;  // "val_loss" or "train_loss"

  void write_csv(const std::filesystem::path& path) const;
};

nlohmann::json to_json(const TrainHistory& history);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Deterministic shuffle of 0..n-1; the first round(val_fraction * n) indices go to validation.
/// Both parts are returned in ascending order. Throws InputError for n < 2 and ConfigError for a
/// fraction outside (0, 1) or one that empties either side.
SplitIndices split_indices(std::size_t n, double val_fraction, std::uint64_t seed);

struct DatasetSplit {
  std::vector<CasePair> train;
  std::vector<CasePair> val;
};

DatasetSplit split_dataset(const std::vector<CasePair>& cases, double val_fraction, std::uint64_t seed);

/// Mean clamped binary cross-entropy (eps 1e-7), accumulated in double.
double bce_loss(const FloatImage& pred, const BinaryMask& target);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update in place. Moments are sized on first use.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamMoments& state, double lr,
               const AdamOptions& options = {});

/// Adam over a fixed parameter list with one moment set per parameter.
class Adam {
 public:
  explicit Adam(std::vector<Parameter<float>*> params, AdamOptions options = {});
  /// Applies one update from the parameters' current gradients.
  void step(double lr);

 private:
  std::vector<Parameter<float>*> params_;
  std::vector<AdamMoments> moments_;
  AdamOptions options_;
};

/// Best value of a minimized quantity and the number of updates since it last improved.
class PlateauTracker {
 public:
  explicit PlateauTracker(int patience);
  /// Returns true when `value` is a strict improvement.
  bool update(double value);
  bool exhausted() const { return wait_ >= patience_; }
  void reset_wait() { wait_ = 0; }
  int wait() const { return wait_; }
  double best() const { return best_; }

 private:
  int patience_;
  int wait_ = 0;
  double best_;
};

/// Packs cases[indices] into (B, H, W, 1) image and target tensors.
std::pair<Tensor<float>, Tensor<float>> make_batch(const std::vector<CasePair>& cases,
                                                   std::span<const std::size_t> indices);

/// Called after every epoch; returning true stops training.
using EpochCallback = std::function<bool(const EpochRecord&, SegmentationModel<float>&)>;

/// Adam on mean BCE with plateau LR reduction and early stopping on the validation loss (the
/// training loss when `val_set` is empty). The best-monitored parameters, BN statistics
/// included, are restored before returning and written to cfg.checkpoint_path on each
/// improvement. When `on_epoch_end` stops training, that epoch's weights are kept and
/// checkpointed instead. Throws TrainingError naming the epoch and batch on a non-finite loss.
TrainHistory train(SegmentationModel<float>& model, const std::vector<CasePair>& train_set,
                   const std::vector<CasePair>& val_set, const TrainConfig& cfg, const EpochCallback& on_epoch_end = {});

/// Inference-mode probability maps, one per case.
std::vector<FloatImage> predict_cases(SegmentationModel<float>& model, const std::vector<CasePair>& cases,
                                      int batch_size = 8);

/// Scores each case's binarized prediction against its mask and summarizes with `rules`.
MetricReport evaluate(SegmentationModel<float>& model, const std::vector<CasePair>& cases, double threshold = 0.5,
                      const std::vector<ThresholdRule>& rules = default_threshold_rules(), double hausdorff_scale = 1.0);

}  // namespace massseg
