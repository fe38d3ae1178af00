#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "massseg/grid.hpp"

namespace massseg {

/// Pixels with value >= threshold become 1.
BinaryMask binarize(const FloatImage& prob, double threshold = 0.5);

std::int64_t foreground_count(const BinaryMask& mask);

/// Overlap scores. Two empty masks score 1.0; throws InputError on a dims mismatch.
double dice(const BinaryMask& a, const BinaryMask& b);
double iou(const BinaryMask& a, const BinaryMask& b);
double pixel_accuracy(const BinaryMask& a, const BinaryMask& b);

/// Symmetric Hausdorff distance in pixels between the foreground pixel sets. Both empty gives
/// 0, exactly one empty gives +infinity.
double hausdorff(const BinaryMask& gt, const BinaryMask& pred);

/// Squared Euclidean distance from every pixel to the nearest foreground pixel of `mask`
/// (exact, separable lower-envelope transform). Returns -1 everywhere when `mask` is empty.
Grid<std::int64_t> squared_distance_transform(const BinaryMask& mask);

struct CaseScore {
  std::string source_id;
  double dice = 0.0;
  double iou = 0.0;
  double accuracy = 0.0;
  double hausdorff = 0.0;

  friend bool operator==(const CaseScore&, const CaseScore&) = default;
};

/// Scores one case. `hausdorff_scale` divides the raw pixel distance.
CaseScore score_case(std::string source_id, const BinaryMask& gt, const BinaryMask& pred,
                     double hausdorff_scale = 1.0);

enum class Metric { kDice, kIou, kAccuracy, kHausdorff };
enum class Comparator { kGreaterEqual, kLessEqual };

std::string_view to_string(Metric metric);
/// Accepts `dice`/`ds`, `iou`/`ji`/`jaccard`, `accuracy`/`acc`, `hausdorff`/`hd`.
Metric parse_metric(std::string_view name);
double metric_value(const CaseScore& score, Metric metric);

struct ThresholdRule {
  Metric metric = Metric::kDice;
  Comparator comparator = Comparator::kGreaterEqual;
  double threshold = 0.0;

  bool accepts(double value) const;
  std::string label() const;

  friend bool operator==(const ThresholdRule&, const ThresholdRule&) = default;
};

/// DS>=0.45, DS>=0.65, JI>=0.35, JI>=0.55, HD<=2.75.
std::vector<ThresholdRule> default_threshold_rules();
/// Parses comma-separated rules such as `dice>=0.45,hd<=2.75`.
std::vector<ThresholdRule> parse_threshold_rules(std::string_view text);
std::string format_threshold_rules(const std::vector<ThresholdRule>& rules);

struct ThresholdRow {
  ThresholdRule rule;
  std::int64_t count = 0;
  std::optional<double> average;  // empty when no case qualifies
};

struct ThresholdReport {
  std::int64_t total_cases = 0;
  std::vector<ThresholdRow> rows;
};

/// Counts qualifying cases per rule and averages the rule's metric over them.
/// Throws InputError when `scores` is empty.
ThresholdReport threshold_report(const std::vector<CaseScore>& scores, const std::vector<ThresholdRule>& rules);

struct MetricReport {
  std::vector<CaseScore> cases;
  double mean_dice = 0.0;
  double mean_iou = 0.0;
  double mean_accuracy = 0.0;
  /// Mean over cases with a finite distance; `infinite_hausdorff_cases` counts the rest.
  std::optional<double> mean_hausdorff;
  std::int64_t infinite_hausdorff_cases = 0;
  ThresholdReport thresholds;
};

MetricReport summarize(std::vector<CaseScore> scores, const std::vector<ThresholdRule>& rules);

nlohmann::json to_json(const ThresholdReport& report);
/// Means and threshold report; per-case rows are left to the CSV.
nlohmann::json to_json(const MetricReport& report);

/// One row per case: source_id,dice,iou,accuracy,hausdorff. Infinite distances print as `inf`.
void write_scores_csv(const std::filesystem::path& path, const std::vector<CaseScore>& scores);

}  // namespace massseg
