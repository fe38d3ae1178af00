#include "massseg/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>

namespace massseg {

namespace {

struct Counts {
  std::int64_t a = 0, b = 0, both = 0, agree = 0, total = 0;
};

Counts count_pixels(const BinaryMask& a, const BinaryMask& b, const char* op) {
  if (!a.same_dims(b)) {
    throw InputError(std::string(op) + ": mask dims differ (" + dims_string(a.height(), a.width()) + " vs " +
                     dims_string(b.height(), b.width()) + ")");
  }
  Counts c;
  c.total = static_cast<std::int64_t>(a.size());
  const auto* pa = a.data();
  const auto* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool fa = pa[i] != 0, fb = pb[i] != 0;
    c.a += fa;
    c.b += fb;
    c.both += fa && fb;
    c.agree += fa == fb;
  }
  return c;
}

constexpr std::int64_t kUnreached = std::numeric_limits<std::int64_t>::max();

// Lower envelope of parabolas rooted at the finite entries of f (Felzenszwalb & Huttenlocher).
void distance_1d(const std::vector<std::int64_t>& f, std::vector<std::int64_t>& out, std::vector<int>& sites,
                 std::vector<double>& bounds) {
  const int n = static_cast<int>(f.size());
  sites.clear();
  bounds.clear();
  auto key = [&](int q) { return static_cast<double>(f[q]) + static_cast<double>(q) * q; };
  for (int q = 0; q < n; ++q) {
    if (f[q] == kUnreached) continue;
    while (!sites.empty()) {
      const int v = sites.back();
      const double s = (key(q) - key(v)) / (2.0 * (q - v));
      if (s <= bounds.back()) {
        sites.pop_back();
        bounds.pop_back();
      } else {
        break;
      }
    }
    if (sites.empty()) {
      sites.push_back(q);
      bounds.push_back(-std::numeric_limits<double>::infinity());
    } else {
      const int v = sites.back();
      sites.push_back(q);
      bounds.push_back((key(q) - key(v)) / (2.0 * (q - v)));
    }
  }
  if (sites.empty()) {
    std::fill(out.begin(), out.end(), kUnreached);
    return;
  }
  std::size_t k = 0;
  for (int q = 0; q < n; ++q) {
    while (k + 1 < sites.size() && bounds[k + 1] < q) ++k;
    const std::int64_t d = q - sites[k];
    out[q] = d * d + f[sites[k]];
  }
}

// max over foreground pixels of `from` of the squared distance to `to`'s foreground.
std::int64_t directed_squared(const BinaryMask& from, const Grid<std::int64_t>& to_distance) {
  std::int64_t worst = 0;
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from.data()[i]) worst = std::max(worst, to_distance.data()[i]);
  }
  return worst;
}

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

BinaryMask binarize(const FloatImage& prob, double threshold) {
  BinaryMask out(prob.height(), prob.width());
  for (std::size_t i = 0; i < prob.size(); ++i) out.data()[i] = prob.data()[i] >= threshold ? 1 : 0;
  return out;
}

std::int64_t foreground_count(const BinaryMask& mask) {
  return std::count_if(mask.storage().begin(), mask.storage().end(), [](std::uint8_t v) { return v != 0; });
}

double dice(const BinaryMask& a, const BinaryMask& b) {
  const Counts c = count_pixels(a, b, "dice");
  if (c.a + c.b == 0) return 1.0;
  return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.a + c.b);
}

double iou(const BinaryMask& a, const BinaryMask& b) {
  const Counts c = count_pixels(a, b, "iou");
  const std::int64_t uni = c.a + c.b - c.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.both) / static_cast<double>(uni);
}

double pixel_accuracy(const BinaryMask& a, const BinaryMask& b) {
  const Counts c = count_pixels(a, b, "pixel_accuracy");
  if (c.total == 0) return 1.0;
  return static_cast<double>(c.agree) / static_cast<double>(c.total);
}

Grid<std::int64_t> squared_distance_transform(const BinaryMask& mask) {
  const int h = mask.height(), w = mask.width();
  Grid<std::int64_t> dist(h, w, kUnreached);
  std::vector<int> sites;
  std::vector<double> bounds;
  std::vector<std::int64_t> f(h), out(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = mask(y, x) ? 0 : kUnreached;
    distance_1d(f, out, sites, bounds);
    for (int y = 0; y < h; ++y) dist(y, x) = out[y];
  }
  f.resize(w);
  out.resize(w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) f[x] = dist(y, x);
    distance_1d(f, out, sites, bounds);
    for (int x = 0; x < w; ++x) dist(y, x) = out[x] == kUnreached ? -1 : out[x];
  }
  return dist;
}

double hausdorff(const BinaryMask& gt, const BinaryMask& pred) {
  const Counts c = count_pixels(gt, pred, "hausdorff");
  if (c.a == 0 && c.b == 0) return 0.0;
  if (c.a == 0 || c.b == 0) return std::numeric_limits<double>::infinity();
  const std::int64_t forward = directed_squared(gt, squared_distance_transform(pred));
  const std::int64_t backward = directed_squared(pred, squared_distance_transform(gt));
  return std::sqrt(static_cast<double>(std::max(forward, backward)));
}

CaseScore score_case(std::string source_id, const BinaryMask& gt, const BinaryMask& pred, double hausdorff_scale) {
  if (!(hausdorff_scale > 0.0) || !std::isfinite(hausdorff_scale)) {
    throw ConfigError("hausdorff scale must be a positive finite number");
  }
  CaseScore s;
  s.source_id = std::move(source_id);
  s.dice = dice(gt, pred);
  s.iou = iou(gt, pred);
  s.accuracy = pixel_accuracy(gt, pred);
  s.hausdorff = hausdorff(gt, pred) / hausdorff_scale;
  return s;
}

std::string_view to_string(Metric metric) {
  switch (metric) {
    case Metric::kDice:
      return "dice";
    case Metric::kIou:
      return "iou";
    case Metric::kAccuracy:
      return "accuracy";
    case Metric::kHausdorff:
      return "hausdorff";
  }
  return "?";
}

Metric parse_metric(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (lower == "dice" || lower == "ds") return Metric::kDice;
  if (lower == "iou" || lower == "ji" || lower == "jaccard") return Metric::kIou;
  if (lower == "accuracy" || lower == "acc") return Metric::kAccuracy;
  if (lower == "hausdorff" || lower == "hd") return Metric::kHausdorff;
  throw ConfigError("unknown metric '" + std::string(name) + "' (expected dice, iou, accuracy or hausdorff)");
}

double metric_value(const CaseScore& score, Metric metric) {
  switch (metric) {
    case Metric::kDice:
      return score.dice;
    case Metric::kIou:
      return score.iou;
    case Metric::kAccuracy:
      return score.accuracy;
    case Metric::kHausdorff:
      return score.hausdorff;
  }
  return 0.0;
}

bool ThresholdRule::accepts(double value) const {
  return comparator == Comparator::kGreaterEqual ? value >= threshold : value <= threshold;
}

std::string ThresholdRule::label() const {
  return std::string(to_string(metric)) + (comparator == Comparator::kGreaterEqual ? ">=" : "<=") +
         format_double(threshold);
}

std::vector<ThresholdRule> default_threshold_rules() {
  using enum Comparator;
  return {
      {Metric::kDice, kGreaterEqual, 0.45}, {Metric::kDice, kGreaterEqual, 0.65},
      {Metric::kIou, kGreaterEqual, 0.35},  {Metric::kIou, kGreaterEqual, 0.55},
      {Metric::kHausdorff, kLessEqual, 2.75},
  };
}

std::vector<ThresholdRule> parse_threshold_rules(std::string_view text) {
  std::vector<ThresholdRule> rules;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string item = trim(text.substr(start, comma == std::string_view::npos ? text.npos : comma - start));
    start = comma == std::string_view::npos ? text.size() + 1 : comma + 1;
    if (item.empty()) continue;
    ThresholdRule rule;
    std::size_t op = item.find(">=");
    if (op != std::string::npos) {
      rule.comparator = Comparator::kGreaterEqual;
    } else if ((op = item.find("<=")) != std::string::npos) {
      rule.comparator = Comparator::kLessEqual;
    } else {
      throw ConfigError("threshold rule '" + item + "' needs >= or <=");
    }
    rule.metric = parse_metric(trim(item.substr(0, op)));
    const std::string number = trim(item.substr(op + 2));
    const char* first = number.data();
    const char* last = first + number.size();
    auto res = std::from_chars(first, last, rule.threshold);
    if (res.ec != std::errc() || res.ptr != last) throw ConfigError("threshold rule '" + item + "' has a bad number");
    rules.push_back(rule);
  }
  if (rules.empty()) throw ConfigError("no threshold rules given");
  return rules;
}

std::string format_threshold_rules(const std::vector<ThresholdRule>& rules) {
  std::string out;
  for (const auto& r : rules) {
    if (!out.empty()) out += ',';
    out += r.label();
  }
  return out;
}

ThresholdReport threshold_report(const std::vector<CaseScore>& scores, const std::vector<ThresholdRule>& rules) {
  if (scores.empty()) throw InputError("threshold_report: no scores");
  ThresholdReport report;
  report.total_cases = static_cast<std::int64_t>(scores.size());
  for (const auto& rule : rules) {
    ThresholdRow row{rule, 0, std::nullopt};
    double sum = 0.0;
    for (const auto& s : scores) {
      const double v = metric_value(s, rule.metric);
      if (rule.accepts(v)) {
        ++row.count;
        sum += v;
      }
    }
    if (row.count > 0) row.average = sum / static_cast<double>(row.count);
    report.rows.push_back(row);
  }
  return report;
}

MetricReport summarize(std::vector<CaseScore> scores, const std::vector<ThresholdRule>& rules) {
  if (scores.empty()) throw InputError("summarize: no scores");
  MetricReport r;
  double hd_sum = 0.0;
  std::int64_t hd_count = 0;
  for (const auto& s : scores) {
    r.mean_dice += s.dice;
    r.mean_iou += s.iou;
    r.mean_accuracy += s.accuracy;
    if (std::isfinite(s.hausdorff)) {
      hd_sum += s.hausdorff;
      ++hd_count;
    } else {
      ++r.infinite_hausdorff_cases;
    }
  }
  const double n = static_cast<double>(scores.size());
  r.mean_dice /= n;
  r.mean_iou /= n;
  r.mean_accuracy /= n;
  if (hd_count > 0) r.mean_hausdorff = hd_sum / static_cast<double>(hd_count);
  r.thresholds = threshold_report(scores, rules);
  r.cases = std::move(scores);
  return r;
}

nlohmann::json to_json(const ThresholdReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : report.rows) {
    rows.push_back({{"rule", row.rule.label()},
                    {"metric", to_string(row.rule.metric)},
                    {"comparator", row.rule.comparator == Comparator::kGreaterEqual ? ">=" : "<="},
                    {"threshold", row.rule.threshold},
                    {"count", row.count},
                    {"average", row.average ? nlohmann::json(*row.average) : nlohmann::json(nullptr)}});
  }
  return {{"total_cases", report.total_cases}, {"rows", rows}};
}

nlohmann::json to_json(const MetricReport& report) {
  return {{"cases", report.cases.size()},
          {"mean_dice", report.mean_dice},
          {"mean_iou", report.mean_iou},
          {"mean_accuracy", report.mean_accuracy},
          {"mean_hausdorff", report.mean_hausdorff ? nlohmann::json(*report.mean_hausdorff) : nlohmann::json(nullptr)},
          {"infinite_hausdorff_cases", report.infinite_hausdorff_cases},
          {"thresholds", to_json(report.thresholds)}};
}

void write_scores_csv(const std::filesystem::path& path, const std::vector<CaseScore>& scores) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "source_id,dice,iou,accuracy,hausdorff\n";
  for (const auto& s : scores) {
    out << csv_field(s.source_id) << ',' << format_double(s.dice) << ',' << format_double(s.iou) << ','
        << format_double(s.accuracy) << ',' << format_double(s.hausdorff) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace massseg
