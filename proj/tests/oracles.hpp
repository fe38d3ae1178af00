#pragma once

// Slow reference implementations used to cross-check the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <utility>
#include <vector>

#include "massseg/grid.hpp"
#include "massseg/random.hpp"

namespace oracle {

using massseg::BinaryMask;
using Point = std::pair<int, int>;

inline BinaryMask random_mask(massseg::Rng& rng, int h, int w, double density) {
  BinaryMask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m(y, x) = rng.uniform() < density ? 1 : 0;
  return m;
}

inline std::vector<Point> foreground_points(const BinaryMask& m) {
  std::vector<Point> pts;
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x)
      if (m(y, x)) pts.emplace_back(y, x);
  return pts;
}

struct Overlap {
  double dice, iou, accuracy;
};

// Set algebra over coordinate sets.
inline Overlap count_overlap(const BinaryMask& a, const BinaryMask& b) {
  const auto pa = foreground_points(a), pb = foreground_points(b);
  std::set<Point> sa(pa.begin(), pa.end()), sb(pb.begin(), pb.end());
  std::vector<Point> inter, uni;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
  const auto total = static_cast<std::int64_t>(a.height()) * a.width();
  const auto disagree = static_cast<std::int64_t>(uni.size() - inter.size());
  Overlap o{};
  o.dice = sa.empty() && sb.empty() ? 1.0 : 2.0 * double(inter.size()) / double(sa.size() + sb.size());
  o.iou = uni.empty() ? 1.0 : double(inter.size()) / double(uni.size());
  o.accuracy = total == 0 ? 1.0 : double(total - disagree) / double(total);
  return o;
}

inline double directed_pairwise(const std::vector<Point>& from, const std::vector<Point>& to) {
  double worst = 0.0;
  for (auto [y0, x0] : from) {
    double best = std::numeric_limits<double>::infinity();
    for (auto [y1, x1] : to) best = std::min(best, std::hypot(double(y0 - y1), double(x0 - x1)));
    worst = std::max(worst, best);
  }
  return worst;
}

inline double hausdorff_pairwise(const BinaryMask& a, const BinaryMask& b) {
  const auto pa = foreground_points(a), pb = foreground_points(b);
  if (pa.empty() && pb.empty()) return 0.0;
  if (pa.empty() || pb.empty()) return std::numeric_limits<double>::infinity();
  return std::max(directed_pairwise(pa, pb), directed_pairwise(pb, pa));
}

}  // namespace oracle

namespace oracle {

// 8-connected labeling by repeated min-label relaxation. Returns labels (0 = background).
inline massseg::Grid<int> label_components(const BinaryMask& m) {
  const int h = m.height(), w = m.width();
  massseg::Grid<int> lab(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) lab(y, x) = m(y, x) ? y * w + x + 1 : 0;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!lab(y, x)) continue;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || nx < 0 || ny >= h || nx >= w || !lab(ny, nx)) continue;
            if (lab(ny, nx) < lab(y, x)) {
              lab(y, x) = lab(ny, nx);
              changed = true;
            }
          }
        }
      }
    }
  }
  return lab;
}

// Global histogram equalization over [min, max]: fraction of pixels whose bin is <= the
// pixel's bin.
inline massseg::FloatImage equalize_global(const massseg::FloatImage& img, int bins) {
  const auto [lo, hi] = std::minmax_element(img.storage().begin(), img.storage().end());
  const double base = *lo, span = double(*hi) - *lo;
  auto bin_of = [&](float v) { return std::min(bins - 1, static_cast<int>((v - base) / span * bins)); };
  massseg::FloatImage out(img.height(), img.width());
  const double n = static_cast<double>(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const int b = bin_of(img.data()[i]);
    std::int64_t rank = 0;
    for (std::size_t j = 0; j < img.size(); ++j) rank += bin_of(img.data()[j]) <= b;
    out.data()[i] = static_cast<float>(rank / n);
  }
  return out;
}

}  // namespace oracle
