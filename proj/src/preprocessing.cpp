#include "massseg/preprocessing.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <opencv2/imgproc.hpp>

namespace massseg {

namespace {

template <typename T>
Grid<T> crop(const Grid<T>& src, int top, int left, int height, int width) {
  Grid<T> out(height, width);
  for (int y = 0; y < height; ++y) {
    std::copy_n(src.data() + static_cast<std::size_t>(y + top) * src.width() + left, width,
                out.data() + static_cast<std::size_t>(y) * width);
  }
  return out;
}

template <typename T>
Grid<T> pad(const Grid<T>& src, int top, int left, int side) {
  Grid<T> out(side, side);
  for (int y = 0; y < src.height(); ++y) {
    std::copy_n(src.data() + static_cast<std::size_t>(y) * src.width(), src.width(),
                out.data() + static_cast<std::size_t>(y + top) * side + left);
  }
  return out;
}

cv::Mat as_mat(FloatImage& img) { return cv::Mat(img.height(), img.width(), CV_32F, img.data()); }
cv::Mat as_mat(const FloatImage& img) {
  return cv::Mat(img.height(), img.width(), CV_32F, const_cast<float*>(img.data()));
}
cv::Mat as_mat(BinaryMask& m) { return cv::Mat(m.height(), m.width(), CV_8U, m.data()); }
cv::Mat as_mat(const BinaryMask& m) {
  return cv::Mat(m.height(), m.width(), CV_8U, const_cast<std::uint8_t*>(m.data()));
}

// Label of the largest component (ties go to the lower label). Returns 0 when there is none.
int largest_component(const cv::Mat& stats, int count) {
  int best = 0, best_area = 0;
  for (int label = 1; label < count; ++label) {
    const int area = stats.at<int>(label, cv::CC_STAT_AREA);
    if (area > best_area) {
      best = label;
      best_area = area;
    }
  }
  return best;
}

// Sets every background pixel that cannot reach the image border (4-connected) to 1.
void fill_holes(BinaryMask& region) {
  BinaryMask outside(region.height(), region.width());
  for (std::size_t i = 0; i < region.size(); ++i) outside.data()[i] = region.data()[i] ? 0 : 1;
  cv::Mat labels;
  const int count = cv::connectedComponents(as_mat(outside), labels, 4, CV_32S);
  std::vector<char> touches(static_cast<std::size_t>(count), 0);
  const int h = region.height(), w = region.width();
  for (int y = 0; y < h; ++y) {
    touches[labels.at<int>(y, 0)] = 1;
    touches[labels.at<int>(y, w - 1)] = 1;
  }
  for (int x = 0; x < w; ++x) {
    touches[labels.at<int>(0, x)] = 1;
    touches[labels.at<int>(h - 1, x)] = 1;
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!region(y, x) && !touches[labels.at<int>(y, x)]) region(y, x) = 1;
    }
  }
}

void check_masks(const RawImage& img, const std::vector<BinaryMask>& masks) {
  for (const auto& m : masks) {
    if (m.height() != img.height() || m.width() != img.width()) {
      throw InputError(img.source_id + ": mask dims " + dims_string(m.height(), m.width()) +
                       " differ from image dims " + dims_string(img.height(), img.width()));
    }
  }
}

CasePair run_pipeline(const RawImage& input, const std::vector<BinaryMask>* masks, const PreprocessOptions& options) {
  input.check();
  if (options.target_size < 1) throw ConfigError("target size must be positive");
  if (masks) check_masks(input, *masks);

  CasePair out;
  out.source_id = input.source_id;
  out.geometry.original_height = input.height();
  out.geometry.original_width = input.width();
  out.geometry.target_size = options.target_size;

  RawImage img = input;
  std::vector<BinaryMask> cropped_masks;
  const std::vector<BinaryMask>* gt = masks;

  if (options.profile == Profile::kCbisDdsm) {
    const CropMargins m = crop_margins(img.height(), img.width(), options.crop_fraction);
    img = crop_borders(img, options.crop_fraction);
    if (masks) {
      for (const auto& mask : *masks) cropped_masks.push_back(crop_borders(mask, options.crop_fraction));
      gt = &cropped_masks;
    }
    out.geometry.crop_top = m.top;
    out.geometry.crop_left = m.left;
    out.applied_steps.push_back({"crop_borders", {{"fraction", options.crop_fraction}, {"top", m.top}, {"left", m.left}}});
    img = remove_artifacts(img);
    out.applied_steps.push_back({"remove_artifacts", {{"method", "otsu_largest_component"}}});
  }

  FloatImage image = normalize(img);
  out.applied_steps.push_back({"normalize", {{"divisor", img.max_value()}}});

  if (options.profile != Profile::kNone) {
    image = apply_clahe(image, options.clahe);
    out.applied_steps.push_back({"apply_clahe",
                                 {{"clip_limit", options.clahe.clip_limit},
                                  {"tiles", {options.clahe.tiles_y, options.clahe.tiles_x}},
                                  {"bins", options.clahe.bins}}});
  }

  BinaryMask mask;
  if (gt) {
    mask = fuse_masks(*gt);
    out.applied_steps.push_back({"fuse_masks", {{"count", gt->size()}}});
  }

  SquarePair sq = pad_to_square(image, mask);
  out.geometry.pad_top = sq.pad_top;
  out.geometry.pad_left = sq.pad_left;
  out.geometry.square_side = sq.image.height();
  out.applied_steps.push_back(
      {"pad_to_square", {{"side", sq.image.height()}, {"top", sq.pad_top}, {"left", sq.pad_left}}});

  out.image = resize_bilinear(sq.image, options.target_size, options.target_size);
  if (gt) out.mask = resize_nearest(sq.mask, options.target_size, options.target_size);
  out.applied_steps.push_back(
      {"resize", {{"size", options.target_size}, {"image", "bilinear"}, {"mask", "nearest"}}});
  return out;
}

}  // namespace

void RawImage::check() const {
  if (bit_depth != 8 && bit_depth != 16) {
    throw InputError(source_id + ": unsupported bit depth " + std::to_string(bit_depth));
  }
  if (height() < kMinRawSide || width() < kMinRawSide) {
    throw InputError(source_id + ": image is " + dims_string(height(), width()) + ", minimum side is " +
                     std::to_string(kMinRawSide));
  }
  if (bit_depth == 8) {
    for (auto v : pixels.storage()) {
      if (v > 255) throw InputError(source_id + ": 8-bit image holds a value above 255");
    }
  }
}

CropMargins crop_margins(int height, int width, double fraction) {
  if (!(fraction >= 0.0 && fraction < 0.25)) {
    throw InputError("crop fraction must be in [0, 0.25), got " + std::to_string(fraction));
  }
  CropMargins m{static_cast<int>(std::floor(fraction * height)), static_cast<int>(std::floor(fraction * width))};
  const int h = height - 2 * m.top, w = width - 2 * m.left;
  if (h < kMinRawSide || w < kMinRawSide) {
    throw InputError("cropping " + dims_string(height, width) + " leaves " + dims_string(h, w) + ", below " +
                     std::to_string(kMinRawSide) + " pixels");
  }
  return m;
}

RawImage crop_borders(const RawImage& img, double fraction) {
  const CropMargins m = crop_margins(img.height(), img.width(), fraction);
  RawImage out = img;
  out.pixels = crop(img.pixels, m.top, m.left, img.height() - 2 * m.top, img.width() - 2 * m.left);
  return out;
}

BinaryMask crop_borders(const BinaryMask& mask, double fraction) {
  const CropMargins m = crop_margins(mask.height(), mask.width(), fraction);
  return crop(mask, m.top, m.left, mask.height() - 2 * m.top, mask.width() - 2 * m.left);
}

std::uint16_t otsu_threshold(const Grid<std::uint16_t>& pixels) {
  if (pixels.empty()) throw InputError("otsu_threshold: empty image");
  const auto [lo_it, hi_it] = std::minmax_element(pixels.storage().begin(), pixels.storage().end());
  const std::int64_t lo = *lo_it, span = *hi_it - *lo_it;
  if (span == 0) return *lo_it;
  auto bin_of = [&](std::int64_t v) { return static_cast<int>((v - lo) * 255 / span); };

  std::array<double, 256> hist{};
  for (auto v : pixels.storage()) hist[bin_of(v)] += 1.0;
  const double total = static_cast<double>(pixels.size());
  double sum_all = 0.0;
  for (int b = 0; b < 256; ++b) sum_all += b * hist[b];

  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_bin = 0;
  for (int t = 0; t < 255; ++t) {
    w0 += hist[t];
    sum0 += t * hist[t];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double diff = sum0 / w0 - (sum_all - sum0) / w1;
    const double between = w0 * w1 * diff * diff;
    if (between > best) {
      best = between;
      best_bin = t;
    }
  }
  // Largest v with bin_of(v) <= best_bin.
  const std::int64_t offset = ((best_bin + 1) * span + 254) / 255 - 1;
  return static_cast<std::uint16_t>(lo + offset);
}

RawImage remove_artifacts(const RawImage& img) {
  const int h = img.height(), w = img.width();
  const auto [lo_it, hi_it] = std::minmax_element(img.pixels.storage().begin(), img.pixels.storage().end());
  BinaryMask fg(h, w);
  if (*lo_it == *hi_it) {
    for (std::size_t i = 0; i < fg.size(); ++i) fg.data()[i] = img.pixels.data()[i] > 0;
  } else {
    const std::uint16_t t = otsu_threshold(img.pixels);
    for (std::size_t i = 0; i < fg.size(); ++i) fg.data()[i] = img.pixels.data()[i] > t;
  }
  cv::Mat labels, stats, centroids;
  const int count = cv::connectedComponentsWithStats(as_mat(fg), labels, stats, centroids, 8, CV_32S);
  const int keep = largest_component(stats, count);
  if (keep == 0) throw InputError(img.source_id + ": no foreground found for artifact removal");

  BinaryMask region(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) region(y, x) = labels.at<int>(y, x) == keep;
  }
  fill_holes(region);

  RawImage out = img;
  for (std::size_t i = 0; i < region.size(); ++i) {
    if (!region.data()[i]) out.pixels.data()[i] = 0;
  }
  return out;
}

FloatImage normalize(const RawImage& img) {
  const float scale = 1.0f / static_cast<float>(img.max_value());
  FloatImage out(img.height(), img.width());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = std::min(1.0f, img.pixels.data()[i] * scale);
  return out;
}

FloatImage apply_clahe(const FloatImage& img, const ClaheOptions& options) {
  if (options.tiles_y < 1 || options.tiles_x < 1) throw ConfigError("CLAHE tile grid must be at least 1x1");
  if (options.bins < 2) throw ConfigError("CLAHE needs at least 2 histogram bins");
  if (!(options.clip_limit > 0.0)) throw ConfigError("CLAHE clip limit must be positive");
  const int h = img.height(), w = img.width();
  if (options.tiles_y > h || options.tiles_x > w) {
    throw InputError("CLAHE tile grid " + dims_string(options.tiles_y, options.tiles_x) + " exceeds image " +
                     dims_string(h, w));
  }
  for (float v : img.storage()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw InputError("CLAHE input must lie in [0, 1]");
  }
  if (std::adjacent_find(img.storage().begin(), img.storage().end(), std::not_equal_to<>()) == img.storage().end()) {
    return img;
  }

  const int ty = options.tiles_y, tx = options.tiles_x, bins = options.bins;
  // Bins span the image's own intensity range.
  const auto [lo_it, hi_it] = std::minmax_element(img.storage().begin(), img.storage().end());
  const double lo = *lo_it, span = static_cast<double>(*hi_it) - lo;
  auto bin_of = [bins, lo, span](float v) { return std::min(bins - 1, static_cast<int>((v - lo) / span * bins)); };
  std::vector<int> y_edges(ty + 1), x_edges(tx + 1);
  for (int i = 0; i <= ty; ++i) y_edges[i] = static_cast<int>(static_cast<std::int64_t>(i) * h / ty);
  for (int j = 0; j <= tx; ++j) x_edges[j] = static_cast<int>(static_cast<std::int64_t>(j) * w / tx);

  // mapping[(i * tx + j) * bins + b] is tile (i, j)'s equalized value for bin b.
  std::vector<double> mapping(static_cast<std::size_t>(ty) * tx * bins);
  std::vector<double> hist(bins);
  for (int i = 0; i < ty; ++i) {
    for (int j = 0; j < tx; ++j) {
      std::fill(hist.begin(), hist.end(), 0.0);
      for (int y = y_edges[i]; y < y_edges[i + 1]; ++y) {
        for (int x = x_edges[j]; x < x_edges[j + 1]; ++x) hist[bin_of(img(y, x))] += 1.0;
      }
      const double n = static_cast<double>(y_edges[i + 1] - y_edges[i]) * (x_edges[j + 1] - x_edges[j]);
      const double clip = std::max(1.0, options.clip_limit * n);
      double excess = 0.0;
      for (double& c : hist) {
        if (c > clip) {
          excess += c - clip;
          c = clip;
        }
      }
      const double share = excess / bins;
      double cdf = 0.0;
      double* map = mapping.data() + (static_cast<std::size_t>(i) * tx + j) * bins;
      for (int b = 0; b < bins; ++b) {
        cdf += hist[b] + share;
        map[b] = std::min(1.0, cdf / n);
      }
    }
  }

  auto centers = [](const std::vector<int>& edges) {
    std::vector<double> c(edges.size() - 1);
    for (std::size_t i = 0; i + 1 < edges.size(); ++i) c[i] = (edges[i] + edges[i + 1] - 1) / 2.0;
    return c;
  };
  const auto cy = centers(y_edges), cx = centers(x_edges);
  struct Blend {
    int lo, hi;
    double t;
  };
  auto blend = [](const std::vector<double>& c, int p) {
    const int last = static_cast<int>(c.size()) - 1;
    if (p <= c.front()) return Blend{0, 0, 0.0};
    if (p >= c.back()) return Blend{last, last, 0.0};
    int k = static_cast<int>(std::upper_bound(c.begin(), c.end(), static_cast<double>(p)) - c.begin()) - 1;
    return Blend{k, k + 1, (p - c[k]) / (c[k + 1] - c[k])};
  };
  auto map_at = [&](int i, int j, int b) { return mapping[(static_cast<std::size_t>(i) * tx + j) * bins + b]; };

  FloatImage out(h, w);
  std::vector<Blend> xb(w);
  for (int x = 0; x < w; ++x) xb[x] = blend(cx, x);
  for (int y = 0; y < h; ++y) {
    const Blend by = blend(cy, y);
    for (int x = 0; x < w; ++x) {
      const Blend bx = xb[x];
      const int b = bin_of(img(y, x));
      const double top = (1.0 - bx.t) * map_at(by.lo, bx.lo, b) + bx.t * map_at(by.lo, bx.hi, b);
      const double bottom = (1.0 - bx.t) * map_at(by.hi, bx.lo, b) + bx.t * map_at(by.hi, bx.hi, b);
      out(y, x) = static_cast<float>(std::clamp((1.0 - by.t) * top + by.t * bottom, 0.0, 1.0));
    }
  }
  return out;
}

BinaryMask fuse_masks(const std::vector<BinaryMask>& masks) {
  if (masks.empty()) throw InputError("fuse_masks: no masks given");
  BinaryMask out(masks.front().height(), masks.front().width());
  for (const auto& m : masks) {
    if (!m.same_dims(out)) {
      throw InputError("fuse_masks: mask dims " + dims_string(m.height(), m.width()) + " differ from " +
                       dims_string(out.height(), out.width()));
    }
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] |= m.data()[i] ? 1 : 0;
  }
  return out;
}

SquarePair pad_to_square(const FloatImage& img, const BinaryMask& mask) {
  if (!mask.empty() && !mask.same_dims(img)) {
    throw InputError("pad_to_square: mask dims " + dims_string(mask.height(), mask.width()) + " differ from image " +
                     dims_string(img.height(), img.width()));
  }
  const int side = std::max(img.height(), img.width());
  SquarePair out;
  out.pad_top = (side - img.height()) / 2;
  out.pad_left = (side - img.width()) / 2;
  out.image = pad(img, out.pad_top, out.pad_left, side);
  if (!mask.empty()) out.mask = pad(mask, out.pad_top, out.pad_left, side);
  return out;
}

FloatImage resize_bilinear(const FloatImage& img, int height, int width) {
  if (img.height() == height && img.width() == width) return img;
  FloatImage out(height, width);
  cv::Mat dst = as_mat(out);
  cv::resize(as_mat(img), dst, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  for (float& v : out.storage()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

BinaryMask resize_nearest(const BinaryMask& mask, int height, int width) {
  BinaryMask out(height, width);
  if (mask.height() == height && mask.width() == width) {
    out = mask;
  } else {
    cv::Mat dst = as_mat(out);
    cv::resize(as_mat(mask), dst, cv::Size(width, height), 0, 0, cv::INTER_NEAREST_EXACT);
  }
  for (auto& v : out.storage()) v = v != 0 ? 1 : 0;
  return out;
}

std::string_view to_string(Profile profile) {
  switch (profile) {
    case Profile::kCbisDdsm:
      return "cbis_ddsm";
    case Profile::kInbreast:
      return "inbreast";
    case Profile::kNone:
      return "none";
  }
  return "?";
}

Profile parse_profile(std::string_view name) {
  if (name == "cbis_ddsm") return Profile::kCbisDdsm;
  if (name == "inbreast") return Profile::kInbreast;
  if (name == "none") return Profile::kNone;
  throw ConfigError("unknown preprocessing profile '" + std::string(name) + "' (expected cbis_ddsm, inbreast or none)");
}

CasePair preprocess_case(const RawImage& img, const std::vector<BinaryMask>& masks, const PreprocessOptions& options) {
  if (masks.empty()) throw InputError(img.source_id + ": no ground-truth masks");
  return run_pipeline(img, &masks, options);
}

CasePair preprocess_image(const RawImage& img, const PreprocessOptions& options) {
  return run_pipeline(img, nullptr, options);
}

}  // namespace massseg
