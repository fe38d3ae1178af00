#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "massseg/grid.hpp"

namespace massseg {

/// Smallest accepted raw side length.
inline constexpr int kMinRawSide = 64;

struct RawImage {
  Grid<std::uint16_t> pixels;
  int bit_depth = 8;  // 8 or 16
  std::string source_id;
  std::optional<std::string> laterality;
  std::optional<std::string> view;

  int height() const { return pixels.height(); }
  int width() const { return pixels.width(); }
  std::uint16_t max_value() const { return bit_depth == 16 ? 65535 : 255; }
  /// Throws InputError for bad bit depths, out-of-range pixels or sides below kMinRawSide.
  void check() const;
};

struct AppliedStep {
  std::string name;
  nlohmann::json params = nlohmann::json::object();

  friend bool operator==(const AppliedStep&, const AppliedStep&) = default;
};

/// Maps original pixel coordinates to the model grid:
/// out = (in - crop + pad + 0.5) * scale - 0.5.
struct CaseGeometry {
  int original_height = 0, original_width = 0;
  int crop_top = 0, crop_left = 0;
  int pad_top = 0, pad_left = 0;
  int square_side = 0;
  int target_size = 0;

  double scale() const { return static_cast<double>(target_size) / square_side; }
  double map_y(double y) const { return (y - crop_top + pad_top + 0.5) * scale() - 0.5; }
  double map_x(double x) const { return (x - crop_left + pad_left + 0.5) * scale() - 0.5; }
};

struct CasePair {
  FloatImage image;  // square, values in [0, 1]
  BinaryMask mask;   // empty when preprocessed without ground truth
  std::string source_id;
  std::vector<AppliedStep> applied_steps;
  CaseGeometry geometry;
};

struct CropMargins {
  int top = 0, left = 0;
};

/// Removes floor(fraction * dim) pixels from each edge. fraction must be in [0, 0.25).
CropMargins crop_margins(int height, int width, double fraction);
RawImage crop_borders(const RawImage& img, double fraction);
BinaryMask crop_borders(const BinaryMask& mask, double fraction);

/// Otsu threshold over a 256-bin histogram spanning [min, max]. Returns the highest pixel
/// value assigned to the background class.
std::uint16_t otsu_threshold(const Grid<std::uint16_t>& pixels);

/// Keeps the largest 8-connected Otsu foreground component (holes filled) and zeroes the rest.
/// Throws InputError when nothing is above the threshold.
RawImage remove_artifacts(const RawImage& img);

/// Divides by the bit-depth maximum.
FloatImage normalize(const RawImage& img);

struct ClaheOptions {
  double clip_limit = 0.01;  // fraction of tile pixels allowed per bin
  int tiles_y = 8;
  int tiles_x = 8;
  int bins = 256;

  friend bool operator==(const ClaheOptions&, const ClaheOptions&) = default;
};

/// Contrast-limited adaptive histogram equalization on a [0, 1] image. Histogram bins span the
/// image's [min, max]; tile mappings are blended bilinearly. Constant images are returned unchanged.
FloatImage apply_clahe(const FloatImage& img, const ClaheOptions& options = {});

/// Pixelwise OR. Throws InputError for an empty list or differing dims.
BinaryMask fuse_masks(const std::vector<BinaryMask>& masks);

struct SquarePair {
  FloatImage image;
  BinaryMask mask;
  int pad_top = 0;
  int pad_left = 0;
};

/// Zero-pads the shorter side; the odd pixel goes to the bottom/right. An empty mask stays empty.
SquarePair pad_to_square(const FloatImage& img, const BinaryMask& mask);

FloatImage resize_bilinear(const FloatImage& img, int height, int width);
/// Nearest-neighbour resize followed by re-binarization.
BinaryMask resize_nearest(const BinaryMask& mask, int height, int width);

enum class Profile { kCbisDdsm, kInbreast, kNone };

std::string_view to_string(Profile profile);
/// Accepts `cbis_ddsm`, `inbreast`, `none`.
Profile parse_profile(std::string_view name);

struct PreprocessOptions {
  Profile profile = Profile::kCbisDdsm;
  int target_size = 224;
  double crop_fraction = 0.02;
  ClaheOptions clahe;
};

/// Runs the profile's step chain on an image and its ground-truth masks (at least one).
CasePair preprocess_case(const RawImage& img, const std::vector<BinaryMask>& masks, const PreprocessOptions& options);
/// Same chain without ground truth; the returned mask is empty.
CasePair preprocess_image(const RawImage& img, const PreprocessOptions& options);

}  // namespace massseg
