#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "massseg/models.hpp"
#include "massseg/preprocessing.hpp"

namespace massseg {

namespace fs = std::filesystem;

enum class SplitTag { kTrain, kVal, kTest, kUnsplit };

std::string_view to_string(SplitTag tag);
SplitTag parse_split_tag(std::string_view name);

struct ManifestEntry {
  std::string source_id;
  fs::path image_path;
  std::vector<fs::path> mask_paths;  // never empty
  SplitTag split = SplitTag::kUnsplit;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  fs::path root;
  std::vector<ManifestEntry> entries;  // sorted by (source_id, split)
  Profile profile = Profile::kCbisDdsm;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

nlohmann::json to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j);

/// Pairs images with their `<stem>_mask*` files. Accepted layouts, checked in order:
/// `<root>/{train,test}/images` + `masks`, `<root>/images` + `masks`, or images and masks side by
/// side in `<root>`. Images without masks are skipped with a warning. Throws InputError when no
/// entry remains and IoError when `root` is not a directory.
DatasetManifest scan_dataset(const fs::path& root, Profile profile);

/// 8- or 16-bit grayscale PNG/TIFF. Colour images are converted to gray.
RawImage read_raw_image(const fs::path& path);
/// Any nonzero pixel is foreground.
BinaryMask read_mask(const fs::path& path);
/// [0, 1] image stored as 8-bit.
void write_image_png(const fs::path& path, const FloatImage& image);
void write_raw_image(const fs::path& path, const RawImage& image);
/// Foreground stored as 255.
void write_mask_png(const fs::path& path, const BinaryMask& mask);
/// Gray image with the mask boundary drawn as a one-pixel red contour.
void write_overlay_png(const fs::path& path, const FloatImage& image, const BinaryMask& mask);

struct SyntheticSpec {
  int n_cases = 20;
  int size = 64;
  int blob_count_min = 1;
  int blob_count_max = 2;
  double blob_radius_min = 4.0;   // ellipse semi-axes, pixels
  double blob_radius_max = 12.0;
  double noise_std = 0.05;
  std::uint64_t seed = 7;

  /// Throws ConfigError unless the size is a positive multiple of 16, radii are below size/2
  /// and the largest possible blob area stays under half the image.
  void validate() const;

  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

/// Dark background, bright elliptical blobs and clipped Gaussian noise. Masks are the exact
/// blob support. Identical specs give bit-identical cases.
std::vector<CasePair> generate_synthetic(const SyntheticSpec& spec);

struct RawCase {
  RawImage image;
  std::vector<BinaryMask> masks;  // one per blob
};

/// Mammogram-like raw cases of arbitrary shape: a mid-gray tissue region on a zero background,
/// bright blobs inside it and a small bright label tag in a corner. 16-bit pixels.
std::vector<RawCase> generate_synthetic_raw(const SyntheticSpec& spec, int height, int width);

/// Writes `<dir>/images/<id>.png`, `<dir>/masks/<id>_mask<k>.png` for each raw case.
void write_raw_dataset(const fs::path& dir, const std::vector<RawCase>& cases);

struct StoredCase {
  CasePair pair;
  SplitTag split = SplitTag::kUnsplit;
};

/// Writes `<dir>/images/<id>.png`, `<dir>/masks/<id>.png` and `<dir>/manifest.jsonl`.
void write_preprocessed(const fs::path& dir, const std::vector<StoredCase>& cases);
/// Reads a directory produced by write_preprocessed.
std::vector<StoredCase> read_preprocessed(const fs::path& dir);

struct CheckpointInfo {
  ModelVariant variant = ModelVariant::kConnectedUnetsPlusPlus;
  int input_size = 0;
  std::uint64_t seed = 0;
  ModelOptions options;
  nlohmann::json meta;
};

nlohmann::json to_json(const ModelOptions& options);
ModelOptions model_options_from_json(const nlohmann::json& j);

/// Single-file archive: magic, format version, JSON header (model description, tensor index,
/// `meta`) and raw little-endian float32 data. Written to a temporary file and renamed.
void save_checkpoint(const SegmentationModel<float>& model, const fs::path& path,
                     const nlohmann::json& meta = nlohmann::json::object());
CheckpointInfo read_checkpoint_info(const fs::path& path);
std::unique_ptr<SegmentationModel<float>> load_checkpoint(const fs::path& path);
/// Throws ConfigError naming both variants (or sizes) when the checkpoint describes another model.
void load_checkpoint_into(SegmentationModel<float>& model, const fs::path& path);

}  // namespace massseg
