#include "massseg/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include <unistd.h>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "massseg/log.hpp"
#include "massseg/random.hpp"

namespace massseg {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

constexpr char kMagic[8] = {'M', 'S', 'S', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

bool is_image_file(const fs::path& p) {
  const std::string ext = lower(p.extension().string());
  return ext == ".png" || ext == ".tif" || ext == ".tiff";
}

bool is_mask_stem(const std::string& stem) { return stem.find("_mask") != std::string::npos; }

std::vector<fs::path> sorted_images(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

void scan_directory(const fs::path& images_dir, const fs::path& masks_dir, SplitTag split,
                    std::vector<ManifestEntry>& out) {
  const auto images = sorted_images(images_dir);
  const auto masks = images_dir == masks_dir ? images : sorted_images(masks_dir);
  for (const auto& img : images) {
    const std::string stem = img.stem().string();
    if (is_mask_stem(stem)) continue;
    ManifestEntry entry{stem, img, {}, split};
    const std::string prefix = stem + "_mask";
    for (const auto& m : masks) {
      if (m.stem().string().rfind(prefix, 0) == 0) entry.mask_paths.push_back(m);
    }
    if (entry.mask_paths.empty()) {
      log::warn("skipping " + img.string() + ": no " + prefix + "* file");
      continue;
    }
    out.push_back(std::move(entry));
  }
}

void scan_split(const fs::path& dir, SplitTag split, std::vector<ManifestEntry>& out) {
  if (fs::is_directory(dir / "images")) {
    const fs::path masks = fs::is_directory(dir / "masks") ? dir / "masks" : dir / "images";
    scan_directory(dir / "images", masks, split, out);
  } else {
    scan_directory(dir, dir, split, out);
  }
}

cv::Mat read_any(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("file not found: " + path.string());
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_ANYCOLOR);
  if (m.empty()) throw IoError("cannot decode image: " + path.string());
  if (m.channels() == 3) {
    cv::cvtColor(m, m, cv::COLOR_BGR2GRAY);
  } else if (m.channels() == 4) {
    cv::cvtColor(m, m, cv::COLOR_BGRA2GRAY);
  }
  return m;
}

void write_mat(const fs::path& path, const cv::Mat& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), m);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write " + path.string() + ": " + e.what());
  }
  if (!ok) throw IoError("cannot write " + path.string());
}

cv::Mat to_gray8(const FloatImage& image) {
  cv::Mat m(image.height(), image.width(), CV_8U);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      m.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(std::lround(std::clamp(image(y, x), 0.0f, 1.0f) * 255.0f));
    }
  }
  return m;
}

struct Canvas {
  FloatImage image;
  BinaryMask mask;
};

// Paints a rotated filled ellipse; returns its support.
BinaryMask paint_ellipse(FloatImage& img, double cy, double cx, double ry, double rx, double theta, float value) {
  BinaryMask support(img.height(), img.width());
  const double c = std::cos(theta), s = std::sin(theta);
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - std::max(ry, rx))));
  const int y1 = std::min(img.height() - 1, static_cast<int>(std::ceil(cy + std::max(ry, rx))));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - std::max(ry, rx))));
  const int x1 = std::min(img.width() - 1, static_cast<int>(std::ceil(cx + std::max(ry, rx))));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dy = y - cy, dx = x - cx;
      const double u = dx * c + dy * s, v = -dx * s + dy * c;
      if ((u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0) {
        img(y, x) = value;
        support(y, x) = 1;
      }
    }
  }
  return support;
}

void add_noise(FloatImage& img, Rng& rng, double stddev) {
  for (float& v : img.storage()) v = static_cast<float>(std::clamp(v + stddev * rng.normal(), 0.0, 1.0));
}

std::string case_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth_%04d", i);
  return buf;
}

nlohmann::json spec_json(const SyntheticSpec& s) {
  return {{"size", s.size},
          {"blob_count", {s.blob_count_min, s.blob_count_max}},
          {"blob_radius", {s.blob_radius_min, s.blob_radius_max}},
          {"noise_std", s.noise_std},
          {"seed", s.seed}};
}

template <typename T>
T read_pod(std::istream& in, const fs::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated checkpoint: " + path.string());
  return v;
}

struct LoadedCheckpoint {
  CheckpointInfo info;
  nlohmann::json tensors;
  std::vector<float> data;
};

LoadedCheckpoint read_checkpoint(const fs::path& path, bool with_data) {
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError("not a checkpoint file: " + path.string());
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  const auto header_len = read_pod<std::uint64_t>(in, path);
  if (header_len > (std::uint64_t{1} << 30)) throw IoError("corrupt checkpoint header: " + path.string());
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("truncated checkpoint: " + path.string());

  LoadedCheckpoint out;
  try {
    const auto j = nlohmann::json::parse(header);
    out.info.variant = parse_variant(j.at("variant").get<std::string>());
    out.info.input_size = j.at("input_size").get<int>();
    out.info.seed = j.at("seed").get<std::uint64_t>();
    out.info.options = model_options_from_json(j.at("options"));
    out.info.meta = j.value("meta", nlohmann::json::object());
    out.tensors = j.at("tensors");
    if (j.at("dtype").get<std::string>() != "float32") throw IoError("unsupported dtype in " + path.string());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  if (!with_data) return out;

  std::uint64_t total = 0;
  for (const auto& t : out.tensors) total += t.at("count").get<std::uint64_t>();
  out.data.resize(total);
  in.read(reinterpret_cast<char*>(out.data.data()), static_cast<std::streamsize>(total * sizeof(float)));
  if (!in) throw IoError("truncated checkpoint data: " + path.string());
  in.peek();
  if (!in.eof()) throw IoError("trailing bytes in checkpoint: " + path.string());
  return out;
}

void copy_into(SegmentationModel<float>& model, const LoadedCheckpoint& ckpt, const fs::path& path) {
  std::map<std::string, std::pair<Shape, std::uint64_t>> index;
  for (const auto& t : ckpt.tensors) {
    index[t.at("name").get<std::string>()] = {t.at("shape").get<Shape>(), t.at("offset").get<std::uint64_t>()};
  }
  std::size_t seen = 0;
  model.visit_parameters(Module<float>::Visitor([&](const std::string& name, Parameter<float>& p) {
    auto it = index.find(name);
    if (it == index.end()) throw IoError("checkpoint " + path.string() + " lacks tensor " + name);
    if (it->second.first != p.value().shape()) {
      throw IoError("checkpoint " + path.string() + ": tensor " + name + " has shape " +
                    shape_string(it->second.first) + ", model expects " + shape_string(p.value().shape()));
    }
    const std::uint64_t offset = it->second.second;
    if (offset + p.value().size() > ckpt.data.size()) throw IoError("corrupt tensor index in " + path.string());
    std::copy_n(ckpt.data.data() + offset, p.value().size(), p.value().data());
    ++seen;
  }));
  if (seen != index.size()) throw IoError("checkpoint " + path.string() + " holds tensors the model does not have");
}

void check_same_model(const CheckpointInfo& info, const SegmentationModel<float>& model) {
  if (info.variant != model.variant()) {
    throw ConfigError("checkpoint holds a " + std::string(to_string(info.variant)) + " model but the target is " +
                      std::string(to_string(model.variant())));
  }
  if (info.input_size != model.input_size()) {
    throw ConfigError("checkpoint input size " + std::to_string(info.input_size) + " differs from model input size " +
                      std::to_string(model.input_size()));
  }
  if (to_json(info.options) != to_json(model.options())) {
    throw ConfigError("checkpoint model options differ from the target model's options");
  }
}

}  // namespace

std::string_view to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::kTrain:
      return "train";
    case SplitTag::kVal:
      return "val";
    case SplitTag::kTest:
      return "test";
    case SplitTag::kUnsplit:
      return "unsplit";
  }
  return "?";
}

SplitTag parse_split_tag(std::string_view name) {
  if (name == "train") return SplitTag::kTrain;
  if (name == "val") return SplitTag::kVal;
  if (name == "test") return SplitTag::kTest;
  if (name == "unsplit") return SplitTag::kUnsplit;
  throw ConfigError("unknown split tag '" + std::string(name) + "'");
}

nlohmann::json to_json(const DatasetManifest& manifest) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : manifest.entries) {
    nlohmann::json masks = nlohmann::json::array();
    for (const auto& m : e.mask_paths) masks.push_back(m.string());
    entries.push_back({{"source_id", e.source_id},
                       {"image_path", e.image_path.string()},
                       {"mask_paths", masks},
                       {"split", to_string(e.split)}});
  }
  return {{"root", manifest.root.string()}, {"profile", to_string(manifest.profile)}, {"entries", entries}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.root = j.at("root").get<std::string>();
    m.profile = parse_profile(j.at("profile").get<std::string>());
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.source_id = e.at("source_id").get<std::string>();
      entry.image_path = e.at("image_path").get<std::string>();
      for (const auto& p : e.at("mask_paths")) entry.mask_paths.emplace_back(p.get<std::string>());
      entry.split = parse_split_tag(e.at("split").get<std::string>());
      if (entry.mask_paths.empty()) throw InputError("manifest entry " + entry.source_id + " has no masks");
      m.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

DatasetManifest scan_dataset(const fs::path& root, Profile profile) {
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  DatasetManifest manifest;
  manifest.root = root;
  manifest.profile = profile;
  const bool has_splits = fs::is_directory(root / "train") || fs::is_directory(root / "test");
  if (has_splits) {
    if (fs::is_directory(root / "train")) scan_split(root / "train", SplitTag::kTrain, manifest.entries);
    if (fs::is_directory(root / "test")) scan_split(root / "test", SplitTag::kTest, manifest.entries);
  } else {
    scan_split(root, SplitTag::kUnsplit, manifest.entries);
  }
  if (manifest.entries.empty()) throw InputError("no valid cases (image plus _mask file) under " + root.string());
  std::stable_sort(manifest.entries.begin(), manifest.entries.end(), [](const auto& a, const auto& b) {
    return a.source_id != b.source_id ? a.source_id < b.source_id : a.split < b.split;
  });
  return manifest;
}

RawImage read_raw_image(const fs::path& path) {
  cv::Mat m = read_any(path);
  RawImage img;
  img.source_id = path.stem().string();
  if (m.depth() == CV_8U) {
    img.bit_depth = 8;
  } else if (m.depth() == CV_16U) {
    img.bit_depth = 16;
  } else {
    throw IoError("unsupported pixel depth in " + path.string() + " (expected 8- or 16-bit)");
  }
  img.pixels = Grid<std::uint16_t>(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) {
    for (int x = 0; x < m.cols; ++x) {
      img.pixels(y, x) = img.bit_depth == 8 ? m.at<std::uint8_t>(y, x) : m.at<std::uint16_t>(y, x);
    }
  }
  return img;
}

BinaryMask read_mask(const fs::path& path) {
  cv::Mat m = read_any(path);
  cv::Mat as16;
  m.convertTo(as16, CV_32F);
  BinaryMask mask(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) {
    for (int x = 0; x < m.cols; ++x) mask(y, x) = as16.at<float>(y, x) != 0.0f;
  }
  return mask;
}

void write_image_png(const fs::path& path, const FloatImage& image) { write_mat(path, to_gray8(image)); }

void write_raw_image(const fs::path& path, const RawImage& image) {
  cv::Mat m(image.height(), image.width(), image.bit_depth == 16 ? CV_16U : CV_8U);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      if (image.bit_depth == 16) {
        m.at<std::uint16_t>(y, x) = image.pixels(y, x);
      } else {
        m.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(image.pixels(y, x));
      }
    }
  }
  write_mat(path, m);
}

void write_mask_png(const fs::path& path, const BinaryMask& mask) {
  cv::Mat m(mask.height(), mask.width(), CV_8U);
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) m.at<std::uint8_t>(y, x) = mask(y, x) ? 255 : 0;
  }
  write_mat(path, m);
}

void write_overlay_png(const fs::path& path, const FloatImage& image, const BinaryMask& mask) {
  if (!mask.same_dims(image)) throw InputError("overlay: mask and image dims differ");
  cv::Mat gray = to_gray8(image), color;
  cv::cvtColor(gray, color, cv::COLOR_GRAY2BGR);
  const int h = mask.height(), w = mask.width();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y == h - 1 || x == w - 1 || !mask(y - 1, x) || !mask(y + 1, x) ||
                        !mask(y, x - 1) || !mask(y, x + 1);
      if (edge) color.at<cv::Vec3b>(y, x) = cv::Vec3b(0, 0, 255);
    }
  }
  write_mat(path, color);
}

void SyntheticSpec::validate() const {
  if (n_cases < 1) throw ConfigError("synthetic case count must be positive");
  if (size < 16 || size % 16 != 0) throw ConfigError("synthetic size must be a positive multiple of 16");
  if (blob_count_min < 1 || blob_count_max < blob_count_min) throw ConfigError("bad synthetic blob count range");
  if (!(blob_radius_min >= 1.0) || blob_radius_max < blob_radius_min) {
    throw ConfigError("synthetic blob radii must satisfy 1 <= min <= max");
  }
  if (!(blob_radius_max < size / 2.0)) throw ConfigError("synthetic blob radius must be below size/2");
  if (blob_count_max * std::numbers::pi * blob_radius_max * blob_radius_max >= 0.5 * size * size) {
    throw ConfigError("synthetic blobs could cover half the image; lower the radius or count");
  }
  if (!(noise_std >= 0.0)) throw ConfigError("synthetic noise std must be non-negative");
}

std::vector<CasePair> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<CasePair> cases;
  const double lo = spec.blob_radius_max, hi = spec.size - 1 - spec.blob_radius_max;
  for (int i = 0; i < spec.n_cases; ++i) {
    CasePair c;
    c.source_id = case_id(i);
    c.image = FloatImage(spec.size, spec.size, static_cast<float>(rng.uniform(0.05, 0.2)));
    c.mask = BinaryMask(spec.size, spec.size);
    const int count = rng.uniform_int(spec.blob_count_min, spec.blob_count_max);
    for (int b = 0; b < count; ++b) {
      const double ry = rng.uniform(spec.blob_radius_min, spec.blob_radius_max);
      const double rx = rng.uniform(spec.blob_radius_min, spec.blob_radius_max);
      const double theta = rng.uniform(0.0, std::numbers::pi);
      const double cy = rng.uniform(lo, hi), cx = rng.uniform(lo, hi);
      const float value = static_cast<float>(rng.uniform(0.65, 0.9));
      const BinaryMask support = paint_ellipse(c.image, cy, cx, ry, rx, theta, value);
      for (std::size_t k = 0; k < support.size(); ++k) c.mask.data()[k] |= support.data()[k];
    }
    add_noise(c.image, rng, spec.noise_std);
    c.applied_steps.push_back({"generate_synthetic", spec_json(spec)});
    c.geometry = {spec.size, spec.size, 0, 0, 0, 0, spec.size, spec.size};
    cases.push_back(std::move(c));
  }
  return cases;
}

std::vector<RawCase> generate_synthetic_raw(const SyntheticSpec& spec, int height, int width) {
  if (height < kMinRawSide || width < kMinRawSide) {
    throw ConfigError("synthetic raw images need sides of at least " + std::to_string(kMinRawSide));
  }
  if (!(spec.blob_radius_min >= 1.0) || spec.blob_radius_max < spec.blob_radius_min ||
      spec.blob_radius_max >= 0.2 * std::min(height, width)) {
    throw ConfigError("synthetic blob radii must satisfy 1 <= min <= max < 0.2 * shorter side");
  }
  if (spec.n_cases < 1 || spec.blob_count_min < 1 || spec.blob_count_max < spec.blob_count_min) {
    throw ConfigError("bad synthetic case or blob counts");
  }
  Rng rng(spec.seed);
  std::vector<RawCase> cases;
  for (int i = 0; i < spec.n_cases; ++i) {
    FloatImage canvas(height, width, 0.0f);
    paint_ellipse(canvas, height / 2.0, width / 2.0, 0.42 * height, 0.40 * width, 0.0,
                  static_cast<float>(rng.uniform(0.3, 0.4)));
    RawCase rc;
    const int count = rng.uniform_int(spec.blob_count_min, spec.blob_count_max);
    for (int b = 0; b < count; ++b) {
      const double ry = rng.uniform(spec.blob_radius_min, spec.blob_radius_max);
      const double rx = rng.uniform(spec.blob_radius_min, spec.blob_radius_max);
      const double theta = rng.uniform(0.0, std::numbers::pi);
      const double cy = rng.uniform(0.3, 0.7) * height, cx = rng.uniform(0.3, 0.7) * width;
      rc.masks.push_back(
          paint_ellipse(canvas, cy, cx, ry, rx, theta, static_cast<float>(rng.uniform(0.7, 0.9))));
    }
    const int tag_h = std::max(3, height / 16), tag_w = std::max(3, width / 12);
    const int tag_y = std::max(2, height / 25), tag_x = width - tag_w - std::max(2, width / 25);
    for (int y = tag_y; y < tag_y + tag_h; ++y) {
      for (int x = tag_x; x < tag_x + tag_w; ++x) canvas(y, x) = 0.95f;
    }
    add_noise(canvas, rng, spec.noise_std);
    rc.image.bit_depth = 16;
    rc.image.source_id = case_id(i);
    rc.image.pixels = Grid<std::uint16_t>(height, width);
    for (std::size_t k = 0; k < canvas.size(); ++k) {
      rc.image.pixels.data()[k] = static_cast<std::uint16_t>(std::lround(canvas.data()[k] * 65535.0f));
    }
    cases.push_back(std::move(rc));
  }
  return cases;
}

void write_raw_dataset(const fs::path& dir, const std::vector<RawCase>& cases) {
  for (const auto& c : cases) {
    write_raw_image(dir / "images" / (c.image.source_id + ".png"), c.image);
    for (std::size_t k = 0; k < c.masks.size(); ++k) {
      write_mask_png(dir / "masks" / (c.image.source_id + "_mask" + std::to_string(k + 1) + ".png"), c.masks[k]);
    }
  }
}

void write_preprocessed(const fs::path& dir, const std::vector<StoredCase>& cases) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  const fs::path manifest = dir / "manifest.jsonl";
  const fs::path tmp = dir / ("manifest.jsonl.tmp." + std::to_string(::getpid()));
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write " + tmp.string());
    for (const auto& sc : cases) {
      const auto& c = sc.pair;
      const std::string image_rel = "images/" + c.source_id + ".png";
      const std::string mask_rel = "masks/" + c.source_id + ".png";
      write_image_png(dir / image_rel, c.image);
      if (!c.mask.empty()) write_mask_png(dir / mask_rel, c.mask);
      nlohmann::json steps = nlohmann::json::array();
      for (const auto& s : c.applied_steps) steps.push_back({{"name", s.name}, {"params", s.params}});
      const auto& g = c.geometry;
      nlohmann::json line = {{"source_id", c.source_id},
                             {"image", image_rel},
                             {"mask", c.mask.empty() ? nlohmann::json(nullptr) : nlohmann::json(mask_rel)},
                             {"split", to_string(sc.split)},
                             {"applied_steps", steps},
                             {"geometry",
                              {{"original", {g.original_height, g.original_width}},
                               {"crop", {g.crop_top, g.crop_left}},
                               {"pad", {g.pad_top, g.pad_left}},
                               {"square_side", g.square_side},
                               {"target_size", g.target_size}}}};
      out << line.dump() << '\n';
    }
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, manifest);
}

std::vector<StoredCase> read_preprocessed(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.jsonl";
  if (!fs::exists(manifest)) throw IoError("no manifest.jsonl in " + dir.string());
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot read " + manifest.string());
  std::vector<StoredCase> cases;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    StoredCase sc;
    try {
      const auto j = nlohmann::json::parse(line);
      sc.pair.source_id = j.at("source_id").get<std::string>();
      sc.split = parse_split_tag(j.at("split").get<std::string>());
      const RawImage raw = read_raw_image(dir / j.at("image").get<std::string>());
      sc.pair.image = normalize(raw);
      if (!j.at("mask").is_null()) sc.pair.mask = read_mask(dir / j.at("mask").get<std::string>());
      for (const auto& s : j.at("applied_steps")) sc.pair.applied_steps.push_back({s.at("name"), s.at("params")});
      const auto& g = j.at("geometry");
      sc.pair.geometry = {g.at("original")[0], g.at("original")[1], g.at("crop")[0], g.at("crop")[1],
                          g.at("pad")[0],      g.at("pad")[1],      g.at("square_side"), g.at("target_size")};
    } catch (const nlohmann::json::exception& e) {
      throw IoError(manifest.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    cases.push_back(std::move(sc));
  }
  if (cases.empty()) throw InputError("no cases listed in " + manifest.string());
  return cases;
}

nlohmann::json to_json(const ModelOptions& o) {
  const auto& s = o.schedule;
  return {{"input_channels", o.input_channels},
          {"norm", {{"momentum", o.norm.momentum}, {"epsilon", o.norm.epsilon}, {"order", to_string(o.norm.order)}}},
          {"bridge", to_string(o.bridge)},
          {"schedule",
           {{"respath_filters", s.respath_filters},
            {"respath_lengths", s.respath_lengths},
            {"multires_3x3_filters", s.multires_3x3_filters},
            {"multires_1x1_filters", s.multires_1x1_filters},
            {"standard_block_filters", s.standard_block_filters},
            {"bottleneck_filters", s.bottleneck_filters},
            {"aspp_bottleneck_filters", s.aspp_bottleneck_filters},
            {"aspp_output_filters", s.aspp_output_filters},
            {"aspp_dilations", s.aspp_dilations}}}};
}

ModelOptions model_options_from_json(const nlohmann::json& j) {
  ModelOptions o;
  o.input_channels = j.at("input_channels").get<int>();
  const auto& n = j.at("norm");
  o.norm.momentum = n.at("momentum").get<double>();
  o.norm.epsilon = n.at("epsilon").get<double>();
  o.norm.order = parse_layer_order(n.at("order").get<std::string>());
  o.bridge = parse_bridge_mode(j.at("bridge").get<std::string>());
  const auto& s = j.at("schedule");
  s.at("respath_filters").get_to(o.schedule.respath_filters);
  s.at("respath_lengths").get_to(o.schedule.respath_lengths);
  s.at("multires_3x3_filters").get_to(o.schedule.multires_3x3_filters);
  s.at("multires_1x1_filters").get_to(o.schedule.multires_1x1_filters);
  s.at("standard_block_filters").get_to(o.schedule.standard_block_filters);
  s.at("bottleneck_filters").get_to(o.schedule.bottleneck_filters);
  s.at("aspp_bottleneck_filters").get_to(o.schedule.aspp_bottleneck_filters);
  s.at("aspp_output_filters").get_to(o.schedule.aspp_output_filters);
  s.at("aspp_dilations").get_to(o.schedule.aspp_dilations);
  return o;
}

void save_checkpoint(const SegmentationModel<float>& model, const fs::path& path, const nlohmann::json& meta) {
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::vector<const Tensor<float>*> values;
  model.visit_parameters(Module<float>::ConstVisitor([&](const std::string& name, const Parameter<float>& p) {
    tensors.push_back({{"name", name},
                       {"shape", p.value().shape()},
                       {"offset", offset},
                       {"count", p.value().size()},
                       {"trainable", p.trainable}});
    offset += p.value().size();
    values.push_back(&p.value());
  }));
  const nlohmann::json header = {{"format", "massseg-checkpoint"},
                                 {"variant", to_string(model.variant())},
                                 {"input_size", model.input_size()},
                                 {"seed", model.seed()},
                                 {"options", to_json(model.options())},
                                 {"dtype", "float32"},
                                 {"tensors", tensors},
                                 {"meta", meta}};
  const std::string text = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* t : values) {
      out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(float)));
    }
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw IoError("failed writing checkpoint " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

CheckpointInfo read_checkpoint_info(const fs::path& path) { return read_checkpoint(path, false).info; }

std::unique_ptr<SegmentationModel<float>> load_checkpoint(const fs::path& path) {
  LoadedCheckpoint ckpt = read_checkpoint(path, true);
  auto model = build_model<float>(ckpt.info.variant, ckpt.info.input_size, ckpt.info.seed, ckpt.info.options);
  copy_into(*model, ckpt, path);
  return model;
}

void load_checkpoint_into(SegmentationModel<float>& model, const fs::path& path) {
  LoadedCheckpoint ckpt = read_checkpoint(path, true);
  check_same_model(ckpt.info, model);
  copy_into(model, ckpt, path);
}

}  // namespace massseg
