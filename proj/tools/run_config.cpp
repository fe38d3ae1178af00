#include "run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <type_traits>

#include <yaml-cpp/yaml.h>

#include "massseg/errors.hpp"

namespace massseg::cli {

namespace {

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::filesystem::path& v) { return v.string(); }
std::string format_value(ModelVariant v) { return std::string(to_string(v)); }
std::string format_value(LayerOrder v) { return std::string(to_string(v)); }
std::string format_value(BridgeMode v) { return std::string(to_string(v)); }
std::string format_value(Profile v) { return std::string(to_string(v)); }
std::string format_value(const std::vector<ThresholdRule>& v) { return format_threshold_rules(v); }

std::string format_value(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename N>
N parse_number(const std::string& text, const std::string& where) {
  N v{};
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, v);
  if (text.empty() || res.ec != std::errc() || res.ptr != end) {
    throw ConfigError(where + ": cannot parse '" + text + "' as a number");
  }
  return v;
}

template <typename V>
V parse_value(const std::string& text, const std::string& where) {
  try {
    if constexpr (std::is_same_v<V, bool>) {
      if (text == "true") return true;
      if (text == "false") return false;
      throw ConfigError("expected true or false, got '" + text + "'");
    } else if constexpr (std::is_arithmetic_v<V>) {
      return parse_number<V>(text, where);
    } else if constexpr (std::is_same_v<V, std::filesystem::path>) {
      return std::filesystem::path(text);
    } else if constexpr (std::is_same_v<V, ModelVariant>) {
      return parse_variant(text);
    } else if constexpr (std::is_same_v<V, LayerOrder>) {
      return parse_layer_order(text);
    } else if constexpr (std::is_same_v<V, BridgeMode>) {
      return parse_bridge_mode(text);
    } else if constexpr (std::is_same_v<V, Profile>) {
      return parse_profile(text);
    } else {
      static_assert(std::is_same_v<V, std::vector<ThresholdRule>>);
      return parse_threshold_rules(text);
    }
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(where, 0) == 0) throw;
    throw ConfigError(where + ": " + msg);
  } catch (const InputError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

struct Field {
  ConfigKey key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Access>
Field make_field(const char* section, const char* key, const char* description, Access access) {
  using V = std::remove_cvref_t<decltype(access(std::declval<RunConfig&>()))>;
  const std::string where = std::string(section) + "." + key;
  return {{section, key, description},
          [access](const RunConfig& c) { return format_value(access(const_cast<RunConfig&>(c))); },
          [access, where](RunConfig& c, const std::string& text) { access(c) = parse_value<V>(text, where); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      make_field("model", "variant", "architecture name", [](RunConfig& c) -> auto& { return c.model.variant; }),
      make_field("model", "input_size", "square model input side", [](RunConfig& c) -> auto& { return c.model.input_size; }),
      make_field("model", "seed", "weight init, split and shuffle seed", [](RunConfig& c) -> auto& { return c.model.seed; }),
      make_field("model", "layer_order", "activation/normalization order", [](RunConfig& c) -> auto& { return c.model.layer_order; }),
      make_field("model", "bridge", "bridge output form", [](RunConfig& c) -> auto& { return c.model.bridge; }),
      make_field("preprocess", "profile", "cbis_ddsm, inbreast or none", [](RunConfig& c) -> auto& { return c.preprocess.profile; }),
      make_field("preprocess", "crop_fraction", "border crop per edge", [](RunConfig& c) -> auto& { return c.preprocess.crop_fraction; }),
      make_field("preprocess", "clahe_clip_limit", "CLAHE clip as a fraction of tile pixels", [](RunConfig& c) -> auto& { return c.preprocess.clahe_clip_limit; }),
      make_field("preprocess", "clahe_tiles", "CLAHE tiles per side", [](RunConfig& c) -> auto& { return c.preprocess.clahe_tiles; }),
      make_field("preprocess", "clahe_bins", "CLAHE histogram bins", [](RunConfig& c) -> auto& { return c.preprocess.clahe_bins; }),
      make_field("train", "learning_rate", "initial Adam step size", [](RunConfig& c) -> auto& { return c.train.learning_rate; }),
      make_field("train", "batch_size", "cases per step", [](RunConfig& c) -> auto& { return c.train.batch_size; }),
      make_field("train", "epochs", "maximum epochs", [](RunConfig& c) -> auto& { return c.train.epochs; }),
      make_field("train", "use_validation", "hold out a validation split", [](RunConfig& c) -> auto& { return c.train.use_validation; }),
      make_field("train", "val_fraction", "validation share of the training cases", [](RunConfig& c) -> auto& { return c.train.val_fraction; }),
      make_field("train", "early_stop_patience", "epochs without improvement before stopping", [](RunConfig& c) -> auto& { return c.train.early_stop_patience; }),
      make_field("train", "lr_reduce_patience", "epochs without improvement before decaying the rate", [](RunConfig& c) -> auto& { return c.train.lr_reduce_patience; }),
      make_field("train", "lr_reduce_factor", "rate multiplier on plateau", [](RunConfig& c) -> auto& { return c.train.lr_reduce_factor; }),
      make_field("train", "min_lr", "rate floor", [](RunConfig& c) -> auto& { return c.train.min_lr; }),
      make_field("train", "stop_at_dice", "stop once train Dice reaches this (0 = off)", [](RunConfig& c) -> auto& { return c.train.stop_at_dice; }),
      make_field("evaluate", "threshold", "probability cut for masks", [](RunConfig& c) -> auto& { return c.evaluate.threshold; }),
      make_field("evaluate", "thresholds", "report rules, e.g. dice>=0.45,hd<=2.75", [](RunConfig& c) -> auto& { return c.evaluate.thresholds; }),
      make_field("evaluate", "hausdorff_scale", "divisor for reported distances", [](RunConfig& c) -> auto& { return c.evaluate.hausdorff_scale; }),
      make_field("paths", "data", "dataset directory", [](RunConfig& c) -> auto& { return c.paths.data; }),
      make_field("paths", "out_dir", "output directory", [](RunConfig& c) -> auto& { return c.paths.out_dir; }),
      make_field("paths", "checkpoint", "checkpoint file", [](RunConfig& c) -> auto& { return c.paths.checkpoint; }),
      make_field("synthetic", "cases", "number of generated cases", [](RunConfig& c) -> auto& { return c.synthetic.n_cases; }),
      make_field("synthetic", "size", "generated image side", [](RunConfig& c) -> auto& { return c.synthetic.size; }),
      make_field("synthetic", "blob_count_min", "fewest blobs per case", [](RunConfig& c) -> auto& { return c.synthetic.blob_count_min; }),
      make_field("synthetic", "blob_count_max", "most blobs per case", [](RunConfig& c) -> auto& { return c.synthetic.blob_count_max; }),
      make_field("synthetic", "blob_radius_min", "smallest blob semi-axis", [](RunConfig& c) -> auto& { return c.synthetic.blob_radius_min; }),
      make_field("synthetic", "blob_radius_max", "largest blob semi-axis", [](RunConfig& c) -> auto& { return c.synthetic.blob_radius_max; }),
      make_field("synthetic", "noise_std", "Gaussian noise level", [](RunConfig& c) -> auto& { return c.synthetic.noise_std; }),
      make_field("synthetic", "seed", "generator seed", [](RunConfig& c) -> auto& { return c.synthetic.seed; }),
  };
  return table;
}

const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key.section == section && f.key.key == key) return &f;
  }
  return nullptr;
}

bool known_section(const std::string& section) {
  for (const auto& f : fields()) {
    if (f.key.section == section) return true;
  }
  return false;
}

}  // namespace

void RunConfig::validate() const {
  validate_input_size(model.input_size);
  if (!(preprocess.crop_fraction >= 0.0 && preprocess.crop_fraction < 0.25)) {
    throw ConfigError("preprocess.crop_fraction must lie in [0, 0.25)");
  }
  if (!(preprocess.clahe_clip_limit > 0.0)) throw ConfigError("preprocess.clahe_clip_limit must be positive");
  if (preprocess.clahe_tiles < 1) throw ConfigError("preprocess.clahe_tiles must be at least 1");
  if (preprocess.clahe_bins < 2) throw ConfigError("preprocess.clahe_bins must be at least 2");
  if (!(train.stop_at_dice >= 0.0 && train.stop_at_dice <= 1.0)) {
    throw ConfigError("train.stop_at_dice must lie in [0, 1]");
  }
  if (evaluate.thresholds.empty()) throw ConfigError("evaluate.thresholds must name at least one rule");
  if (!(evaluate.hausdorff_scale > 0.0)) throw ConfigError("evaluate.hausdorff_scale must be positive");
  train_config().validate();
}

ModelOptions RunConfig::model_options() const {
  ModelOptions o;
  o.norm.order = model.layer_order;
  o.bridge = model.bridge;
  return o;
}

PreprocessOptions RunConfig::preprocess_options() const {
  PreprocessOptions o;
  o.profile = preprocess.profile;
  o.target_size = model.input_size;
  o.crop_fraction = preprocess.crop_fraction;
  o.clahe.clip_limit = preprocess.clahe_clip_limit;
  o.clahe.tiles_y = o.clahe.tiles_x = preprocess.clahe_tiles;
  o.clahe.bins = preprocess.clahe_bins;
  return o;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.learning_rate = train.learning_rate;
  t.batch_size = train.batch_size;
  t.max_epochs = train.epochs;
  t.val_fraction = train.val_fraction;
  t.early_stop_patience = train.early_stop_patience;
  t.lr_reduce_patience = train.lr_reduce_patience;
  t.lr_reduce_factor = train.lr_reduce_factor;
  t.min_lr = train.min_lr;
  t.seed = model.seed;
  t.input_size = model.input_size;
  t.threshold = evaluate.threshold;
  return t;
}

RunConfig parse_run_config(const std::string& text, RunConfig base) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  if (root.IsNull()) return base;
  if (!root.IsMap()) throw ConfigError("config must be a mapping of sections");
  for (const auto& section : root) {
    const std::string name = section.first.as<std::string>();
    if (!known_section(name)) throw ConfigError("unknown config section '" + name + "'");
    if (section.second.IsNull()) continue;
    if (!section.second.IsMap()) throw ConfigError("config section '" + name + "' must be a mapping");
    for (const auto& entry : section.second) {
      const std::string key = entry.first.as<std::string>();
      const Field* field = find_field(name, key);
      if (!field) throw ConfigError("unknown config key '" + name + "." + key + "'");
      if (entry.second.IsNull()) {
        field->set(base, "");
      } else if (entry.second.IsScalar()) {
        field->set(base, entry.second.Scalar());
      } else {
        throw ConfigError("config key '" + name + "." + key + "' must be a scalar");
      }
    }
  }
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), std::move(base));
}

void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& text) {
  const auto dot = dotted_key.find('.');
  const Field* field =
      dot == std::string::npos ? nullptr : find_field(dotted_key.substr(0, dot), dotted_key.substr(dot + 1));
  if (!field) throw ConfigError("unknown config key '" + dotted_key + "'");
  field->set(config, text);
}

std::string dump_run_config(const RunConfig& config) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  std::string open;
  for (const auto& f : fields()) {
    if (f.key.section != open) {
      if (!open.empty()) out << YAML::EndMap;
      out << YAML::Key << f.key.section << YAML::Value << YAML::BeginMap;
      open = f.key.section;
    }
    out << YAML::Key << f.key.key << YAML::Value << f.get(config);
  }
  out << YAML::EndMap << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

std::vector<ConfigKey> config_keys() {
  std::vector<ConfigKey> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace massseg::cli
