#include "cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"

#include "massseg/data_io.hpp"
#include "massseg/errors.hpp"
#include "massseg/log.hpp"
#include "massseg/metrics.hpp"
#include "massseg/models.hpp"
#include "massseg/preprocessing.hpp"
#include "massseg/training.hpp"
#include "run_config.hpp"

namespace massseg::cli {

namespace fs = std::filesystem;

namespace {

/// Flag values collected during parsing and applied to the config after the file is loaded.
struct Overrides {
  std::vector<std::pair<std::string, std::string>> values;
  std::set<std::string> keys;

  void add(std::string key, std::string text) {
    keys.insert(key);
    values.emplace_back(std::move(key), std::move(text));
  }
};

void bind(CLI::App* app, Overrides& overrides, const std::string& flag, const std::string& key,
          const std::string& description) {
  app->add_option_function<std::string>(
      flag, [&overrides, key](const std::string& v) { overrides.add(key, v); }, description + " [" + key + "]");
}

struct Options {
  std::optional<fs::path> config_file;
  int verbose = 0;
  bool quiet = false;
  bool dump_config = false;
  std::optional<int> synthetic_cases;
  bool raw = false;
  int raw_height = 320;
  int raw_width = 256;
  std::string split = "auto";
  fs::path image;
  bool resize = false;
  bool preprocess_input = false;
  bool check_tables = false;
};

std::string format_count(std::int64_t n) {
  std::string digits = std::to_string(n);
  for (int i = static_cast<int>(digits.size()) - 3; i > 0; i -= 3) digits.insert(static_cast<std::size_t>(i), ",");
  return digits;
}

std::string fixed(double v, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

fs::path checkpoint_path(const RunConfig& cfg) {
  return cfg.paths.checkpoint.empty() ? cfg.paths.out_dir / "checkpoint.ckpt" : cfg.paths.checkpoint;
}

std::vector<CasePair> labelled(std::vector<CasePair> cases) {
  std::vector<CasePair> kept;
  for (auto& c : cases) {
    if (c.mask.empty()) {
      log::warn("skipping " + c.source_id + ": no ground-truth mask");
      continue;
    }
    kept.push_back(std::move(c));
  }
  if (kept.empty()) throw InputError("no cases with ground-truth masks");
  return kept;
}

/// Cases from the preprocessed dataset, or regenerated synthetic cases.
std::vector<CasePair> load_cases(const RunConfig& cfg, bool synthetic, const std::string& split) {
  if (synthetic) return generate_synthetic(cfg.synthetic);
  if (cfg.paths.data.empty()) throw ConfigError("no dataset: pass --data or --synthetic");
  const auto stored = read_preprocessed(cfg.paths.data);
  bool any_test = false;
  for (const auto& s : stored) any_test |= s.split == SplitTag::kTest;
  std::vector<CasePair> cases;
  for (const auto& s : stored) {
    bool keep = true;
    if (split == "fit") {
      keep = s.split != SplitTag::kTest;
    } else if (split == "auto") {
      keep = !any_test || s.split == SplitTag::kTest;
    } else if (split != "all") {
      keep = s.split == parse_split_tag(split);
    }
    if (keep) cases.push_back(s.pair);
  }
  if (cases.empty()) throw InputError("no '" + split + "' cases in " + cfg.paths.data.string());
  return cases;
}

int cmd_synth(const RunConfig& cfg, const Options& opt, std::ostream& out) {
  const fs::path dir = cfg.paths.out_dir;
  if (opt.raw) {
    const auto cases = generate_synthetic_raw(cfg.synthetic, opt.raw_height, opt.raw_width);
    write_raw_dataset(dir, cases);
    out << "wrote " << cases.size() << " raw cases to " << dir.string() << "\n";
    return kExitOk;
  }
  std::vector<StoredCase> stored;
  for (auto& c : generate_synthetic(cfg.synthetic)) stored.push_back({std::move(c), SplitTag::kUnsplit});
  write_preprocessed(dir, stored);
  out << "wrote " << stored.size() << " preprocessed cases to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_preprocess(const RunConfig& cfg, std::ostream& out) {
  if (cfg.paths.data.empty()) throw ConfigError("preprocess needs an input directory");
  const auto manifest = scan_dataset(cfg.paths.data, cfg.preprocess.profile);
  const PreprocessOptions options = cfg.preprocess_options();
  std::vector<StoredCase> stored;
  std::map<SplitTag, int> counts;
  for (const auto& entry : manifest.entries) {
    RawImage raw = read_raw_image(entry.image_path);
    raw.source_id = entry.source_id;
    std::vector<BinaryMask> masks;
    for (const auto& m : entry.mask_paths) masks.push_back(read_mask(m));
    stored.push_back({preprocess_case(raw, masks, options), entry.split});
    ++counts[entry.split];
    if (stored.size() % 50 == 0) {
      log::info("preprocessed " + std::to_string(stored.size()) + "/" + std::to_string(manifest.entries.size()));
    }
  }
  write_preprocessed(cfg.paths.out_dir, stored);
  out << "preprocessed " << stored.size() << " cases (profile " << to_string(cfg.preprocess.profile) << ")";
  for (const auto& [tag, n] : counts) out << ", " << to_string(tag) << " " << n;
  out << "\nwrote " << (cfg.paths.out_dir / "manifest.jsonl").string() << "\n";
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, const Options& opt, std::ostream& out) {
  const bool synthetic = opt.synthetic_cases.has_value();
  const auto cases = labelled(load_cases(cfg, synthetic, "fit"));
  DatasetSplit split;
  if (cfg.train.use_validation) {
    split = split_dataset(cases, cfg.train.val_fraction, cfg.model.seed);
  } else {
    split.train = cases;
  }

  auto model = build_model<float>(cfg.model.variant, cfg.model.input_size, cfg.model.seed, cfg.model_options());
  log::info(std::string(to_string(cfg.model.variant)) + " at " + std::to_string(cfg.model.input_size) + "x" +
            std::to_string(cfg.model.input_size) + ": " + format_count(count_params(*model)) + " parameters");
  log::info("training on " + std::to_string(split.train.size()) + " cases, validating on " +
            std::to_string(split.val.size()));

  const fs::path dir = cfg.paths.out_dir;
  fs::create_directories(dir);
  write_text(dir / "config.yaml", dump_run_config(cfg));
  nlohmann::json ids = {{"train", nlohmann::json::array()}, {"val", nlohmann::json::array()}};
  for (const auto& c : split.train) ids["train"].push_back(c.source_id);
  for (const auto& c : split.val) ids["val"].push_back(c.source_id);
  write_text(dir / "split.json", ids.dump(2) + "\n");

  TrainConfig tc = cfg.train_config();
  tc.checkpoint_path = checkpoint_path(cfg);
  EpochCallback on_epoch;
  if (cfg.train.stop_at_dice > 0.0) {
    on_epoch = [&](const EpochRecord& r, SegmentationModel<float>& m) {
      const double d = evaluate(m, split.train, cfg.evaluate.threshold).mean_dice;
      log::info("epoch " + std::to_string(r.epoch) + " inference-mode train dice " + fixed(d));
      return d >= cfg.train.stop_at_dice;
    };
  }
  const TrainHistory history = train(*model, split.train, split.val, tc, on_epoch);
  history.write_csv(dir / "epochs.csv");
  write_text(dir / "history.json", to_json(history).dump(2) + "\n");

  const auto final_train = evaluate(*model, split.train, cfg.evaluate.threshold);
  out << "epochs " << history.epochs.size() << ", best epoch " << history.best_epoch << " (" << history.monitor
      << ")\n";
  out << "train dice " << fixed(final_train.mean_dice) << "\n";
  if (!split.val.empty()) {
    out << "val dice " << fixed(evaluate(*model, split.val, cfg.evaluate.threshold).mean_dice) << "\n";
  }
  out << "checkpoint " << tc.checkpoint_path->string() << "\n";
  return kExitOk;
}

int cmd_evaluate(const RunConfig& cfg, const Options& opt, std::ostream& out) {
  auto model = load_checkpoint(checkpoint_path(cfg));
  const auto cases = labelled(load_cases(cfg, opt.synthetic_cases.has_value(), opt.split));
  const auto report =
      evaluate(*model, cases, cfg.evaluate.threshold, cfg.evaluate.thresholds, cfg.evaluate.hausdorff_scale);

  const fs::path dir = cfg.paths.out_dir;
  fs::create_directories(dir);
  write_scores_csv(dir / "scores.csv", report.cases);
  nlohmann::json summary = to_json(report);
  summary["checkpoint"] = checkpoint_path(cfg).string();
  summary["threshold"] = cfg.evaluate.threshold;
  summary["hausdorff_scale"] = cfg.evaluate.hausdorff_scale;
  write_text(dir / "summary.json", summary.dump(2) + "\n");

  out << "cases " << report.cases.size() << "\n";
  out << "mean dice " << fixed(report.mean_dice) << "\n";
  out << "mean iou " << fixed(report.mean_iou) << "\n";
  out << "mean accuracy " << fixed(report.mean_accuracy) << "\n";
  out << "mean hausdorff " << (report.mean_hausdorff ? fixed(*report.mean_hausdorff) : std::string("n/a"));
  if (report.infinite_hausdorff_cases > 0) out << " (" << report.infinite_hausdorff_cases << " infinite)";
  out << "\n";
  for (const auto& row : report.thresholds.rows) {
    out << row.rule.label() << " " << row.count << "/" << report.thresholds.total_cases << " avg "
        << (row.average ? fixed(*row.average) : std::string("n/a")) << "\n";
  }
  return kExitOk;
}

int cmd_predict(const RunConfig& cfg, const Options& opt, std::ostream& out) {
  auto model = load_checkpoint(checkpoint_path(cfg));
  const int n = model->input_size();
  RawImage raw = read_raw_image(opt.image);
  raw.source_id = opt.image.stem().string();

  CasePair input;
  input.source_id = raw.source_id;
  if (opt.preprocess_input) {
    PreprocessOptions options = cfg.preprocess_options();
    options.target_size = n;
    input = preprocess_image(raw, options);
  } else {
    input.image = normalize(raw);
    if (input.image.height() != n || input.image.width() != n) {
      if (!opt.resize) {
        throw InputError(opt.image.string() + " is " + std::to_string(raw.height()) + "x" +
                         std::to_string(raw.width()) + " but the model expects " + std::to_string(n) + "x" +
                         std::to_string(n) + "; pass --resize or --preprocess");
      }
      input.image = resize_bilinear(input.image, n, n);
    }
  }
  const FloatImage prob = predict_cases(*model, {input}, 1).front();
  const BinaryMask mask = binarize(prob, cfg.evaluate.threshold);

  const fs::path mask_path = cfg.paths.out_dir / (raw.source_id + "_pred.png");
  const fs::path overlay_path = cfg.paths.out_dir / (raw.source_id + "_overlay.png");
  write_mask_png(mask_path, mask);
  write_overlay_png(overlay_path, input.image, mask);
  out << "foreground " << foreground_count(mask) << " of " << mask.size() << " pixels\n";
  out << "mask " << mask_path.string() << "\n";
  out << "overlay " << overlay_path.string() << "\n";
  return kExitOk;
}

int cmd_inspect(const RunConfig& cfg, const Options& opt, std::ostream& out) {
  const auto model = build_model<float>(cfg.model.variant, cfg.model.input_size, cfg.model.seed, cfg.model_options());
  const auto blocks = model->blocks();
  char line[160];
  std::snprintf(line, sizeof(line), "%-22s %-16s %-16s %12s  %s\n", "block", "kind", "output", "params", "detail");
  out << line;
  for (const auto& b : blocks) {
    const int side = cfg.model.input_size >> b.resolution_level;
    const std::string shape = std::to_string(side) + "x" + std::to_string(side) + "x" + std::to_string(b.out_channels);
    std::string detail;
    if (b.kind == "respath") {
      detail = "length " + std::to_string(b.length) + ", filters " + std::to_string(b.filters);
    } else if (b.kind == "multires_block") {
      detail = "3x3 " + std::to_string(b.multires_filters[0]) + "/" + std::to_string(b.multires_filters[1]) + "/" +
               std::to_string(b.multires_filters[2]);
    } else if (b.kind == "aspp") {
      detail = "dilations";
      for (int d : b.dilations) detail += " " + std::to_string(d);
    }
    std::snprintf(line, sizeof(line), "%-22s %-16s %-16s %12s  %s\n", b.name.c_str(), b.kind.c_str(), shape.c_str(),
                  format_count(b.params).c_str(), detail.c_str());
    out << line;
  }
  const std::int64_t total = count_params(*model);
  out << "total " << format_count(total) << " parameters (" << fixed(total / 1e6, 2) << "M)\n";

  if (!opt.check_tables) return kExitOk;
  const ScheduleCensus census = schedule_census(cfg.model.variant, blocks);
  out << "census: " << census.respaths << " ResPaths, " << census.multires_blocks << " MultiRes blocks\n";
  for (const auto& m : census.mismatches) std::cerr << "table mismatch: " << m << "\n";
  if (!census.ok()) return kExitRuntime;
  out << "tables ok\n";
  return kExitOk;
}

RunConfig resolve(const Options& opt, const Overrides& overrides, const std::string& command) {
  RunConfig cfg;
  if (opt.config_file) cfg = load_run_config(*opt.config_file, cfg);
  for (const auto& [key, text] : overrides.values) set_config_value(cfg, key, text);
  if (opt.synthetic_cases) {
    if (command == "train" || command == "evaluate") {
      if (overrides.keys.count("model.input_size") && cfg.model.input_size != cfg.synthetic.size) {
        throw ConfigError("--input-size " + std::to_string(cfg.model.input_size) + " conflicts with synthetic --size " +
                          std::to_string(cfg.synthetic.size));
      }
      cfg.model.input_size = cfg.synthetic.size;
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out) {
  CLI::App app{"Breast-mass segmentation with connected U-Net variants", "massseg"};
  app.require_subcommand(1);
  app.fallthrough();

  Options opt;
  Overrides overrides;
  app.add_option("--config", opt.config_file, "YAML run configuration");
  bind(&app, overrides, "--seed", "model.seed", "Seed for weights, splits and shuffling");
  bind(&app, overrides, "--out-dir", "paths.out_dir", "Output directory");
  app.add_flag("-v,--verbose", opt.verbose, "More diagnostics (repeat for debug)");
  app.add_flag("-q,--quiet", opt.quiet, "Warnings and errors only");
  app.add_flag("--dump-config", opt.dump_config, "Print the resolved configuration and exit");

  auto model_flags = [&](CLI::App* sub) {
    bind(sub, overrides, "--variant", "model.variant", "Architecture");
    bind(sub, overrides, "--input-size", "model.input_size", "Model input side");
    bind(sub, overrides, "--layer-order", "model.layer_order", "Activation/normalization order");
    bind(sub, overrides, "--bridge", "model.bridge", "Bridge output form");
  };
  auto preprocess_flags = [&](CLI::App* sub) {
    bind(sub, overrides, "--profile", "preprocess.profile", "Preprocessing profile");
    bind(sub, overrides, "--crop-fraction", "preprocess.crop_fraction", "Border crop per edge");
    bind(sub, overrides, "--clahe-clip", "preprocess.clahe_clip_limit", "CLAHE clip limit");
    bind(sub, overrides, "--clahe-tiles", "preprocess.clahe_tiles", "CLAHE tiles per side");
    bind(sub, overrides, "--clahe-bins", "preprocess.clahe_bins", "CLAHE histogram bins");
  };
  auto synthetic_flags = [&](CLI::App* sub) {
    bind(sub, overrides, "--size", "synthetic.size", "Synthetic image side");
    bind(sub, overrides, "--blob-count-min", "synthetic.blob_count_min", "Fewest blobs per case");
    bind(sub, overrides, "--blob-count-max", "synthetic.blob_count_max", "Most blobs per case");
    bind(sub, overrides, "--blob-radius-min", "synthetic.blob_radius_min", "Smallest blob semi-axis");
    bind(sub, overrides, "--blob-radius-max", "synthetic.blob_radius_max", "Largest blob semi-axis");
    bind(sub, overrides, "--noise-std", "synthetic.noise_std", "Noise level");
    bind(sub, overrides, "--synthetic-seed", "synthetic.seed", "Generator seed");
  };
  auto synthetic_source = [&](CLI::App* sub) {
    sub->add_option_function<int>(
           "--synthetic",
           [&](int n) {
             opt.synthetic_cases = n;
             overrides.add("synthetic.cases", std::to_string(n));
           },
           "Use N generated cases instead of --data")
        ->excludes(sub->add_option_function<std::string>(
            "--data", [&](const std::string& v) { overrides.add("paths.data", v); },
            "Preprocessed dataset directory [paths.data]"));
    synthetic_flags(sub);
  };
  auto evaluate_flags = [&](CLI::App* sub) {
    bind(sub, overrides, "--threshold", "evaluate.threshold", "Probability cut for masks");
    bind(sub, overrides, "--checkpoint", "paths.checkpoint", "Checkpoint file");
  };

  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  bind(synth, overrides, "--cases", "synthetic.cases", "Number of cases");
  synthetic_flags(synth);
  synth->add_flag("--raw", opt.raw, "Write raw mammogram-like images for `preprocess`");
  synth->add_option("--raw-height", opt.raw_height, "Raw image height")->capture_default_str();
  synth->add_option("--raw-width", opt.raw_width, "Raw image width")->capture_default_str();

  CLI::App* preprocess = app.add_subcommand("preprocess", "Preprocess a raw dataset");
  preprocess->add_option_function<std::string>(
      "input", [&](const std::string& v) { overrides.add("paths.data", v); }, "Raw dataset directory [paths.data]");
  bind(preprocess, overrides, "--input-size", "model.input_size", "Output side");
  preprocess_flags(preprocess);

  CLI::App* train_cmd = app.add_subcommand("train", "Train a model");
  model_flags(train_cmd);
  synthetic_source(train_cmd);
  bind(train_cmd, overrides, "--lr", "train.learning_rate", "Initial learning rate");
  bind(train_cmd, overrides, "--batch-size", "train.batch_size", "Cases per step");
  bind(train_cmd, overrides, "--epochs", "train.epochs", "Maximum epochs");
  bind(train_cmd, overrides, "--val-fraction", "train.val_fraction", "Validation share");
  train_cmd->add_flag_callback("--no-validation", [&] { overrides.add("train.use_validation", "false"); },
                               "Train on every case [train.use_validation]");
  bind(train_cmd, overrides, "--early-stop-patience", "train.early_stop_patience", "Early-stopping patience");
  bind(train_cmd, overrides, "--lr-reduce-patience", "train.lr_reduce_patience", "Plateau patience");
  bind(train_cmd, overrides, "--lr-reduce-factor", "train.lr_reduce_factor", "Plateau decay factor");
  bind(train_cmd, overrides, "--min-lr", "train.min_lr", "Learning-rate floor");
  bind(train_cmd, overrides, "--stop-at-dice", "train.stop_at_dice", "Stop at this train Dice");
  evaluate_flags(train_cmd);

  CLI::App* evaluate_cmd = app.add_subcommand("evaluate", "Score a checkpoint on a dataset");
  synthetic_source(evaluate_cmd);
  evaluate_flags(evaluate_cmd);
  bind(evaluate_cmd, overrides, "--thresholds", "evaluate.thresholds", "Report rules, e.g. dice>=0.45,hd<=2.75");
  bind(evaluate_cmd, overrides, "--hausdorff-scale", "evaluate.hausdorff_scale", "Divisor for distances");
  evaluate_cmd->add_option("--split", opt.split, "auto (test if present, else all), all, fit, train, val, test")
      ->check(CLI::IsMember({"auto", "all", "fit", "train", "val", "test", "unsplit"}))
      ->capture_default_str();

  CLI::App* predict = app.add_subcommand("predict", "Segment one image");
  predict->add_option("image", opt.image, "Input image")->required();
  evaluate_flags(predict);
  predict->add_flag("--resize", opt.resize, "Resize the image to the model input");
  predict->add_flag("--preprocess", opt.preprocess_input, "Run the preprocessing profile first");
  preprocess_flags(predict);

  CLI::App* inspect = app.add_subcommand("inspect", "Print the block table of a model");
  model_flags(inspect);
  inspect->add_flag("--check-tables", opt.check_tables, "Verify the ResPath and MultiRes schedule");

  std::vector<std::string> argv_storage{"massseg"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_storage) argv.push_back(a.data());

  const log::Level saved_level = log::level();
  struct RestoreLevel {
    log::Level level;
    ~RestoreLevel() { log::set_level(level); }
  } restore{saved_level};

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, std::cerr);
    return code == 0 ? kExitOk : kExitUsage;
  }

  log::set_level(opt.quiet ? log::Level::kWarn : opt.verbose > 0 ? log::Level::kDebug : log::Level::kInfo);

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const RunConfig cfg = resolve(opt, overrides, command);
    if (opt.dump_config) {
      out << dump_run_config(cfg);
      return kExitOk;
    }
    if (command == "synth") return cmd_synth(cfg, opt, out);
    if (command == "preprocess") return cmd_preprocess(cfg, out);
    if (command == "train") return cmd_train(cfg, opt, out);
    if (command == "evaluate") return cmd_evaluate(cfg, opt, out);
    if (command == "predict") return cmd_predict(cfg, opt, out);
    return cmd_inspect(cfg, opt, out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace massseg::cli
