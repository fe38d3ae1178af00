#include "doctest.h"

#include <fstream>
#include <iostream>
#include <sstream>

#include "cli.hpp"
#include "json.hpp"
#include "massseg/data_io.hpp"
#include "massseg/errors.hpp"
#include "massseg/metrics.hpp"
#include "run_config.hpp"
#include "scratch_dir.hpp"

using namespace massseg;
using massseg::cli::RunConfig;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

class StderrCapture {
 public:
  explicit StderrCapture(std::ostream& sink) : saved_(std::cerr.rdbuf(sink.rdbuf())) {}
  ~StderrCapture() { std::cerr.rdbuf(saved_); }
  StderrCapture(const StderrCapture&) = delete;
  StderrCapture& operator=(const StderrCapture&) = delete;

 private:
  std::streambuf* saved_;
};

CliResult run(std::vector<std::string> args) {
  std::ostringstream out, err;
  CliResult r;
  {
    StderrCapture capture(err);
    r.code = cli::run_cli(args, out);
  }
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

int count_containing(const std::string& text, const std::string& needle) {
  int n = 0;
  for (const auto& l : lines(text)) n += l.find(needle) != std::string::npos;
  return n;
}

/// Untrained unet checkpoint for the predict and evaluate paths.
std::filesystem::path fresh_checkpoint(const std::filesystem::path& dir, int size) {
  const auto path = dir / "fresh.ckpt";
  save_checkpoint(*build_model<float>(ModelVariant::kUnet, size, 3), path);
  return path;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("default config survives dump and reload") {
    const RunConfig defaults;
    CHECK(cli::parse_run_config(cli::dump_run_config(defaults)) == defaults);
    CHECK(cli::parse_run_config("") == defaults);
  }

  TEST_CASE("edited config survives dump and reload") {
    RunConfig c;
    c.model.variant = ModelVariant::kConnectedResUnets;
    c.model.input_size = 96;
    c.model.seed = 18446744073709551615ull;
    c.model.bridge = BridgeMode::kConvWithInput;
    c.model.layer_order = LayerOrder::kNormThenActivation;
    c.preprocess.profile = Profile::kInbreast;
    c.preprocess.crop_fraction = 0.1 + 0.2;
    c.train.learning_rate = 3.0e-5;
    c.train.use_validation = false;
    c.train.stop_at_dice = 0.95;
    c.evaluate.thresholds = parse_threshold_rules("dice>=0.45,iou>=0.35,hd<=2.75");
    c.evaluate.hausdorff_scale = 1.0 / 3.0;
    c.paths.data = "/data/with space/x";
    c.paths.checkpoint = "";
    c.synthetic.noise_std = 0.123456789012345;
    const std::string text = cli::dump_run_config(c);
    const RunConfig back = cli::parse_run_config(text);
    CHECK(back == c);
    CHECK(cli::dump_run_config(back) == text);
  }

  TEST_CASE("every registered key appears in the dump") {
    const std::string text = cli::dump_run_config({});
    for (const auto& k : cli::config_keys()) {
      INFO(k.section << "." << k.key);
      CHECK(text.find(k.key + ":") != std::string::npos);
      CHECK_FALSE(k.description.empty());
    }
  }

  TEST_CASE("config parse rejects unknown and malformed entries") {
    CHECK_THROWS_AS(cli::parse_run_config("model:\n  varient: unet\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("modle:\n  variant: unet\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("train:\n  epochs: [1, 2]\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("train:\n  epochs: ten\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("train:\n  epochs: 10.5\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("train:\n  use_validation: maybe\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("model:\n  variant: resnet\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("evaluate:\n  thresholds: dice>>1\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("- a\n- b\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("model: {variant: unet"), ConfigError);
    try {
      cli::parse_run_config("train:\n  epochs: ten\n");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("train.epochs") != std::string::npos);
    }
  }

  TEST_CASE("partial config keeps the remaining defaults") {
    const RunConfig c = cli::parse_run_config("train:\n  epochs: 12\n");
    RunConfig want;
    want.train.epochs = 12;
    CHECK(c == want);
  }

  TEST_CASE("config validation") {
    RunConfig c;
    CHECK_NOTHROW(c.validate());
    c.model.input_size = 100;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.preprocess.crop_fraction = 0.3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.train.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.evaluate.hausdorff_scale = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.train.stop_at_dice = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("flags override the file, the file overrides defaults") {
    testing::ScratchDir dir("cli_cfg");
    const auto file = dir.path() / "run.yaml";
    std::ofstream(file) << "train:\n  epochs: 5\n  batch_size: 3\nmodel:\n  variant: unet\n";
    const auto r = run({"--config", file.string(), "train", "--epochs", "7", "--dump-config"});
    REQUIRE(r.code == cli::kExitOk);
    const RunConfig c = cli::parse_run_config(r.out);
    CHECK(c.train.epochs == 7);
    CHECK(c.train.batch_size == 3);
    CHECK(c.model.variant == ModelVariant::kUnet);
    CHECK(c.train.learning_rate == RunConfig{}.train.learning_rate);

    const auto global_after = run({"--config", file.string(), "train", "--seed", "9", "--dump-config"});
    REQUIRE(global_after.code == cli::kExitOk);
    CHECK(cli::parse_run_config(global_after.out).model.seed == 9);
  }

  TEST_CASE("usage errors exit 2") {
    CHECK(run({}).code == cli::kExitUsage);
    CHECK(run({"frobnicate"}).code == cli::kExitUsage);
    CHECK(run({"inspect", "--variant", "resnet50"}).code == cli::kExitUsage);
    CHECK(run({"inspect", "--input-size", "abc"}).code == cli::kExitUsage);
    CHECK(run({"--config", "/nonexistent/run.yaml", "inspect"}).code == cli::kExitUsage);
    CHECK(run({"inspect", "--help"}).code == cli::kExitOk);

    const auto bad_size = run({"train", "--synthetic", "4", "--size", "40", "--epochs", "1"});
    CHECK(bad_size.code == cli::kExitUsage);
    CHECK(bad_size.err.find("multiple of 16") != std::string::npos);
    const auto conflict = run({"train", "--synthetic", "4", "--size", "32", "--input-size", "64"});
    CHECK(conflict.code == cli::kExitUsage);
    CHECK(conflict.err.find("conflicts") != std::string::npos);
  }

  TEST_CASE("inspect prints the block table and parameter total") {
    const auto pp = run({"inspect", "--variant", "connected_unets_plusplus", "--input-size", "224", "--check-tables"});
    REQUIRE(pp.code == cli::kExitOk);
    CHECK(count_containing(pp.out, " respath ") == 11);
    CHECK(count_containing(pp.out, "multires_block") == 16);
    CHECK(pp.out.find("tables ok") != std::string::npos);
    for (const char* row : {"respath01", "respath04", "respath08", "respath11"}) {
      CHECK(pp.out.find(row) != std::string::npos);
    }
    CHECK(pp.out.find("length 4, filters 32") != std::string::npos);
    CHECK(pp.out.find("length 1, filters 256") != std::string::npos);

    const auto unet = run({"inspect", "--variant", "unet", "--input-size", "224", "--check-tables"});
    REQUIRE(unet.code == cli::kExitOk);
    CHECK(count_containing(unet.out, " respath ") == 0);
    CHECK(unet.out.find("total 7,") != std::string::npos);
  }

  TEST_CASE("synthetic raw dataset through preprocess") {
    testing::ScratchDir dir("cli_pre");
    const auto raw = dir.path() / "raw";
    REQUIRE(run({"synth", "--raw", "--cases", "3", "--out-dir", raw.string(), "--raw-height", "96", "--raw-width",
                 "80", "--blob-radius-max", "8"})
                .code == cli::kExitOk);

    const auto cbis = dir.path() / "cbis";
    const auto r = run({"preprocess", raw.string(), "--out-dir", cbis.string(), "--input-size", "64"});
    REQUIRE(r.code == cli::kExitOk);
    CHECK(r.out.find("preprocessed 3 cases") != std::string::npos);
    const auto stored = read_preprocessed(cbis);
    REQUIRE(stored.size() == 3);
    for (const auto& s : stored) {
      CHECK(s.pair.image.height() == 64);
      CHECK(s.pair.mask.same_dims(s.pair.image));
      CHECK(s.pair.applied_steps.front().name == "crop_borders");
    }

    const auto inb = dir.path() / "inbreast";
    REQUIRE(run({"preprocess", raw.string(), "--out-dir", inb.string(), "--input-size", "64", "--profile",
                 "inbreast"})
                .code == cli::kExitOk);
    for (const auto& line : lines(read_file(inb / "manifest.jsonl"))) {
      const auto j = nlohmann::json::parse(line);
      std::vector<std::string> names;
      for (const auto& s : j.at("applied_steps")) names.push_back(s.at("name"));
      CHECK(std::find(names.begin(), names.end(), "apply_clahe") != names.end());
      CHECK(std::find(names.begin(), names.end(), "crop_borders") == names.end());
      CHECK(std::find(names.begin(), names.end(), "remove_artifacts") == names.end());
    }
  }

  TEST_CASE("preprocess of an empty directory exits 2") {
    testing::ScratchDir dir("cli_empty");
    const auto r = run({"preprocess", dir.path().string(), "--out-dir", (dir.path() / "out").string()});
    CHECK(r.code == cli::kExitUsage);
    CHECK(r.err.find("no valid cases") != std::string::npos);
  }

  TEST_CASE("train then evaluate on synthetic data") {
    testing::ScratchDir dir("cli_train");
    const auto out = dir.path() / "run";
    const auto t = run({"train", "--synthetic", "6", "--size", "32", "--blob-radius-max", "6", "--variant", "unet", "--epochs", "2",
                        "--batch-size", "2", "--lr", "1e-3", "--min-lr", "1e-4", "--out-dir", out.string()});
    REQUIRE_MESSAGE(t.code == cli::kExitOk, t.err);
    for (const char* f : {"checkpoint.ckpt", "epochs.csv", "history.json", "config.yaml", "split.json"}) {
      CHECK_MESSAGE(std::filesystem::exists(out / f), f);
    }
    CHECK(lines(read_file(out / "epochs.csv")).size() == 3);
    CHECK(t.err.find("parameters") != std::string::npos);
    const RunConfig saved = cli::load_run_config(out / "config.yaml");
    CHECK(saved.model.input_size == 32);
    CHECK(saved.train.epochs == 2);

    const auto eval_dir = dir.path() / "eval";
    const auto e = run({"evaluate", "--synthetic", "6", "--size", "32", "--blob-radius-max", "6", "--checkpoint", (out / "checkpoint.ckpt").string(),
                        "--out-dir", eval_dir.string(), "--thresholds", "dice>=0.45,iou>=0.35,hausdorff<=2.75"});
    REQUIRE_MESSAGE(e.code == cli::kExitOk, e.err);
    CHECK(lines(read_file(eval_dir / "scores.csv")).size() == 7);
    const auto summary = nlohmann::json::parse(read_file(eval_dir / "summary.json"));
    CHECK(summary.at("cases") == 6);
    const auto& rows = summary.at("thresholds").at("rows");
    REQUIRE(rows.size() == 3);
    CHECK(e.out.find("mean dice") != std::string::npos);
  }

  TEST_CASE("evaluate errors") {
    testing::ScratchDir dir("cli_eval");
    CHECK(run({"evaluate", "--synthetic", "4", "--size", "32", "--checkpoint", (dir.path() / "none.ckpt").string()})
              .code == cli::kExitUsage);
    const auto ckpt = fresh_checkpoint(dir.path(), 64);
    const auto wrong = run({"evaluate", "--synthetic", "4", "--size", "32", "--checkpoint", ckpt.string(), "--out-dir",
                            dir.path().string()});
    CHECK(wrong.code == cli::kExitUsage);
    CHECK(run({"evaluate", "--checkpoint", ckpt.string()}).code == cli::kExitUsage);
  }

  TEST_CASE("predict writes a binary mask and an overlay") {
    testing::ScratchDir dir("cli_predict");
    const auto ckpt = fresh_checkpoint(dir.path(), 32);
    const auto cases = generate_synthetic({.n_cases = 1, .size = 32, .blob_radius_min = 3, .blob_radius_max = 6});
    const auto image = dir.path() / "case.png";
    write_image_png(image, cases[0].image);

    const auto at05 = dir.path() / "t05";
    REQUIRE(run({"predict", image.string(), "--checkpoint", ckpt.string(), "--out-dir", at05.string()}).code ==
            cli::kExitOk);
    const BinaryMask m05 = read_mask(at05 / "case_pred.png");
    CHECK(m05.height() == 32);
    CHECK(m05.width() == 32);
    CHECK(std::filesystem::exists(at05 / "case_overlay.png"));

    const auto at03 = dir.path() / "t03";
    REQUIRE(run({"predict", image.string(), "--checkpoint", ckpt.string(), "--out-dir", at03.string(), "--threshold",
                 "0.3"})
                .code == cli::kExitOk);
    const BinaryMask m03 = read_mask(at03 / "case_pred.png");
    for (std::size_t i = 0; i < m05.size(); ++i) CHECK(m03.data()[i] >= m05.data()[i]);

    const auto big = dir.path() / "big.png";
    write_image_png(big, resize_bilinear(cases[0].image, 48, 40));
    const auto no_resize = run({"predict", big.string(), "--checkpoint", ckpt.string(), "--out-dir", at05.string()});
    CHECK(no_resize.code == cli::kExitUsage);
    CHECK(no_resize.err.find("--resize") != std::string::npos);
    REQUIRE(run({"predict", big.string(), "--checkpoint", ckpt.string(), "--out-dir", at05.string(), "--resize"})
                .code == cli::kExitOk);
    CHECK(read_mask(at05 / "big_pred.png").height() == 32);
  }
}
