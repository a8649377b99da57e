// dtn: train, evaluate and run the detector from the command line.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
// numeric failure. DTN_VERBOSITY selects the log level (trace, debug, info,
// warn, error, off; default info). Logs go to stderr.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "dtn/atomic_file.hpp"
#include "dtn/checkpoint.hpp"
#include "dtn/config.hpp"
#include "dtn/errors.hpp"
#include "dtn/gradcheck.hpp"
#include "dtn/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("dtn");
  logger->set_pattern("[%H:%M:%S] [%^%l%$] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* v = std::getenv("DTN_VERBOSITY")) {
    const auto level = spdlog::level::from_str(v);
    // from_str maps unknown names to off; only honour exact "off".
    if (level != spdlog::level::off || std::string(v) == "off") spdlog::set_level(level);
  }
}

void apply_overrides(dtn::RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw dtn::ConfigError("--set expects section.key=value, got '" + kv + "'");
    dtn::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
}

std::string class_name(const dtn::RunConfig& cfg, std::size_t class_id) {
  if (cfg.data.source == dtn::DataSource::Synthetic && class_id < dtn::synthetic_class_names().size())
    return dtn::synthetic_class_names()[class_id];
  return "class_" + std::to_string(class_id);
}

void emit(const std::optional<fs::path>& path, const std::string& text) {
  if (path) {
    dtn::write_file_atomic(*path, text);
  } else {
    std::cout << text << std::flush;
  }
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> phase1, phase2, seed, stop_after;
  std::vector<std::string> sets;
  std::optional<std::string> out, resume;
};

int cmd_train(const TrainArgs& a) {
  auto cfg = dtn::load_run_config(a.config);
  apply_overrides(cfg, a.sets);
  if (a.phase1) dtn::apply_override(cfg, "train.phase1_iters", std::to_string(*a.phase1));
  if (a.phase2) dtn::apply_override(cfg, "train.phase2_iters", std::to_string(*a.phase2));
  if (a.seed) dtn::apply_override(cfg, "train.seed", std::to_string(*a.seed));
  if (a.out) cfg.output.dir = *a.out;
  cfg.validate();

  const auto data = dtn::load_dataset(cfg.data);
  spdlog::info("training on {} images, {} + {} iterations, output {}", data.samples.size(), cfg.train.phase1_iters,
               cfg.train.phase2_iters, cfg.output.dir);
  dtn::TrainRunOptions opts;
  opts.out_dir = cfg.output.dir;
  if (a.resume) opts.resume = fs::path(*a.resume);
  opts.stop_after = a.stop_after;
  const std::uint64_t total = cfg.train.total_iters();
  opts.on_step = [total](const dtn::LossRecord& r) {
    const auto level = (r.iteration % 50 == 0 || r.iteration == total) ? spdlog::level::info : spdlog::level::debug;
    spdlog::log(level, "iter {:>5}/{} phase {} loss {:.5f} (cls {:.5f}, reg {:.5f})", r.iteration, total, r.phase,
                r.loss, r.classification, r.regression);
  };
  const auto result = dtn::run_training(cfg, data, opts);
  spdlog::info("{} checkpoint {}", result.completed ? "final" : "stopped at", result.final_checkpoint.string());
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::vector<std::string> sets;
  std::optional<std::string> out, pr_curve, annotated_dir;
};

int cmd_eval(const EvalArgs& a) {
  const auto ckpt = dtn::load_checkpoint(a.checkpoint);
  auto cfg = ckpt.config();
  apply_overrides(cfg, a.sets);
  const auto model = dtn::model_from_checkpoint(ckpt);
  const auto data = dtn::load_dataset(cfg.data);
  spdlog::info("evaluating {} on {} images", a.checkpoint, data.samples.size());
  const auto dets = dtn::detect_dataset(model, data);
  const auto result = dtn::evaluate(dets, data);
  emit(a.out ? std::optional<fs::path>(*a.out) : std::nullopt, result.to_json_string());
  if (a.pr_curve) dtn::write_file_atomic(*a.pr_curve, dtn::pr_curve_svg(dets, data));
  if (a.annotated_dir) {
    for (const auto& s : data.samples) {
      const fs::path path = fs::path(*a.annotated_dir) / (fs::path(s.source_id).stem().string() + ".png");
      fs::create_directories(path.parent_path());
      const fs::path tmp = path.string() + ".tmp";
      dtn::write_png(tmp, dtn::annotate(s.image, s.annotations, dets.at(s.image_id)));
      fs::rename(tmp, path);
    }
  }
  return kExitOk;
}

struct DetectArgs {
  std::string checkpoint, image;
  double score_threshold = 0.5;
  std::optional<std::string> out, annotated;
};

int cmd_detect(const DetectArgs& a) {
  const auto ckpt = dtn::load_checkpoint(a.checkpoint);
  const auto cfg = ckpt.config();
  const auto model = dtn::model_from_checkpoint(ckpt);
  const auto image = dtn::read_image(a.image);
  const auto dets = dtn::detect_image(model, image, cfg.data.resize_target, a.score_threshold);
  std::string lines;
  for (const auto& d : dets) {
    nlohmann::json j;
    j["box"] = {d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max};
    j["class_id"] = d.class_id;
    j["class_name"] = class_name(cfg, d.class_id);
    j["score"] = d.score;
    lines += j.dump() + "\n";
  }
  emit(a.out ? std::optional<fs::path>(*a.out) : std::nullopt, lines);
  if (a.annotated) {
    const fs::path path(*a.annotated);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    dtn::write_png(tmp, dtn::annotate(image, {}, dets));
    fs::rename(tmp, path);
  }
  spdlog::info("{} detections above {}", dets.size(), a.score_threshold);
  return kExitOk;
}

struct GenArgs {
  std::size_t count = 32, size = 96;
  std::uint64_t seed = 7;
  std::string out;
};

int cmd_gen_data(const GenArgs& a) {
  if (a.count == 0) throw dtn::ConfigError("gen-data: --count must be at least 1");
  const auto data = dtn::generate_synthetic(a.count, a.size, a.seed);
  const fs::path out(a.out);
  dtn::save_coco_dataset(data, out / "annotations.json", out / "images");
  spdlog::info("wrote {} images to {}", data.samples.size(), out.string());
  return kExitOk;
}

struct GradArgs {
  std::size_t instances = 20;
  std::uint64_t seed = 1234;
  std::vector<std::string> only;
};

int cmd_gradcheck(const GradArgs& a) {
  dtn::GradcheckOptions opts;
  opts.instances = a.instances;
  opts.seed = a.seed;
  const auto names = a.only.empty() ? dtn::gradcheck_names() : a.only;
  bool ok = true;
  for (const auto& name : names) {
    const auto r = dtn::run_gradcheck(name, opts);
    ok = ok && r.passed();
    std::cout << fmt::format("{:<22} instances {:>3}  entries {:>5}  max_rel_err {:.3e}  tol {:.0e}  {}\n", r.name,
                             r.instances, r.entries, r.max_error, r.tolerance, r.passed() ? "PASS" : "FAIL");
  }
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Overlapping-patch transformer detector: training, evaluation and inference"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Two-phase training with checkpoints and a loss CSV");
  t->add_option("--config", train.config, "YAML run configuration")->required()->check(CLI::ExistingFile);
  t->add_option("--iters-phase1", train.phase1, "Override train.phase1_iters");
  t->add_option("--iters-phase2", train.phase2, "Override train.phase2_iters");
  t->add_option("--seed", train.seed, "Override train.seed");
  t->add_option("--set", train.sets, "Override any field, section.key=value (repeatable)");
  t->add_option("--out", train.out, "Override output.dir");
  t->add_option("--resume", train.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  t->add_option("--stop-after", train.stop_after, "Checkpoint and stop at this iteration");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "COCO-style evaluation of a checkpoint");
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--set", eval.sets, "Override the checkpoint's data section, e.g. data.synthetic_seed=9");
  e->add_option("--out", eval.out, "EvalResult JSON path (default stdout)");
  e->add_option("--pr-curve", eval.pr_curve, "Write a precision/recall SVG");
  e->add_option("--annotated-dir", eval.annotated_dir, "Write annotated PNGs here");

  DetectArgs detect;
  auto* d = app.add_subcommand("detect", "Detect objects in one image");
  d->add_option("--checkpoint", detect.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  d->add_option("--image", detect.image, "PNG or binary PPM image")->required()->check(CLI::ExistingFile);
  d->add_option("--score-threshold", detect.score_threshold, "Keep scores strictly above this")
      ->capture_default_str();
  d->add_option("--out", detect.out, "JSON-lines path (default stdout)");
  d->add_option("--annotated", detect.annotated, "Write the annotated image (PNG)");

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Write a synthetic shapes dataset in COCO format");
  g->add_option("--count", gen.count, "Number of images")->capture_default_str();
  g->add_option("--size", gen.size, "Image side length")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  g->add_option("--out", gen.out, "Output directory")->required();

  GradArgs grad;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--instances", grad.instances, "Random instances per check")->capture_default_str();
  gc->add_option("--seed", grad.seed, "Seed")->capture_default_str();
  gc->add_option("--only", grad.only, "Run only these checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*d) return cmd_detect(detect);
    if (*g) return cmd_gen_data(gen);
    if (*gc) return cmd_gradcheck(grad);
  } catch (const dtn::ConfigError& err) {
    spdlog::error("{}", err.what());
    return kExitUsage;
  } catch (const std::exception& err) {
    spdlog::error("{}", err.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
