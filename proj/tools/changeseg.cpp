#include <pthread.h>

#include <algorithm>
#include <csignal>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "changeseg/checkpoint.hpp"
#include "changeseg/error.hpp"
#include "changeseg/io_util.hpp"
#include "changeseg/labelex.hpp"
#include "changeseg/mask.hpp"
#include "changeseg/metrics.hpp"
#include "changeseg/patching.hpp"
#include "changeseg/pipeline.hpp"
#include "changeseg/png.hpp"
#include "changeseg/raster.hpp"
#include "changeseg/service.hpp"
#include "changeseg/synthdata.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace changeseg;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// Raised for missing or contradictory options after config merging.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Files a subcommand writes. Unless commit() is reached, every file that was
// created is removed again so a failed run leaves nothing half-finished.
class OutputGuard {
 public:
  ~OutputGuard() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& p : paths_) fs::remove(p, ec);
    for (auto it = dirs_.rbegin(); it != dirs_.rend(); ++it) fs::remove(*it, ec);  // only if empty
  }
  void file(const fs::path& p) { paths_.push_back(p); }
  void raster(const fs::path& header) {
    fs::path payload = header;
    payload.replace_extension(".bin");
    file(header);
    file(payload);
  }
  // Creates `dir` (and parents); directories that did not exist before are
  // removed on failure if they end up empty.
  void directory(const fs::path& dir) {
    std::vector<fs::path> created;
    for (fs::path p = dir; !p.empty() && !fs::exists(p); p = p.parent_path()) {
      created.push_back(p);
      if (p == p.parent_path()) break;
    }
    fs::create_directories(dir);
    dirs_.insert(dirs_.end(), created.rbegin(), created.rend());
  }
  void commit() { committed_ = true; }

 private:
  std::vector<fs::path> paths_;
  std::vector<fs::path> dirs_;
  bool committed_ = false;
};

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

// Fills options not given on the command line from a JSON object whose keys
// are option names ("out-mask" or "out_mask"). Unknown keys are rejected.
void merge_config_file(CLI::App& sub, const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError("config " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw FormatError("config " + path + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    CLI::Option* opt = name == "config" ? nullptr : sub.get_option_no_throw("--" + name);
    if (opt == nullptr) throw UsageError("unknown key '" + key + "' in config " + path);
    if (opt->count() > 0) continue;  // the command line wins
    opt->add_result(value.is_string() ? value.get<std::string>() : value.dump());
    opt->run_callback();
  }
}

void require(const CLI::Option* opt) {
  if (opt->count() == 0) throw UsageError(opt->get_name() + " is required");
}

SeedSet load_seeds(const fs::path& path, int width, int height) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError("seeds file " + path.string() + " is not valid GeoJSON: " + e.what());
  }
  const auto polygons = parse_geojson_polygons(doc);
  return rasterize_polygons(polygons, width, height);
}

// One unit square centred on each seed pixel; rasterizing it gives back the set.
json seeds_to_geojson(const SeedSet& seeds) {
  std::vector<Polygon> polygons;
  polygons.reserve(seeds.size());
  for (const auto& c : seeds.coords) {
    const double x = c.col - 0.5;
    const double y = c.row - 0.5;
    polygons.push_back({Ring{{x, y}, {x + 1, y}, {x + 1, y + 1}, {x, y + 1}}});
  }
  return polygons_to_geojson(polygons);
}

// A number strictly between 0 and 1.
const CLI::Validator kOpenUnitInterval(
    [](std::string& s) -> std::string {
      try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size() && v > 0.0 && v < 1.0) return {};
      } catch (const std::exception&) {
      }
      return "must be a number in (0, 1), got " + s;
    },
    "(0,1)");

// ------------------------------------------------------------ subcommands

struct StackArgs {
  std::string pre, post, out, resample = "bilinear";
};

void run_stack(const StackArgs& a) {
  const BandRaster pre = load_raster(a.pre);
  const BandRaster post = load_raster(a.post);
  for (const auto* r : {&pre, &post}) {
    if (r->bands != StackedInput::kHalfBands) {
      const std::string& path = r == &pre ? a.pre : a.post;
      throw ShapeError(path + " has " + std::to_string(r->bands) + " bands, expected 4");
    }
  }
  const StackedInput x = pipeline::stack_scene(pre, post, parse_resample_method(a.resample));
  OutputGuard out;
  out.raster(a.out);
  save_raster(x.raster(), a.out);
  out.commit();
}

struct ExpandArgs {
  std::string stack, seeds, out_mask, out_stats;
  double alpha = 0.95;
  int pc = 2;
};

void run_expand(const ExpandArgs& a) {
  const StackedInput x(load_raster(a.stack));
  const SeedSet seeds = load_seeds(a.seeds, x.width(), x.height());
  if (seeds.empty()) throw InvalidArgument("seed polygons in " + a.seeds + " cover no pixel centers");
  const ExpansionResult r = pipeline::expand(pipeline::expansion_features(x), seeds, a.alpha, a.pc);
  json stats = to_json(r.stats);
  if (r.stats.expanded_count == r.stats.total_pixels) {
    const std::string msg = "every pixel was labeled; the seed statistics are degenerate";
    std::cerr << "[expand] warning: " << msg << "\n";
    stats["warnings"] = json::array({msg});
  }
  OutputGuard out;
  out.raster(a.out_mask);
  out.file(a.out_stats);
  save_mask(r.mask, a.out_mask);
  write_json(a.out_stats, stats);
  out.commit();
}

struct PatchesArgs {
  std::string input, out_dir, pad = "reflect";
  int size = 32;
};

void run_patches(const PatchesArgs& a) {
  const BandRaster r = load_raster(a.input);
  const PatchSet set = extract_patches(r, a.size, a.size, parse_pad_mode(a.pad));
  if (set.fell_back_to_zero) std::cerr << "[patches] warning: raster too small to reflect, zero padding used\n";
  OutputGuard out;
  out.directory(a.out_dir);
  json index = json::array();
  for (int row = 0; row < set.grid.rows; ++row) {
    for (int col = 0; col < set.grid.cols; ++col) {
      const std::string name = "patch_" + std::to_string(row) + "_" + std::to_string(col) + ".json";
      const fs::path header = fs::path(a.out_dir) / name;
      out.raster(header);
      save_raster(set.patches[static_cast<std::size_t>(row) * set.grid.cols + col], header);
      index.push_back({{"row", row}, {"col", col}, {"header", name}});
    }
  }
  const fs::path grid = fs::path(a.out_dir) / "grid.json";
  out.file(grid);
  json g = to_json(set.grid);
  g["patches"] = std::move(index);
  write_json(grid, g);
  out.commit();
}

struct TrainArgs {
  std::string config;
  std::optional<std::string> output_dir, loss;
  std::optional<int> epochs, batch_size, checkpoint_every, patience;
  std::optional<double> lr, val_fraction;
  std::optional<std::uint64_t> seed;
};

void run_train(const TrainArgs& a) {
  const fs::path config_path(a.config);
  json j;
  try {
    j = json::parse(read_file(config_path));
  } catch (const json::parse_error& e) {
    throw FormatError("config " + a.config + " is not valid JSON: " + e.what());
  }
  auto cfg = pipeline::PipelineConfig::from_json(j, config_path.parent_path());
  if (a.output_dir) cfg.output_dir = *a.output_dir;
  if (cfg.output_dir.empty()) cfg.output_dir = config_path.parent_path() / "run";
  if (a.loss) cfg.train.loss = parse_loss_kind(*a.loss);
  if (a.epochs) cfg.train.max_epochs = *a.epochs;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  if (a.checkpoint_every) cfg.train.checkpoint_every = *a.checkpoint_every;
  if (a.patience) cfg.train.plateau_patience = *a.patience;
  if (a.lr) cfg.train.learning_rate = *a.lr;
  if (a.val_fraction) cfg.train.val_fraction = *a.val_fraction;
  if (a.seed) cfg.train.rng_seed = *a.seed;
  for (const auto& p : {cfg.stack, cfg.labels}) {
    if (!fs::exists(p)) throw FormatError("config references missing file " + p.string());
  }

  OutputGuard out;
  out.directory(cfg.output_dir);
  out.raster(cfg.output_dir / "model.json");
  out.file(cfg.output_dir / "history.jsonl");
  if (cfg.train.checkpoint_every > 0) {
    out.directory(cfg.output_dir / "checkpoints");
    out.raster(cfg.output_dir / "checkpoints" / "checkpoint.json");
  }
  const auto result = pipeline::run_training(cfg);
  const auto& h = result.history;
  std::cout << "epochs " << h.epochs.size();
  if (!h.epochs.empty()) std::cout << ", final val_loss " << h.epochs.back().val_loss;
  if (h.stage_switch_epoch) std::cout << ", stage switch at epoch " << *h.stage_switch_epoch;
  std::cout << "\n";
  out.commit();
}

struct InferArgs {
  std::string checkpoint, stack, out_prefix;
};

void run_infer(const InferArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const StackedInput x(load_raster(a.stack));
  const BandRaster prob = pipeline::infer_scene(ckpt, x);
  const fs::path prob_path = a.out_prefix + "_prob.json";
  const fs::path mask_path = a.out_prefix + "_mask.json";
  OutputGuard out;
  out.raster(prob_path);
  out.raster(mask_path);
  save_raster(prob, prob_path);
  save_mask(threshold_mask(prob, kBinarizeThreshold), mask_path);
  out.commit();
}

struct EvalArgs {
  std::string pred, ref, out;
};

void run_eval(const EvalArgs& a) {
  const MetricsReport report = compute_metrics(confusion(load_mask(a.pred), load_mask(a.ref)));
  const json j = to_json(report);
  OutputGuard out;
  if (!a.out.empty()) {
    out.file(a.out);
    write_json(a.out, j);
  }
  std::cout << j.dump(2) << "\n";
  out.commit();
}

struct DiffArgs {
  std::string pred, ref, out;
};

void run_diff(const DiffArgs& a) {
  const BandRaster map = difference_map(load_mask(a.pred), load_mask(a.ref));
  OutputGuard out;
  out.file(a.out);
  write_png(rgb8_from_raster(map), a.out);
  out.commit();
}

struct SynthArgs {
  std::string spec, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> width, height, regions;
  std::optional<double> seed_fraction;
  std::uint64_t seed_rng = 0;
};

void run_synth(const SynthArgs& a) {
  SceneSpec spec;
  if (!a.spec.empty()) {
    try {
      spec = scene_spec_from_json(json::parse(read_file(a.spec)));
    } catch (const json::parse_error& e) {
      throw FormatError("scene spec " + a.spec + " is not valid JSON: " + e.what());
    }
  }
  if (a.seed) spec.rng_seed = *a.seed;
  if (a.width) spec.width = *a.width;
  if (a.height) spec.height = *a.height;
  if (a.regions) spec.n_regions = *a.regions;
  const SyntheticScene scene = generate_scene(spec);

  const fs::path dir(a.out_dir);
  OutputGuard out;
  out.directory(dir);
  out.raster(dir / "pre.json");
  out.raster(dir / "post.json");
  out.raster(dir / "truth.json");
  out.file(dir / "spec.json");
  save_raster(scene.pre, dir / "pre.json");
  save_raster(scene.post, dir / "post.json");
  save_mask(scene.truth, dir / "truth.json");
  write_json(dir / "spec.json", to_json(spec));
  if (a.seed_fraction) {
    const SeedSet seeds = sample_seeds(scene.truth, *a.seed_fraction, a.seed_rng);
    out.file(dir / "seeds.geojson");
    write_json(dir / "seeds.geojson", seeds_to_geojson(seeds));
  }
  out.commit();
}

struct ServeArgs {
  std::string host = "127.0.0.1", data_dir = ".";
  int port = 8787;
  std::size_t max_pixels = ServiceOptions{}.max_pixels;
};

void run_serve(const ServeArgs& a) {
  if (!fs::is_directory(a.data_dir)) throw InvalidArgument("data directory " + a.data_dir + " does not exist");
  ServiceOptions opts;
  opts.host = a.host;
  opts.port = a.port;
  opts.data_dir = a.data_dir;
  opts.max_pixels = a.max_pixels;

  // Block the shutdown signals before the server thread starts so only
  // sigwait below sees them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  AnnotationService service(opts);
  const int port = service.start();
  std::cout << "listening on http://" << a.host << ":" << port << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  service.stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly-supervised change segmentation: stack, expand seeds, train, infer, evaluate."};
  app.require_subcommand(1);
  app.set_version_flag("--version", "changeseg 0.1.0");
  // Maps each subcommand to its stage tag and runner.
  std::vector<std::pair<CLI::App*, std::function<void()>>> runners;
  std::vector<std::pair<CLI::App*, std::string>> configs;
  auto add_config = [&](CLI::App* sub) {
    configs.emplace_back(sub, std::string());
    sub->add_option("--config", configs.back().second, "JSON file supplying defaults for the other options");
  };
  configs.reserve(16);

  StackArgs stack_args;
  auto* stack_cmd = app.add_subcommand("stack", "Stack pre/post 4-band rasters into one 8-band raster");
  auto* stack_pre = stack_cmd->add_option("--pre", stack_args.pre, "Pre-event raster header");
  auto* stack_post = stack_cmd->add_option("--post", stack_args.post, "Post-event raster header");
  auto* stack_out = stack_cmd->add_option("--out", stack_args.out, "Output raster header");
  stack_cmd->add_option("--resample", stack_args.resample, "Kernel used when post's grid differs from pre's")
      ->check(CLI::IsMember({"nearest", "bilinear"}))
      ->capture_default_str();
  add_config(stack_cmd);
  runners.emplace_back(stack_cmd, [&] {
    for (auto* o : {stack_pre, stack_post, stack_out}) require(o);
    run_stack(stack_args);
  });

  ExpandArgs expand_args;
  auto* expand_cmd = app.add_subcommand("expand", "Expand seed polygons into a dense label mask");
  auto* expand_stack = expand_cmd->add_option("--stack", expand_args.stack, "8-band stacked raster header");
  auto* expand_seeds = expand_cmd->add_option("--seeds", expand_args.seeds, "Seed polygons (GeoJSON, pixel units)");
  expand_cmd->add_option("--alpha", expand_args.alpha, "Confidence level")
      ->check(kOpenUnitInterval)
      ->capture_default_str();
  expand_cmd->add_option("--pc", expand_args.pc, "Number of principal components")
      ->check(CLI::Range(1, StackedInput::kBands))
      ->capture_default_str();
  auto* expand_mask = expand_cmd->add_option("--out-mask", expand_args.out_mask, "Output mask header");
  auto* expand_stats = expand_cmd->add_option("--out-stats", expand_args.out_stats, "Output statistics JSON");
  add_config(expand_cmd);
  runners.emplace_back(expand_cmd, [&] {
    for (auto* o : {expand_stack, expand_seeds, expand_mask, expand_stats}) require(o);
    run_expand(expand_args);
  });

  PatchesArgs patches_args;
  auto* patches_cmd = app.add_subcommand("patches", "Cut a raster into square tiles");
  auto* patches_in = patches_cmd->add_option("--input", patches_args.input, "Raster header");
  patches_cmd->add_option("--size", patches_args.size, "Tile edge in pixels")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  patches_cmd->add_option("--pad", patches_args.pad, "Edge padding")
      ->check(CLI::IsMember({"reflect", "zero"}))
      ->capture_default_str();
  auto* patches_out = patches_cmd->add_option("--out-dir", patches_args.out_dir, "Output directory");
  add_config(patches_cmd);
  runners.emplace_back(patches_cmd, [&] {
    for (auto* o : {patches_in, patches_out}) require(o);
    run_patches(patches_args);
  });

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a segmentation model from a pipeline config");
  train_cmd->add_option("config", train_args.config, "Pipeline config JSON")->required();
  train_cmd->add_option("--output-dir", train_args.output_dir, "Overrides output_dir");
  train_cmd->add_option("--loss", train_args.loss, "Overrides train.loss")
      ->check(CLI::IsMember({"bce", "bce_dice", "two_stage"}));
  train_cmd->add_option("--epochs", train_args.epochs, "Overrides train.max_epochs");
  train_cmd->add_option("--batch-size", train_args.batch_size, "Overrides train.batch_size");
  train_cmd->add_option("--lr", train_args.lr, "Overrides train.learning_rate");
  train_cmd->add_option("--patience", train_args.patience, "Overrides train.plateau_patience");
  train_cmd->add_option("--val-fraction", train_args.val_fraction, "Overrides train.val_fraction");
  train_cmd->add_option("--checkpoint-every", train_args.checkpoint_every, "Overrides train.checkpoint_every");
  train_cmd->add_option("--seed", train_args.seed, "Overrides train.rng_seed");
  runners.emplace_back(train_cmd, [&] { run_train(train_args); });

  InferArgs infer_args;
  auto* infer_cmd = app.add_subcommand("infer", "Predict a full scene; writes <prefix>_prob and <prefix>_mask");
  auto* infer_ckpt = infer_cmd->add_option("--checkpoint", infer_args.checkpoint, "Model manifest (model.json)");
  auto* infer_stack = infer_cmd->add_option("--stack", infer_args.stack, "8-band stacked raster header");
  auto* infer_out = infer_cmd->add_option("--out-prefix", infer_args.out_prefix, "Output path prefix");
  add_config(infer_cmd);
  runners.emplace_back(infer_cmd, [&] {
    for (auto* o : {infer_ckpt, infer_stack, infer_out}) require(o);
    run_infer(infer_args);
  });

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Score a predicted mask against a reference mask");
  auto* eval_pred = eval_cmd->add_option("--pred", eval_args.pred, "Predicted mask header");
  auto* eval_ref = eval_cmd->add_option("--ref", eval_args.ref, "Reference mask header");
  eval_cmd->add_option("--out", eval_args.out, "Report JSON (also printed to stdout)");
  add_config(eval_cmd);
  runners.emplace_back(eval_cmd, [&] {
    for (auto* o : {eval_pred, eval_ref}) require(o);
    run_eval(eval_args);
  });

  DiffArgs diff_args;
  auto* diff_cmd = app.add_subcommand("diff", "Render a commission/omission difference map as PNG");
  auto* diff_pred = diff_cmd->add_option("--pred", diff_args.pred, "Predicted mask header");
  auto* diff_ref = diff_cmd->add_option("--ref", diff_args.ref, "Reference mask header");
  auto* diff_out = diff_cmd->add_option("--out", diff_args.out, "Output PNG");
  add_config(diff_cmd);
  runners.emplace_back(diff_cmd, [&] {
    for (auto* o : {diff_pred, diff_ref, diff_out}) require(o);
    run_diff(diff_args);
  });

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic pre/post scene with known truth");
  synth_cmd->add_option("--spec", synth_args.spec, "Scene spec JSON (defaults when omitted)");
  auto* synth_out = synth_cmd->add_option("--out-dir", synth_args.out_dir, "Output directory");
  synth_cmd->add_option("--seed", synth_args.seed, "Overrides rng_seed");
  synth_cmd->add_option("--width", synth_args.width, "Overrides width");
  synth_cmd->add_option("--height", synth_args.height, "Overrides height");
  synth_cmd->add_option("--regions", synth_args.regions, "Overrides n_regions");
  synth_cmd->add_option("--seed-fraction", synth_args.seed_fraction,
                        "Also write seeds.geojson sampling this fraction of truth pixels")
      ->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_option("--seed-rng", synth_args.seed_rng, "Sampling seed for --seed-fraction")
      ->capture_default_str();
  runners.emplace_back(synth_cmd, [&] {
    require(synth_out);
    run_synth(synth_args);
  });

  ServeArgs serve_args;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP annotation service");
  serve_cmd->add_option("--port", serve_args.port, "TCP port (0 picks a free one)")
      ->check(CLI::Range(0, 65535))
      ->capture_default_str();
  serve_cmd->add_option("--host", serve_args.host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--data-dir", serve_args.data_dir, "Directory raster references resolve in")
      ->capture_default_str();
  serve_cmd->add_option("--max-pixels", serve_args.max_pixels, "Largest accepted scene")->capture_default_str();
  add_config(serve_cmd);
  runners.emplace_back(serve_cmd, [&] { run_serve(serve_args); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "[usage] " << e.what() << "\n";
    return kExitUsage;
  }

  for (const auto& [sub, run] : runners) {
    if (!sub->parsed()) continue;
    const std::string stage = sub->get_name();
    try {
      for (const auto& [owner, path] : configs) {
        if (owner == sub && !path.empty()) merge_config_file(*sub, path);
      }
      run();
      return 0;
    } catch (const CLI::ParseError& e) {
      std::cerr << "[usage] " << e.what() << "\n";
      return kExitUsage;
    } catch (const UsageError& e) {
      std::cerr << "[usage] " << stage << ": " << e.what() << "\n";
      return kExitUsage;
    } catch (const StageError& e) {
      std::cerr << e.what() << "\n";
      return kExitFailure;
    } catch (const std::exception& e) {
      std::cerr << "[" << stage << "] " << e.what() << "\n";
      return kExitFailure;
    }
  }
  return kExitUsage;
}
