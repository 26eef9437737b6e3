#include "changeseg/pipeline.hpp"

#include <set>

#include "changeseg/error.hpp"
#include "changeseg/io_util.hpp"
#include "changeseg/mask.hpp"
#include "changeseg/parallel.hpp"

namespace changeseg::pipeline {

using nlohmann::json;

StackedInput expansion_features(const StackedInput& stack) {
  return StackedInput(normalize(stack.raster(), NormalizeMode::kPerBandStandardize).first);
}

void validate_expansion_params(double alpha, int pc) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw InvalidArgument("alpha must lie in (0, 1), got " + std::to_string(alpha));
  }
  if (pc < 1 || pc > StackedInput::kBands) {
    throw InvalidArgument("pc must lie in [1, 8], got " + std::to_string(pc));
  }
}

ExpansionConfig expansion_config(double alpha, int pc) {
  validate_expansion_params(alpha, pc);
  ExpansionConfig cfg;
  cfg.alpha = alpha;
  cfg.k = pc;
  return cfg;
}

PcaModel full_pca(const StackedInput& features) {
  ExpansionConfig cfg;
  cfg.k = StackedInput::kBands;
  return fit_pca(features, SeedSet{}, cfg);
}

ExpansionResult expand(const StackedInput& features, const SeedSet& seeds, double alpha, int pc,
                       const PcaModel* pca) {
  const ExpansionConfig cfg = expansion_config(alpha, pc);
  if (pca) return expand_labels(features, seeds, cfg, *pca);
  return expand_labels(features, seeds, cfg, full_pca(features));
}

StackedInput stack_scene(const BandRaster& pre, const BandRaster& post, ResampleMethod method) {
  if (pre.width == post.width && pre.height == post.height) return stack(pre, post);
  return stack(pre, resample(post, pre.width, pre.height, method));
}

// ---------------------------------------------------------------- config

PipelineConfig PipelineConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  static const std::set<std::string> kKeys{"stack",    "labels",    "output_dir", "tile_size",
                                           "pad_mode", "normalize", "model",      "train"};
  if (!j.is_object()) throw InvalidArgument("pipeline config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.contains(key)) throw InvalidArgument("unknown config key '" + key + "'");
  }
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  PipelineConfig c;
  try {
    if (!j.contains("stack")) throw FormatError("config is missing required key 'stack'");
    if (!j.contains("labels")) throw FormatError("config is missing required key 'labels'");
    c.stack = resolve(j["stack"].get<std::string>());
    c.labels = resolve(j["labels"].get<std::string>());
    if (j.contains("output_dir")) c.output_dir = resolve(j["output_dir"].get<std::string>());
    c.tile_size = j.value("tile_size", c.tile_size);
    if (j.contains("pad_mode")) c.pad_mode = parse_pad_mode(j["pad_mode"].get<std::string>());
    if (j.contains("normalize")) c.normalize = parse_normalize_mode(j["normalize"].get<std::string>());
    ViTConfig base;
    base.in_channels = StackedInput::kBands;
    base.input_h = c.tile_size;
    base.input_w = c.tile_size;
    c.vit = j.contains("model") ? vit_config_from_json(j["model"], base) : base;
    if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed pipeline config: ") + e.what());
  }
  return c;
}

json PipelineConfig::to_json() const {
  return {{"stack", stack.string()},
          {"labels", labels.string()},
          {"output_dir", output_dir.string()},
          {"tile_size", tile_size},
          {"pad_mode", changeseg::to_string(pad_mode)},
          {"normalize", changeseg::to_string(normalize)},
          {"model", changeseg::to_json(vit)},
          {"train", changeseg::to_json(train)}};
}

void PipelineConfig::validate() const {
  if (stack.empty() || labels.empty()) throw InvalidArgument("config needs 'stack' and 'labels'");
  if (output_dir.empty()) throw InvalidArgument("config needs an output directory");
  if (tile_size < kMinPatchSize) {
    throw InvalidArgument("tile_size must be >= " + std::to_string(kMinPatchSize));
  }
  if (vit.in_channels != StackedInput::kBands) {
    throw InvalidArgument("model in_channels must be 8 for a pre/post stack");
  }
  if (vit.input_h != tile_size || vit.input_w != tile_size) {
    throw InvalidArgument("model input size must equal tile_size (" + std::to_string(tile_size) + ")");
  }
  vit.validate();
  train.validate();
}

// ---------------------------------------------------------------- training

namespace {

std::vector<float> model_input(const BandRaster& r) {
  std::vector<float> v = r.data;
  if (r.nodata) {
    for (auto& x : v) {
      if (x == *r.nodata) x = 0.0f;
    }
  }
  return v;
}

}  // namespace

std::vector<PatchSample> make_samples(const BandRaster& normalized_stack, const LabelMask& labels, int tile_size,
                                      PadMode pad) {
  if (labels.width != normalized_stack.width || labels.height != normalized_stack.height) {
    throw ShapeError("labels are " + std::to_string(labels.width) + "x" + std::to_string(labels.height) +
                     " but the stack is " + std::to_string(normalized_stack.width) + "x" +
                     std::to_string(normalized_stack.height));
  }
  const PatchSet xs = extract_patches(normalized_stack, tile_size, tile_size, pad);
  const PatchSet ys = extract_patches(mask_to_raster(labels), tile_size, tile_size, pad);
  std::vector<PatchSample> out(xs.patches.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].input = model_input(xs.patches[i]);
    out[i].label = ys.patches[i].data;
  }
  return out;
}

TrainingOutputs run_training(const PipelineConfig& cfg) {
  cfg.validate();
  const StackedInput stack(load_raster(cfg.stack));
  const LabelMask labels = load_mask(cfg.labels);
  auto [normalized, stats] = normalize(stack.raster(), cfg.normalize);
  const auto samples = make_samples(normalized, labels, cfg.tile_size, cfg.pad_mode);

  std::filesystem::create_directories(cfg.output_dir);
  TrainOptions options;
  if (cfg.train.checkpoint_every > 0) options.checkpoint_dir = cfg.output_dir / "checkpoints";
  const auto params = init_params<float>(cfg.vit);
  TrainResult result = train(params, cfg.vit, samples, cfg.train, options);

  TrainingOutputs out;
  out.history = result.state.history;
  out.checkpoint.config = cfg.vit;
  out.checkpoint.params = result.state.params;
  out.checkpoint.normalization = stats;
  out.checkpoint.train_config = cfg.train;
  out.checkpoint.tile_size = cfg.tile_size;
  out.checkpoint.train_state = std::move(result.state);
  save_checkpoint(out.checkpoint, cfg.output_dir / "model.json");
  write_file_atomic(cfg.output_dir / "history.jsonl", out.history.to_jsonl());
  return out;
}

BandRaster infer_scene(const Checkpoint& ckpt, const StackedInput& stack) {
  const ViTConfig& vit = ckpt.config;
  if (vit.in_channels != stack.raster().bands) {
    throw ShapeError("model expects " + std::to_string(vit.in_channels) + " bands, stack has " +
                     std::to_string(stack.raster().bands));
  }
  const int tile = ckpt.tile_size > 0 ? ckpt.tile_size : vit.input_h;
  if (tile != vit.input_h || tile != vit.input_w) {
    throw ShapeError("checkpoint tile size does not match the model input size");
  }
  const BandRaster input = ckpt.normalization ? apply_normalization(stack.raster(), *ckpt.normalization)
                                              : stack.raster();
  const PatchSet tiles = extract_patches(input, tile, tile, PadMode::kReflect);
  std::vector<BandRaster> probs(tiles.patches.size());
  parallel_for(0, tiles.patches.size(), [&](std::size_t i) {
    BandRaster p(tile, tile, 1);
    p.data = predict(ckpt.params, vit, model_input(tiles.patches[i]));
    probs[i] = std::move(p);
  });
  BandRaster out = reassemble(probs, tiles.grid);
  out.band_names = {"probability"};
  out.nodata.reset();
  return out;
}

}  // namespace changeseg::pipeline
