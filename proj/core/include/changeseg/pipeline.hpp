#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "changeseg/checkpoint.hpp"
#include "changeseg/labelex.hpp"
#include "changeseg/patching.hpp"
#include "changeseg/raster.hpp"
#include "changeseg/training.hpp"
#include "changeseg/vit.hpp"

namespace changeseg::pipeline {

// Expansion as run by both the CLI and the annotation service: the stack is
// standardized per band, then PCA / Gaussian / chi-squared thresholding.
// Sharing this path keeps the two front ends byte-identical.
StackedInput expansion_features(const StackedInput& stack);

ExpansionConfig expansion_config(double alpha, int pc);

// Throws InvalidArgument for alpha outside (0, 1) or pc outside [1, 8].
void validate_expansion_params(double alpha, int pc);

ExpansionResult expand(const StackedInput& features, const SeedSet& seeds,
                       double alpha, int pc, const PcaModel* full_pca = nullptr);

// Full-rank PCA of the standardized features; truncations of it equal
// fit_pca(features, k) exactly.
PcaModel full_pca(const StackedInput& features);

// Resamples post onto pre's grid when the dimensions differ, then stacks.
StackedInput stack_scene(const BandRaster& pre, const BandRaster& post, ResampleMethod method);

// Training configuration file. Paths are resolved relative to the file.
struct PipelineConfig {
  std::filesystem::path stack;
  std::filesystem::path labels;
  std::filesystem::path output_dir;
  int tile_size = 32;
  PadMode pad_mode = PadMode::kReflect;
  NormalizeMode normalize = NormalizeMode::kPerBandStandardize;
  ViTConfig vit;
  TrainConfig train;

  // Throws InvalidArgument for unknown keys, FormatError for missing paths.
  static PipelineConfig from_json(const nlohmann::json& j,
                                  const std::filesystem::path& base_dir);
  nlohmann::json to_json() const;
  void validate() const;
};

// Tiles stack and labels into aligned training samples.
std::vector<PatchSample> make_samples(const BandRaster& normalized_stack,
                                      const LabelMask& labels, int tile_size, PadMode pad);

struct TrainingOutputs {
  Checkpoint checkpoint;
  TrainHistory history;
};

// Normalize -> tile -> split -> train. Writes <output_dir>/model.json,
// model.bin and history.jsonl.
TrainingOutputs run_training(const PipelineConfig& cfg);

// Tiles the scene with the checkpoint's tile size, predicts every tile,
// reassembles and crops. Returns a single-band probability raster.
BandRaster infer_scene(const Checkpoint& ckpt, const StackedInput& stack);

}  // namespace changeseg::pipeline
