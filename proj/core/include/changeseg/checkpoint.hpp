#pragma once

#include <filesystem>
#include <optional>

#include "changeseg/raster.hpp"
#include "changeseg/training.hpp"
#include "changeseg/vit.hpp"

namespace changeseg {

// Model checkpoint: "<name>.json" manifest {config, tensor index, ...} plus
// "<name>.bin" holding every tensor as little-endian float32 in manifest
// order. Optional sections carry input normalization and optimizer state.
struct Checkpoint {
  ViTConfig config;
  ViTParams<float> params;
  std::optional<NormalizationStats> normalization;
  std::optional<TrainConfig> train_config;
  std::optional<TrainState> train_state;  // params inside are ignored on save
  int tile_size = 0;                      // patch size used for tiling scenes
};

// Writes to temporaries then renames, so a crash never leaves a torn file.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& manifest_path);
Checkpoint load_checkpoint(const std::filesystem::path& manifest_path);

}  // namespace changeseg
