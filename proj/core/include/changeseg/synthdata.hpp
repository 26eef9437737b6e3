#pragma once

#include <array>
#include <cstdint>
#include <optional>

#include <json.hpp>

#include "changeseg/labelex.hpp"
#include "changeseg/mask.hpp"
#include "changeseg/raster.hpp"

namespace changeseg {

// Parameters of a synthetic pre/post scene. Defaults give a per-band
// signal-to-noise ratio |shift| / noise_sd between 7.5 and 12.5.
struct SceneSpec {
  int width = 256;
  int height = 256;
  int n_regions = 3;
  std::array<double, 4> spectral_shift{-0.25, -0.20, -0.15, 0.25};
  std::array<double, 4> noise_sd{0.02, 0.02, 0.02, 0.02};
  // Low-frequency field amplitude; larger values give a busier background.
  double background_smoothness = 0.05;
  std::uint64_t rng_seed = 42;
  // When set, the affected region is exactly this many pixels: the ones
  // closest (in an elliptical metric) to a random centre.
  std::optional<std::size_t> region_pixels;

  void validate() const;
};
SceneSpec scene_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SceneSpec& s);

struct SyntheticScene {
  BandRaster pre;    // 4 bands R,G,B,NIR
  BandRaster post;   // 4 bands R,G,B,NIR
  LabelMask truth;
};

// pre = seeded low-frequency cosine mixture per band; truth = union of
// n_regions ellipses fully inside the frame; post = pre + spectral_shift on
// truth + i.i.d. Gaussian noise everywhere.
SyntheticScene generate_scene(const SceneSpec& spec);

// Uniform sample without replacement of ceil(fraction * |truth|) truth pixels.
SeedSet sample_seeds(const LabelMask& truth, double fraction, std::uint64_t seed);

}  // namespace changeseg
