#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "changeseg/raster.hpp"

namespace changeseg {

enum class PadMode { kReflect, kZero };
PadMode parse_pad_mode(const std::string& s);
std::string to_string(PadMode m);

// Non-overlapping tiling of a raster padded on the bottom/right edge.
struct PatchGrid {
  int patch_h = 0;
  int patch_w = 0;
  int rows = 0;
  int cols = 0;
  int orig_h = 0;
  int orig_w = 0;
  PadMode pad_mode = PadMode::kReflect;

  int count() const { return rows * cols; }
  int padded_h() const { return rows * patch_h; }
  int padded_w() const { return cols * patch_w; }

  bool operator==(const PatchGrid&) const = default;
};
nlohmann::json to_json(const PatchGrid& g);

inline constexpr int kMinPatchSize = 8;

PatchGrid make_patch_grid(int height, int width, int patch_h, int patch_w, PadMode pad_mode);

// Pads `r` to the grid canvas. Reflect padding mirrors without repeating the
// edge pixel (..., 2, 1, 0 | 1, 2, ...).
BandRaster pad_to_grid(const BandRaster& r, const PatchGrid& grid);

struct PatchSet {
  std::vector<BandRaster> patches;  // row-major over the grid
  PatchGrid grid;
  // Set when reflect padding was requested but the raster is too small to
  // mirror, so zero padding was used instead.
  bool fell_back_to_zero = false;
};

// Throws InvalidArgument for patch sizes below kMinPatchSize.
PatchSet extract_patches(const BandRaster& r, int patch_h, int patch_w,
                         PadMode pad_mode = PadMode::kReflect);

// Inverse of extract_patches: stitches the grid and crops to orig size.
BandRaster reassemble(const std::vector<BandRaster>& patches, const PatchGrid& grid);

}  // namespace changeseg
