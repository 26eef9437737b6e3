#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "changeseg/raster.hpp"

namespace changeseg {

// Binary W x H mask, row-major, values in {0, 1}.
struct LabelMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> values;

  LabelMask() = default;
  LabelMask(int width, int height, std::uint8_t fill = 0)
      : width(width), height(height),
        values(static_cast<std::size_t>(width) * height, fill) {}

  std::size_t size() const { return values.size(); }
  std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t popcount() const;

  bool operator==(const LabelMask&) const = default;
};

// Single-band raster with values 0.0f / 1.0f.
BandRaster mask_to_raster(const LabelMask& m);
// Accepts a single-band raster whose values are exactly 0 or 1.
LabelMask mask_from_raster(const BandRaster& r);

// Pixels with probability >= threshold become 1.
LabelMask threshold_mask(const BandRaster& probabilities, float threshold = 0.5f);

void save_mask(const LabelMask& m, const std::filesystem::path& header_path);
LabelMask load_mask(const std::filesystem::path& header_path);

// True when every pixel set in `inner` is also set in `outer`.
bool is_subset(const LabelMask& inner, const LabelMask& outer);

}  // namespace changeseg
