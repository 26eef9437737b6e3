#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "changeseg/raster.hpp"

namespace changeseg {

// 8-bit RGB image, interleaved rows.
struct Rgb8Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // width * height * 3

  Rgb8Image() = default;
  Rgb8Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}
};

std::string encode_png(const Rgb8Image& img);
void write_png(const Rgb8Image& img, const std::filesystem::path& path);

// Per-band minmax stretch to 8 bits. One band renders as gray, otherwise the
// three listed bands become R, G, B. Nodata pixels render black.
Rgb8Image render_bands(const BandRaster& r, int band_r, int band_g, int band_b);
Rgb8Image render_gray(const BandRaster& r, int band);

// Three-band raster holding 0..255 values -> RGB image without stretching.
Rgb8Image rgb8_from_raster(const BandRaster& r);

}  // namespace changeseg
