#include "changeseg/png.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <png.h>

#include "changeseg/error.hpp"
#include "changeseg/io_util.hpp"

namespace changeseg {

namespace {

void append_to_string(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), length);
}

void flush_noop(png_structp) {}

// Stretch of one band to 0..255 over its valid range.
std::vector<std::uint8_t> stretch_band(const BandRaster& r, int band) {
  if (band < 0 || band >= r.bands) throw ShapeError("render: band index out of range");
  const auto values = r.band(band);
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (float v : values) {
    if (r.is_nodata(v)) continue;
    lo = std::min<double>(lo, v);
    hi = std::max<double>(hi, v);
  }
  std::vector<std::uint8_t> out(values.size(), 0);
  if (!(hi >= lo)) return out;
  const double span = hi - lo;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (r.is_nodata(values[i])) continue;
    const double t = span > 0.0 ? (values[i] - lo) / span : 0.5;
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
  }
  return out;
}

}  // namespace

std::string encode_png(const Rgb8Image& img) {
  if (img.width < 1 || img.height < 1 ||
      img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * 3) {
    throw ShapeError("encode_png: image buffer does not match its dimensions");
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("encode_png: png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("encode_png: png_create_info_struct failed");
  }
  std::string out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("encode_png: libpng error");
  }
  png_set_write_fn(png, &out, append_to_string, flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    auto* row = const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(y) * img.width * 3);
    png_write_row(png, row);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const Rgb8Image& img, const std::filesystem::path& path) {
  write_file_atomic(path, encode_png(img));
}

Rgb8Image render_bands(const BandRaster& r, int band_r, int band_g, int band_b) {
  const auto cr = stretch_band(r, band_r);
  const auto cg = stretch_band(r, band_g);
  const auto cb = stretch_band(r, band_b);
  Rgb8Image img(r.width, r.height);
  for (std::size_t i = 0; i < r.pixel_count(); ++i) {
    img.pixels[3 * i] = cr[i];
    img.pixels[3 * i + 1] = cg[i];
    img.pixels[3 * i + 2] = cb[i];
  }
  return img;
}

Rgb8Image render_gray(const BandRaster& r, int band) { return render_bands(r, band, band, band); }

Rgb8Image rgb8_from_raster(const BandRaster& r) {
  if (r.bands != 3) throw ShapeError("rgb8_from_raster expects 3 bands");
  Rgb8Image img(r.width, r.height);
  const auto n = r.pixel_count();
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      img.pixels[3 * i + c] =
          static_cast<std::uint8_t>(std::clamp(std::lround(r.data[c * n + i]), 0L, 255L));
    }
  }
  return img;
}

}  // namespace changeseg
