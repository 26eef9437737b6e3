#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace changeseg {

// W x H x B float32 raster stored band-sequential, row-major within a band:
// value(b, y, x) lives at data[(b * height + y) * width + x].
struct BandRaster {
  int width = 0;
  int height = 0;
  int bands = 0;
  std::vector<float> data;
  std::vector<std::string> band_names;  // empty or exactly `bands` entries
  std::optional<float> nodata;

  BandRaster() = default;
  BandRaster(int width, int height, int bands, float fill = 0.0f);

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  }
  std::size_t index(int band, int y, int x) const {
    return (static_cast<std::size_t>(band) * height + y) * width + x;
  }
  float& at(int band, int y, int x) { return data[index(band, y, x)]; }
  float at(int band, int y, int x) const { return data[index(band, y, x)]; }

  std::span<float> band(int b) {
    return {data.data() + static_cast<std::size_t>(b) * pixel_count(), pixel_count()};
  }
  std::span<const float> band(int b) const {
    return {data.data() + static_cast<std::size_t>(b) * pixel_count(), pixel_count()};
  }

  bool is_nodata(float v) const { return nodata.has_value() && v == *nodata; }

  // Index of the band labelled `name`, or -1.
  int band_index(const std::string& name) const;

  // Throws ShapeError / FormatError when an invariant is violated.
  void validate() const;

  bool operator==(const BandRaster&) const = default;
};

// Eight-band pre/post stack, band order [pre R,G,B,NIR, post R,G,B,NIR].
class StackedInput {
 public:
  static constexpr int kBands = 8;
  static constexpr int kHalfBands = 4;

  // Wraps an already-stacked raster (e.g. loaded from disk).
  explicit StackedInput(BandRaster raster);

  const BandRaster& raster() const { return raster_; }
  BandRaster& raster() { return raster_; }
  int width() const { return raster_.width; }
  int height() const { return raster_.height; }

  BandRaster pre() const;
  BandRaster post() const;

 private:
  BandRaster raster_;
};

enum class ResampleMethod { kNearest, kBilinear };
enum class NormalizeMode { kPerBandMinMax, kPerBandStandardize };
enum class SpectralIndex { kNdvi, kNdwi };

ResampleMethod parse_resample_method(const std::string& s);
NormalizeMode parse_normalize_mode(const std::string& s);
std::string to_string(ResampleMethod m);
std::string to_string(NormalizeMode m);

// Affine per-band map out = (in - offset) / scale, recorded so inference can
// reuse training statistics.
struct NormalizationStats {
  NormalizeMode mode = NormalizeMode::kPerBandStandardize;
  std::vector<double> offset;
  std::vector<double> scale;
  // Minmax with a constant band maps to 0.5; flagged per band.
  std::vector<bool> constant;
};

// Raster file I/O: "<name>.json" header plus "<name>.bin" little-endian
// float32 payload next to it.
BandRaster load_raster(const std::filesystem::path& header_path);
// Same format from memory; `origin` prefixes error messages. The header's
// payload name is ignored.
BandRaster parse_raster(std::string_view header_text, std::string_view payload,
                        const std::string& origin);

struct RasterShape {
  int width = 0;
  int height = 0;
  int bands = 0;
};
// Dimensions from a header alone, so oversized inputs can be refused before
// their payload is read.
RasterShape read_raster_shape(std::string_view header_text, const std::string& origin);
void save_raster(const BandRaster& r, const std::filesystem::path& header_path);
// Header text exactly as save_raster writes it for `payload_name`.
std::string raster_header_text(const BandRaster& r, const std::string& payload_name);
// Little-endian payload bytes exactly as save_raster writes them.
std::string raster_payload_bytes(const BandRaster& r);

BandRaster resample(const BandRaster& r, int target_w, int target_h, ResampleMethod method);

StackedInput stack(const BandRaster& pre, const BandRaster& post);

std::pair<BandRaster, NormalizationStats> normalize(const BandRaster& r, NormalizeMode mode);
BandRaster apply_normalization(const BandRaster& r, const NormalizationStats& stats);

// Requires band names R and NIR (NDVI) or G and NIR (NDWI).
BandRaster spectral_index(const BandRaster& r, SpectralIndex kind);

// Per-pixel Euclidean norm of (post - pre) across bands.
BandRaster cva_magnitude(const BandRaster& pre, const BandRaster& post);

}  // namespace changeseg
