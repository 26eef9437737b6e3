#include "changeseg/mask.hpp"

#include <algorithm>
#include <numeric>

#include "changeseg/error.hpp"

namespace changeseg {

std::size_t LabelMask::popcount() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

BandRaster mask_to_raster(const LabelMask& m) {
  BandRaster r(m.width, m.height, 1);
  r.band_names = {"mask"};
  std::transform(m.values.begin(), m.values.end(), r.data.begin(),
                 [](std::uint8_t v) { return v ? 1.0f : 0.0f; });
  return r;
}

LabelMask mask_from_raster(const BandRaster& r) {
  r.validate();
  if (r.bands != 1) throw ShapeError("label mask raster must have exactly 1 band");
  LabelMask m(r.width, r.height);
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    const float v = r.data[i];
    if (v != 0.0f && v != 1.0f) {
      throw FormatError("label mask contains non-binary value " + std::to_string(v));
    }
    m.values[i] = v == 1.0f ? 1 : 0;
  }
  return m;
}

LabelMask threshold_mask(const BandRaster& probabilities, float threshold) {
  if (probabilities.bands != 1) throw ShapeError("threshold_mask expects a single band");
  LabelMask m(probabilities.width, probabilities.height);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    m.values[i] = probabilities.data[i] >= threshold ? 1 : 0;
  }
  return m;
}

void save_mask(const LabelMask& m, const std::filesystem::path& header_path) {
  save_raster(mask_to_raster(m), header_path);
}

LabelMask load_mask(const std::filesystem::path& header_path) {
  return mask_from_raster(load_raster(header_path));
}

bool is_subset(const LabelMask& inner, const LabelMask& outer) {
  if (inner.width != outer.width || inner.height != outer.height) {
    throw ShapeError("is_subset: dimension mismatch");
  }
  for (std::size_t i = 0; i < inner.values.size(); ++i) {
    if (inner.values[i] && !outer.values[i]) return false;
  }
  return true;
}

}  // namespace changeseg
