#include "changeseg/raster.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <string_view>
#include <sstream>

#include <json.hpp>

#include "changeseg/error.hpp"
#include "changeseg/io_util.hpp"

namespace changeseg {

namespace {

using ordered_json = nlohmann::ordered_json;

const char* const kDefaultStackNames[StackedInput::kBands] = {
    "pre_R", "pre_G", "pre_B", "pre_NIR", "post_R", "post_G", "post_B", "post_NIR"};

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

void require_same_grid(const BandRaster& a, const BandRaster& b, const char* what) {
  if (a.width != b.width || a.height != b.height) {
    throw ShapeError(std::string(what) + ": dimension mismatch (" + std::to_string(a.width) +
                     "x" + std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                     std::to_string(b.height) + ")");
  }
}

}  // namespace

BandRaster::BandRaster(int width, int height, int bands, float fill)
    : width(width), height(height), bands(bands),
      data(static_cast<std::size_t>(std::max(width, 0)) * std::max(height, 0) *
               std::max(bands, 0),
           fill) {}

int BandRaster::band_index(const std::string& name) const {
  for (std::size_t i = 0; i < band_names.size(); ++i) {
    if (band_names[i] == name) return static_cast<int>(i);
  }
  return -1;
}

void BandRaster::validate() const {
  if (width < 1 || height < 1 || bands < 1) {
    throw ShapeError("raster dimensions must be positive (width=" + std::to_string(width) +
                     ", height=" + std::to_string(height) + ", bands=" + std::to_string(bands) +
                     ")");
  }
  if (data.size() != pixel_count() * static_cast<std::size_t>(bands)) {
    throw ShapeError("raster data length " + std::to_string(data.size()) +
                     " does not match width*height*bands");
  }
  if (!band_names.empty() && band_names.size() != static_cast<std::size_t>(bands)) {
    throw ShapeError("band_names must be empty or have one entry per band");
  }
  if (nodata && !std::isfinite(*nodata)) {
    throw FormatError("nodata sentinel must be finite");
  }
  for (float v : data) {
    if (!std::isfinite(v) && !is_nodata(v)) {
      throw FormatError("raster contains non-finite values without a declared nodata");
    }
  }
}

StackedInput::StackedInput(BandRaster raster) : raster_(std::move(raster)) {
  raster_.validate();
  if (raster_.bands != kBands) {
    throw ShapeError("stacked input needs exactly 8 bands, got " +
                     std::to_string(raster_.bands));
  }
}

namespace {

BandRaster split_half(const BandRaster& r, int first_band) {
  BandRaster out(r.width, r.height, StackedInput::kHalfBands);
  out.nodata = r.nodata;
  const auto n = r.pixel_count();
  std::copy_n(r.data.begin() + static_cast<std::ptrdiff_t>(first_band * n),
              StackedInput::kHalfBands * n, out.data.begin());
  if (!r.band_names.empty()) {
    for (int b = 0; b < StackedInput::kHalfBands; ++b) {
      std::string name = r.band_names[first_band + b];
      for (const char* prefix : {"pre_", "post_"}) {
        if (name.rfind(prefix, 0) == 0) name = name.substr(std::strlen(prefix));
      }
      out.band_names.push_back(name);
    }
  }
  return out;
}

}  // namespace

BandRaster StackedInput::pre() const { return split_half(raster_, 0); }
BandRaster StackedInput::post() const { return split_half(raster_, kHalfBands); }

ResampleMethod parse_resample_method(const std::string& s) {
  if (s == "nearest") return ResampleMethod::kNearest;
  if (s == "bilinear") return ResampleMethod::kBilinear;
  throw InvalidArgument("unknown resample method '" + s + "' (expected nearest|bilinear)");
}

NormalizeMode parse_normalize_mode(const std::string& s) {
  if (s == "per_band_minmax") return NormalizeMode::kPerBandMinMax;
  if (s == "per_band_standardize") return NormalizeMode::kPerBandStandardize;
  throw InvalidArgument("unknown normalize mode '" + s + "'");
}

std::string to_string(ResampleMethod m) {
  return m == ResampleMethod::kNearest ? "nearest" : "bilinear";
}

std::string to_string(NormalizeMode m) {
  return m == NormalizeMode::kPerBandMinMax ? "per_band_minmax" : "per_band_standardize";
}

std::string raster_header_text(const BandRaster& r, const std::string& payload_name) {
  ordered_json h;
  h["width"] = r.width;
  h["height"] = r.height;
  h["bands"] = r.bands;
  h["dtype"] = "f32";
  h["order"] = "band_sequential_row_major";
  h["band_names"] = r.band_names;
  if (r.nodata) {
    h["nodata"] = *r.nodata;
  } else {
    h["nodata"] = nullptr;
  }
  h["payload"] = payload_name;
  return h.dump(2) + "\n";
}

std::string raster_payload_bytes(const BandRaster& r) {
  std::string bytes(r.data.size() * sizeof(float), '\0');
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    const auto bits = to_little_endian(std::bit_cast<std::uint32_t>(r.data[i]));
    std::memcpy(bytes.data() + i * sizeof(float), &bits, sizeof(bits));
  }
  return bytes;
}

void save_raster(const BandRaster& r, const std::filesystem::path& header_path) {
  r.validate();
  auto payload_path = header_path;
  payload_path.replace_extension(".bin");
  write_file_atomic(payload_path, raster_payload_bytes(r));
  write_file_atomic(header_path, raster_header_text(r, payload_path.filename().string()));
}

namespace {

struct ParsedHeader {
  BandRaster shape;  // dimensions, names and nodata; no data
  std::string payload_name;
};

ParsedHeader parse_header(std::string_view header_text, const std::string& origin) {
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": invalid header JSON: " + e.what());
  }
  ParsedHeader out;
  BandRaster& r = out.shape;
  try {
    r.width = h.at("width").get<int>();
    r.height = h.at("height").get<int>();
    r.bands = h.at("bands").get<int>();
    if (h.contains("dtype") && h["dtype"] != "f32") {
      throw FormatError(origin + ": unsupported dtype " + h["dtype"].dump());
    }
    if (h.contains("order") && h["order"] != "band_sequential_row_major") {
      throw FormatError(origin + ": unsupported order " + h["order"].dump());
    }
    if (h.contains("band_names") && !h["band_names"].is_null()) {
      r.band_names = h["band_names"].get<std::vector<std::string>>();
    }
    if (h.contains("nodata") && !h["nodata"].is_null()) {
      r.nodata = h["nodata"].get<float>();
    }
    out.payload_name = h.at("payload").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": malformed header: " + e.what());
  }
  if (r.width < 1 || r.height < 1 || r.bands < 1) {
    throw FormatError(origin + ": dimensions must be positive");
  }
  return out;
}

BandRaster attach_payload(BandRaster r, std::string_view bytes, const std::string& origin) {
  const std::size_t expected = static_cast<std::size_t>(r.width) * r.height * r.bands * sizeof(float);
  if (bytes.size() != expected) {
    throw FormatError(origin + ": payload size mismatch (expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(bytes.size()) + ")");
  }
  r.data.resize(expected / sizeof(float));
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, bytes.data() + i * sizeof(float), sizeof(bits));
    r.data[i] = std::bit_cast<float>(to_little_endian(bits));
  }
  try {
    r.validate();
  } catch (const Error& e) {
    throw FormatError(origin + ": " + e.what());
  }
  return r;
}

}  // namespace

RasterShape read_raster_shape(std::string_view header_text, const std::string& origin) {
  const auto h = parse_header(header_text, origin);
  return {h.shape.width, h.shape.height, h.shape.bands};
}

BandRaster parse_raster(std::string_view header_text, std::string_view payload, const std::string& origin) {
  return attach_payload(parse_header(header_text, origin).shape, payload, origin);
}

BandRaster load_raster(const std::filesystem::path& header_path) {
  const std::string origin = header_path.string();
  auto h = parse_header(read_file(header_path), origin);
  const auto payload_path = header_path.parent_path() / h.payload_name;
  return attach_payload(std::move(h.shape), read_file(payload_path), origin);
}

BandRaster resample(const BandRaster& r, int target_w, int target_h, ResampleMethod method) {
  r.validate();
  if (target_w < 1 || target_h < 1) {
    throw InvalidArgument("resample target dimensions must be >= 1");
  }
  if (target_w == r.width && target_h == r.height) return r;

  BandRaster out(target_w, target_h, r.bands);
  out.band_names = r.band_names;
  out.nodata = r.nodata;
  const double sx = static_cast<double>(r.width) / target_w;
  const double sy = static_cast<double>(r.height) / target_h;

  if (method == ResampleMethod::kNearest) {
    std::vector<int> src_x(target_w), src_y(target_h);
    for (int x = 0; x < target_w; ++x) {
      src_x[x] = std::min(r.width - 1, static_cast<int>(std::floor((x + 0.5) * sx)));
    }
    for (int y = 0; y < target_h; ++y) {
      src_y[y] = std::min(r.height - 1, static_cast<int>(std::floor((y + 0.5) * sy)));
    }
    for (int b = 0; b < r.bands; ++b) {
      for (int y = 0; y < target_h; ++y) {
        for (int x = 0; x < target_w; ++x) out.at(b, y, x) = r.at(b, src_y[y], src_x[x]);
      }
    }
    return out;
  }

  // Half-pixel centres, edge clamped.
  struct Tap {
    int i0, i1;
    double w1;
  };
  auto taps = [](int target, int source, double scale) {
    std::vector<Tap> t(target);
    for (int i = 0; i < target; ++i) {
      double s = (i + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(source - 1));
      const int i0 = static_cast<int>(std::floor(s));
      // A zero-weight tap is not part of the neighbourhood, so it cannot
      // spread nodata.
      const int i1 = s > i0 ? std::min(i0 + 1, source - 1) : i0;
      t[i] = {i0, i1, s - i0};
    }
    return t;
  };
  const auto tx = taps(target_w, r.width, sx);
  const auto ty = taps(target_h, r.height, sy);
  for (int b = 0; b < r.bands; ++b) {
    for (int y = 0; y < target_h; ++y) {
      for (int x = 0; x < target_w; ++x) {
        const float v00 = r.at(b, ty[y].i0, tx[x].i0);
        const float v01 = r.at(b, ty[y].i0, tx[x].i1);
        const float v10 = r.at(b, ty[y].i1, tx[x].i0);
        const float v11 = r.at(b, ty[y].i1, tx[x].i1);
        if (r.is_nodata(v00) || r.is_nodata(v01) || r.is_nodata(v10) || r.is_nodata(v11)) {
          out.at(b, y, x) = *r.nodata;
          continue;
        }
        const double wx = tx[x].w1;
        const double wy = ty[y].w1;
        const double top = v00 * (1.0 - wx) + v01 * wx;
        const double bottom = v10 * (1.0 - wx) + v11 * wx;
        out.at(b, y, x) = static_cast<float>(top * (1.0 - wy) + bottom * wy);
      }
    }
  }
  return out;
}

StackedInput stack(const BandRaster& pre, const BandRaster& post) {
  pre.validate();
  post.validate();
  if (pre.bands != StackedInput::kHalfBands || post.bands != StackedInput::kHalfBands) {
    throw ShapeError("stack needs two 4-band rasters (got " + std::to_string(pre.bands) +
                     " and " + std::to_string(post.bands) + " bands)");
  }
  require_same_grid(pre, post, "stack");

  BandRaster out(pre.width, pre.height, StackedInput::kBands);
  out.nodata = pre.nodata ? pre.nodata : post.nodata;
  const auto n = pre.pixel_count();
  std::copy(pre.data.begin(), pre.data.end(), out.data.begin());
  for (std::size_t i = 0; i < post.data.size(); ++i) {
    float v = post.data[i];
    if (post.is_nodata(v) && out.nodata) v = *out.nodata;
    out.data[StackedInput::kHalfBands * n + i] = v;
  }
  const bool named = pre.band_names.size() == 4 && post.band_names.size() == 4;
  for (int b = 0; b < StackedInput::kBands; ++b) {
    if (named) {
      out.band_names.push_back(b < 4 ? "pre_" + pre.band_names[b] : "post_" + post.band_names[b - 4]);
    } else {
      out.band_names.emplace_back(kDefaultStackNames[b]);
    }
  }
  return StackedInput(std::move(out));
}

std::pair<BandRaster, NormalizationStats> normalize(const BandRaster& r, NormalizeMode mode) {
  r.validate();
  NormalizationStats stats;
  stats.mode = mode;
  stats.offset.resize(r.bands);
  stats.scale.resize(r.bands);
  stats.constant.assign(r.bands, false);
  for (int b = 0; b < r.bands; ++b) {
    const auto band = r.band(b);
    std::size_t count = 0;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    double sum = 0.0;
    for (float v : band) {
      if (r.is_nodata(v)) continue;
      ++count;
      lo = std::min<double>(lo, v);
      hi = std::max<double>(hi, v);
      sum += v;
    }
    if (count == 0) {
      throw InvalidArgument("normalize: band " + std::to_string(b) + " has no valid pixels");
    }
    if (mode == NormalizeMode::kPerBandMinMax) {
      stats.offset[b] = lo;
      stats.scale[b] = hi - lo;
      stats.constant[b] = !(hi > lo);
    } else {
      const double mean = sum / static_cast<double>(count);
      double ss = 0.0;
      for (float v : band) {
        if (r.is_nodata(v)) continue;
        ss += (v - mean) * (v - mean);
      }
      stats.offset[b] = mean;
      stats.scale[b] = std::max(std::sqrt(ss / static_cast<double>(count)), 1e-12);
    }
  }
  return {apply_normalization(r, stats), stats};
}

BandRaster apply_normalization(const BandRaster& r, const NormalizationStats& stats) {
  if (stats.offset.size() != static_cast<std::size_t>(r.bands) ||
      stats.scale.size() != static_cast<std::size_t>(r.bands)) {
    throw ShapeError("normalization statistics do not match the band count");
  }
  BandRaster out = r;
  for (int b = 0; b < r.bands; ++b) {
    const bool constant = b < static_cast<int>(stats.constant.size()) && stats.constant[b];
    auto dst = out.band(b);
    for (auto& v : dst) {
      if (r.is_nodata(v)) continue;
      if (stats.mode == NormalizeMode::kPerBandMinMax && constant) {
        v = 0.5f;
      } else {
        v = static_cast<float>((v - stats.offset[b]) / stats.scale[b]);
      }
    }
  }
  return out;
}

BandRaster spectral_index(const BandRaster& r, SpectralIndex kind) {
  r.validate();
  const std::string first = kind == SpectralIndex::kNdvi ? "NIR" : "G";
  const std::string second = kind == SpectralIndex::kNdvi ? "R" : "NIR";
  const int ia = r.band_index(first);
  const int ib = r.band_index(second);
  if (ia < 0 || ib < 0) {
    throw InvalidArgument(std::string(kind == SpectralIndex::kNdvi ? "NDVI" : "NDWI") +
                          " needs bands named " + first + " and " + second);
  }
  BandRaster out(r.width, r.height, 1);
  out.band_names = {kind == SpectralIndex::kNdvi ? "NDVI" : "NDWI"};
  out.nodata = r.nodata;
  const auto a = r.band(ia);
  const auto b = r.band(ib);
  for (std::size_t i = 0; i < r.pixel_count(); ++i) {
    if (r.is_nodata(a[i]) || r.is_nodata(b[i])) {
      out.data[i] = *r.nodata;
      continue;
    }
    const double den = static_cast<double>(a[i]) + b[i];
    out.data[i] = den == 0.0 ? 0.0f : static_cast<float>((static_cast<double>(a[i]) - b[i]) / den);
  }
  return out;
}

BandRaster cva_magnitude(const BandRaster& pre, const BandRaster& post) {
  pre.validate();
  post.validate();
  require_same_grid(pre, post, "cva_magnitude");
  if (pre.bands != post.bands) throw ShapeError("cva_magnitude: band count mismatch");
  BandRaster out(pre.width, pre.height, 1);
  out.band_names = {"CVA"};
  out.nodata = pre.nodata ? pre.nodata : post.nodata;
  const auto n = pre.pixel_count();
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    bool missing = false;
    for (int b = 0; b < pre.bands; ++b) {
      const float a = pre.data[b * n + i];
      const float c = post.data[b * n + i];
      if (pre.is_nodata(a) || post.is_nodata(c)) {
        missing = true;
        break;
      }
      const double d = static_cast<double>(c) - a;
      ss += d * d;
    }
    out.data[i] = missing ? *out.nodata : static_cast<float>(std::sqrt(ss));
  }
  return out;
}

}  // namespace changeseg
