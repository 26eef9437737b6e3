#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "changeseg/error.hpp"
#include "changeseg/io_util.hpp"
#include "changeseg/mask.hpp"
#include "changeseg/png.hpp"
#include "changeseg/raster.hpp"
#include "changeseg/rng.hpp"
#include "test_util.hpp"

using namespace changeseg;

namespace {

BandRaster random_raster(int w, int h, int bands, std::uint64_t seed) {
  BandRaster r(w, h, bands);
  Rng rng(seed);
  for (auto& v : r.data) v = static_cast<float>(rng.normal());
  return r;
}

BandRaster four_band(int w, int h, float fill) {
  BandRaster r(w, h, 4, fill);
  r.band_names = {"R", "G", "B", "NIR"};
  return r;
}

}  // namespace

TEST_CASE("load a 2x2 zero raster from header and payload") {
  testing::TempDir dir;
  write_file_atomic(dir.path() / "z.json",
                    R"({"width":2,"height":2,"bands":1,"dtype":"f32","order":"band_sequential_row_major",)"
                    R"("band_names":[],"nodata":null,"payload":"z.bin"})");
  write_file_atomic(dir.path() / "z.bin", std::string(16, '\0'));
  const BandRaster r = load_raster(dir.path() / "z.json");
  CHECK(r.width == 2);
  CHECK(r.height == 2);
  CHECK(r.bands == 1);
  CHECK(r.data == std::vector<float>(4, 0.0f));
}

TEST_CASE("save then load is byte-identical") {
  testing::TempDir dir;
  BandRaster r = random_raster(7, 5, 3, 1);
  r.band_names = {"a", "b", "c"};
  r.nodata = -9999.0f;
  r.data[4] = -9999.0f;
  save_raster(r, dir.path() / "r.json");
  const BandRaster back = load_raster(dir.path() / "r.json");
  CHECK(back == r);
  const std::string payload = read_file(dir.path() / "r.bin");
  save_raster(back, dir.path() / "s.json");
  CHECK(read_file(dir.path() / "s.bin") == payload);
  CHECK(payload.size() == 7u * 5u * 3u * 4u);
  // Little-endian float32, band 0 first.
  float first;
  std::memcpy(&first, payload.data(), 4);
  CHECK(first == r.data[0]);
}

TEST_CASE("header/payload size mismatch is rejected") {
  testing::TempDir dir;
  write_file_atomic(dir.path() / "h.json",
                    R"({"width":2,"height":2,"bands":4,"dtype":"f32","order":"band_sequential_row_major",)"
                    R"("band_names":[],"nodata":null,"payload":"h.bin"})");
  write_file_atomic(dir.path() / "h.bin", std::string(2 * 2 * 3 * 4, '\0'));
  CHECK_THROWS_WITH_AS(load_raster(dir.path() / "h.json"), doctest::Contains("payload size mismatch"),
                       FormatError);
  CHECK_THROWS_AS(load_raster(dir.path() / "missing.json"), Error);
}

TEST_CASE("non-finite values need a declared nodata") {
  BandRaster r(2, 1, 1);
  r.data[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(r.validate(), FormatError);
  const std::string header = raster_header_text(BandRaster(2, 1, 1), "x.bin");
  std::string payload = raster_payload_bytes(BandRaster(2, 1, 1));
  const float inf = std::numeric_limits<float>::infinity();
  std::memcpy(payload.data() + 4, &inf, 4);
  CHECK_THROWS_AS(parse_raster(header, payload, "x"), FormatError);
}

TEST_CASE("read_raster_shape reads dimensions without a payload") {
  const std::string header = raster_header_text(BandRaster(9, 4, 8), "x.bin");
  const RasterShape s = read_raster_shape(header, "x");
  CHECK(s.width == 9);
  CHECK(s.height == 4);
  CHECK(s.bands == 8);
}

TEST_CASE("nearest resample with integer scale replicates blocks") {
  BandRaster r(2, 2, 1);
  r.data = {1, 2, 3, 4};
  const BandRaster out = resample(r, 4, 4, ResampleMethod::kNearest);
  const std::vector<float> expect = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  CHECK(out.data == expect);
}

TEST_CASE("nearest resample only emits input values") {
  const BandRaster r = random_raster(5, 3, 2, 2);
  const BandRaster out = resample(r, 13, 7, ResampleMethod::kNearest);
  for (float v : out.data) CHECK(std::find(r.data.begin(), r.data.end(), v) != r.data.end());
}

TEST_CASE("bilinear resample of constants stays constant") {
  const BandRaster r(3, 5, 2, 2.5f);
  for (auto [w, h] : {std::pair{1, 1}, {7, 2}, {11, 13}}) {
    const BandRaster out = resample(r, w, h, ResampleMethod::kBilinear);
    for (float v : out.data) CHECK(v == doctest::Approx(2.5).epsilon(1e-7));
  }
}

TEST_CASE("bilinear 2x1 [0,1] to 4x1 matches hand evaluation") {
  // Target centers at source coordinates -0.25, 0.25, 0.75, 1.25 (half-pixel
  // alignment); clamped outside [0, 1] -> 0, 0.25, 0.75, 1.
  BandRaster r(2, 1, 1);
  r.data = {0.0f, 1.0f};
  const BandRaster out = resample(r, 4, 1, ResampleMethod::kBilinear);
  CHECK(out.data == std::vector<float>{0.0f, 0.25f, 0.75f, 1.0f});
}

TEST_CASE("resample to identical size is the identity") {
  const BandRaster r = random_raster(6, 4, 3, 3);
  CHECK(resample(r, 6, 4, ResampleMethod::kNearest).data == r.data);
  CHECK(resample(r, 6, 4, ResampleMethod::kBilinear).data == r.data);
}

TEST_CASE("bilinear emits nodata when a neighbour is nodata") {
  BandRaster r(2, 2, 1, 1.0f);
  r.nodata = -1.0f;
  r.data[3] = -1.0f;
  const BandRaster out = resample(r, 4, 4, ResampleMethod::kBilinear);
  CHECK(out.nodata == r.nodata);
  CHECK(out.at(0, 0, 0) == 1.0f);     // only touches (0,0)
  CHECK(out.at(0, 3, 3) == -1.0f);    // only touches the nodata pixel
  CHECK(out.at(0, 1, 1) == -1.0f);    // 4-neighbourhood includes it
  CHECK_THROWS_AS(resample(r, 0, 4, ResampleMethod::kBilinear), InvalidArgument);
}

TEST_CASE("stack concatenates halves and rejects mismatches") {
  const StackedInput x = stack(four_band(2, 2, 1.0f), four_band(2, 2, 2.0f));
  CHECK(x.raster().bands == 8);
  for (int b = 0; b < 8; ++b) {
    for (float v : x.raster().band(b)) CHECK(v == (b < 4 ? 1.0f : 2.0f));
  }
  const BandRaster r = random_raster(3, 3, 4, 5);
  const StackedInput same = stack(r, r);
  CHECK(same.pre().data == r.data);
  CHECK(same.post().data == r.data);
  CHECK_THROWS_AS(stack(four_band(10, 10, 0), four_band(12, 12, 0)), ShapeError);
  CHECK_THROWS_AS(stack(BandRaster(2, 2, 3), four_band(2, 2, 0)), ShapeError);
}

TEST_CASE("normalize minmax and standardize") {
  BandRaster r(2, 1, 2);
  r.data = {0.0f, 10.0f, 7.0f, 7.0f};
  auto [mm, stats] = normalize(r, NormalizeMode::kPerBandMinMax);
  CHECK(mm.data == std::vector<float>{0.0f, 1.0f, 0.5f, 0.5f});
  CHECK(apply_normalization(r, stats).data == mm.data);

  const BandRaster g = random_raster(16, 16, 3, 9);
  auto [z, zs] = normalize(g, NormalizeMode::kPerBandStandardize);
  for (int b = 0; b < 3; ++b) {
    double s = 0.0, sq = 0.0;
    for (float v : z.band(b)) s += v;
    const double mean = s / 256.0;
    for (float v : z.band(b)) sq += (v - mean) * (v - mean);
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(sq / 256.0) - 1.0) < 1e-6);
  }
  CHECK(apply_normalization(g, zs).data == z.data);
}

TEST_CASE("spectral indices") {
  BandRaster r = four_band(2, 1, 0.0f);
  // NIR == R -> NDVI 0; second pixel NIR=3, R=1 -> 0.5.
  r.at(0, 0, 0) = 2.0f;
  r.at(3, 0, 0) = 2.0f;
  r.at(0, 0, 1) = 1.0f;
  r.at(3, 0, 1) = 3.0f;
  const BandRaster ndvi = spectral_index(r, SpectralIndex::kNdvi);
  CHECK(ndvi.data == std::vector<float>{0.0f, 0.5f});

  BandRaster w = four_band(1, 1, 0.0f);
  w.at(3, 0, 0) = 1.0f;  // G = 0, NIR = 1
  CHECK(spectral_index(w, SpectralIndex::kNdwi).data[0] == -1.0f);
  CHECK(spectral_index(four_band(1, 1, 0.0f), SpectralIndex::kNdvi).data[0] == 0.0f);  // 0/0 -> 0

  BandRaster unnamed(1, 1, 4);
  CHECK_THROWS_AS(spectral_index(unnamed, SpectralIndex::kNdvi), InvalidArgument);

  BandRaster pos = random_raster(8, 8, 4, 4);
  pos.band_names = {"R", "G", "B", "NIR"};
  for (auto& v : pos.data) v = std::abs(v);
  for (auto kind : {SpectralIndex::kNdvi, SpectralIndex::kNdwi}) {
    for (float v : spectral_index(pos, kind).data) {
      CHECK(v >= -1.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("CVA magnitude matches a per-pixel loop") {
  CHECK(cva_magnitude(four_band(2, 2, 1), four_band(2, 2, 1)).data == std::vector<float>(4, 0.0f));
  CHECK(cva_magnitude(four_band(1, 1, 1), four_band(1, 1, 2)).data[0] == 2.0f);

  const BandRaster a = random_raster(8, 8, 4, 11);
  const BandRaster b = random_raster(8, 8, 4, 12);
  const BandRaster m = cva_magnitude(a, b);
  const BandRaster m2 = cva_magnitude(b, a);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      double s = 0.0;
      for (int c = 0; c < 4; ++c) {
        const double d = static_cast<double>(b.at(c, y, x)) - a.at(c, y, x);
        s += d * d;
      }
      CHECK(std::abs(m.at(0, y, x) - std::sqrt(s)) < 1e-6);
      CHECK(m.at(0, y, x) == m2.at(0, y, x));
    }
  }
  CHECK_THROWS_AS(cva_magnitude(four_band(2, 2, 0), four_band(3, 2, 0)), ShapeError);
}

TEST_CASE("mask raster round trip and thresholding") {
  testing::TempDir dir;
  LabelMask m(5, 3);
  m.at(1, 2) = 1;
  m.at(2, 4) = 1;
  save_mask(m, dir.path() / "m.json");
  CHECK(load_mask(dir.path() / "m.json") == m);
  CHECK(m.popcount() == 2);

  BandRaster bad(2, 1, 1);
  bad.data = {0.0f, 0.5f};
  CHECK_THROWS_AS(mask_from_raster(bad), Error);

  BandRaster p(3, 1, 1);
  p.data = {0.49f, 0.5f, 0.9f};
  CHECK(threshold_mask(p).values == std::vector<std::uint8_t>{0, 1, 1});

  LabelMask outer = m;
  outer.at(0, 0) = 1;
  CHECK(is_subset(m, outer));
  CHECK_FALSE(is_subset(outer, m));
}

TEST_CASE("PNG encoding writes a valid signature") {
  Rgb8Image img(3, 2);
  img.pixels[0] = 255;
  const std::string png = encode_png(img);
  REQUIRE(png.size() > 8);
  CHECK(png.substr(1, 3) == "PNG");
  CHECK(encode_png(img) == png);  // deterministic
}
