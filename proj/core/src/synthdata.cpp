#include "changeseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "changeseg/error.hpp"
#include "changeseg/rng.hpp"

namespace changeseg {

using nlohmann::json;

namespace {

constexpr std::array<double, 4> kBaseReflectance{0.12, 0.10, 0.08, 0.30};
constexpr int kFieldTerms = 6;
constexpr int kEllipseAttempts = 1000;

struct Ellipse {
  double cx, cy, a, b, theta;

  bool contains(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    const double u = (dx * std::cos(theta) + dy * std::sin(theta)) / a;
    const double v = (-dx * std::sin(theta) + dy * std::cos(theta)) / b;
    return u * u + v * v <= 1.0;
  }
};

}  // namespace

void SceneSpec::validate() const {
  if (width < 32 || height < 32) throw InvalidArgument("scene width and height must be >= 32");
  if (n_regions < 0) throw InvalidArgument("n_regions must be >= 0");
  for (double s : noise_sd) {
    if (!(s >= 0.0)) throw InvalidArgument("noise_sd must be >= 0");
  }
  if (!(background_smoothness >= 0.0)) throw InvalidArgument("background_smoothness must be >= 0");
  if (region_pixels &&
      (*region_pixels == 0 || *region_pixels >= static_cast<std::size_t>(width) * height)) {
    throw InvalidArgument("region_pixels must lie in [1, width*height)");
  }
}

SceneSpec scene_spec_from_json(const json& j) {
  static const std::set<std::string> kKeys{"width",    "height",   "n_regions",
                                           "spectral_shift", "noise_sd", "background_smoothness",
                                           "rng_seed", "region_pixels"};
  if (!j.is_object()) throw InvalidArgument("scene spec must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.contains(key)) throw InvalidArgument("unknown scene spec key '" + key + "'");
  }
  SceneSpec s;
  try {
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.n_regions = j.value("n_regions", s.n_regions);
    if (j.contains("spectral_shift")) s.spectral_shift = j["spectral_shift"].get<std::array<double, 4>>();
    if (j.contains("noise_sd")) {
      if (j["noise_sd"].is_number()) {
        s.noise_sd.fill(j["noise_sd"].get<double>());
      } else {
        s.noise_sd = j["noise_sd"].get<std::array<double, 4>>();
      }
    }
    s.background_smoothness = j.value("background_smoothness", s.background_smoothness);
    s.rng_seed = j.value("rng_seed", s.rng_seed);
    if (j.contains("region_pixels") && !j["region_pixels"].is_null()) {
      s.region_pixels = j["region_pixels"].get<std::size_t>();
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed scene spec: ") + e.what());
  }
  s.validate();
  return s;
}

json to_json(const SceneSpec& s) {
  json j{{"width", s.width},
         {"height", s.height},
         {"n_regions", s.n_regions},
         {"spectral_shift", s.spectral_shift},
         {"noise_sd", s.noise_sd},
         {"background_smoothness", s.background_smoothness},
         {"rng_seed", s.rng_seed}};
  if (s.region_pixels) j["region_pixels"] = *s.region_pixels;
  return j;
}

SyntheticScene generate_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.rng_seed);
  const int w = spec.width;
  const int h = spec.height;
  const std::array<std::string, 4> names{"R", "G", "B", "NIR"};

  SyntheticScene scene;
  scene.pre = BandRaster(w, h, 4);
  scene.pre.band_names.assign(names.begin(), names.end());

  // Low-frequency cosine mixture per band.
  for (int b = 0; b < 4; ++b) {
    struct Term {
      double amp, fx, fy, phase;
    };
    std::array<Term, kFieldTerms> terms{};
    for (auto& t : terms) {
      t.amp = rng.uniform(0.5, 1.0) / kFieldTerms;
      t.fx = static_cast<double>(rng.uniform_int(4));
      t.fy = static_cast<double>(rng.uniform_int(4));
      t.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    const double base = kBaseReflectance[b] + rng.uniform(-0.02, 0.02);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double field = 0.0;
        for (const auto& t : terms) {
          field += t.amp * std::cos(2.0 * std::numbers::pi * (t.fx * x / w + t.fy * y / h) + t.phase);
        }
        scene.pre.at(b, y, x) = static_cast<float>(base + spec.background_smoothness * field);
      }
    }
  }

  scene.truth = LabelMask(w, h);
  const double short_side = std::min(w, h);
  if (spec.region_pixels) {
    // Exactly N pixels nearest a random centre in a random elliptical metric.
    const double cx = rng.uniform(0.25 * w, 0.75 * w);
    const double cy = rng.uniform(0.25 * h, 0.75 * h);
    const double ratio = rng.uniform(0.5, 1.0);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const Ellipse shape{cx, cy, 1.0, ratio, theta};
    std::vector<std::pair<double, std::size_t>> dist;
    dist.reserve(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double dx = x - cx;
        const double dy = y - cy;
        const double u = dx * std::cos(theta) + dy * std::sin(theta);
        const double v = (-dx * std::sin(theta) + dy * std::cos(theta)) / shape.b;
        dist.emplace_back(u * u + v * v, static_cast<std::size_t>(y) * w + x);
      }
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(*spec.region_pixels),
                      dist.end());
    for (std::size_t i = 0; i < *spec.region_pixels; ++i) scene.truth.values[dist[i].second] = 1;
  } else {
    for (int region = 0; region < spec.n_regions; ++region) {
      bool placed = false;
      for (int attempt = 0; attempt < kEllipseAttempts && !placed; ++attempt) {
        Ellipse e{};
        e.a = rng.uniform(0.08, 0.18) * short_side;
        e.b = rng.uniform(0.08, 0.18) * short_side;
        e.theta = rng.uniform(0.0, std::numbers::pi);
        const double ex = std::sqrt(std::pow(e.a * std::cos(e.theta), 2) +
                                    std::pow(e.b * std::sin(e.theta), 2));
        const double ey = std::sqrt(std::pow(e.a * std::sin(e.theta), 2) +
                                    std::pow(e.b * std::cos(e.theta), 2));
        if (2.0 * ex + 2.0 >= w || 2.0 * ey + 2.0 >= h) continue;
        e.cx = rng.uniform(ex + 1.0, w - 1.0 - ex);
        e.cy = rng.uniform(ey + 1.0, h - 1.0 - ey);
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            if (e.contains(x, y)) scene.truth.at(y, x) = 1;
          }
        }
        placed = true;
      }
      if (!placed) throw InvalidArgument("cannot place affected regions inside the scene");
    }
  }

  scene.post = scene.pre;
  const auto n = scene.pre.pixel_count();
  for (int b = 0; b < 4; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      const double z = rng.normal();
      double v = scene.pre.data[b * n + i] + spec.noise_sd[b] * z;
      if (scene.truth.values[i]) v += spec.spectral_shift[b];
      scene.post.data[b * n + i] = static_cast<float>(v);
    }
  }
  return scene;
}

SeedSet sample_seeds(const LabelMask& truth, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("seed fraction must lie in (0, 1]");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    if (truth.values[i]) idx.push_back(i);
  }
  if (idx.empty()) throw InvalidArgument("cannot sample seeds from an empty truth mask");
  const auto count = std::min(
      idx.size(), static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(idx.size()) - 1e-9)));
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_int(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  SeedSet s;
  for (std::size_t i = 0; i < count; ++i) {
    s.coords.push_back({static_cast<int>(idx[i] / truth.width), static_cast<int>(idx[i] % truth.width)});
  }
  s.normalize();
  return s;
}

}  // namespace changeseg
