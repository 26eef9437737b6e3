#include "changeseg/labelex.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "changeseg/chi2.hpp"
#include "changeseg/error.hpp"
#include "changeseg/parallel.hpp"
#include "changeseg/rng.hpp"

namespace changeseg {

using nlohmann::json;

// ---------------------------------------------------------------- seed sets

void SeedSet::normalize() {
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
}

LabelMask SeedSet::to_mask(int width, int height) const {
  LabelMask m(width, height);
  for (const auto& c : coords) {
    if (c.row < 0 || c.row >= height || c.col < 0 || c.col >= width) {
      throw InvalidArgument("seed (" + std::to_string(c.row) + ", " + std::to_string(c.col) +
                            ") lies outside the raster");
    }
    m.at(c.row, c.col) = 1;
  }
  return m;
}

SeedSet SeedSet::from_mask(const LabelMask& m) {
  SeedSet s;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (m.at(y, x)) s.coords.push_back({y, x});
    }
  }
  return s;
}

// ---------------------------------------------------------------- polygons

namespace {

Ring open_ring(const Ring& ring) {
  Ring r = ring;
  if (r.size() >= 2 && r.front().x == r.back().x && r.front().y == r.back().y) r.pop_back();
  return r;
}

std::size_t distinct_vertices(const Ring& r) {
  std::vector<std::pair<double, double>> pts;
  pts.reserve(r.size());
  for (const auto& p : r) pts.emplace_back(p.x, p.y);
  std::sort(pts.begin(), pts.end());
  return static_cast<std::size_t>(std::unique(pts.begin(), pts.end()) - pts.begin());
}

}  // namespace

SeedSet rasterize_polygons(std::span<const Polygon> polygons, int width, int height) {
  if (width < 1 || height < 1) throw InvalidArgument("rasterize_polygons: empty raster");
  LabelMask inside(width, height);
  std::vector<double> crossings;
  for (const auto& polygon : polygons) {
    std::vector<Ring> rings;
    double min_y = std::numeric_limits<double>::infinity();
    double max_y = -min_y;
    for (const auto& raw : polygon) {
      Ring ring = open_ring(raw);
      if (ring.size() < 3 || distinct_vertices(ring) < 3) {
        throw InvalidArgument("degenerate polygon ring (fewer than 3 distinct vertices)");
      }
      for (const auto& p : ring) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
          throw InvalidArgument("polygon vertex is not finite");
        }
        min_y = std::min(min_y, p.y);
        max_y = std::max(max_y, p.y);
      }
      rings.push_back(std::move(ring));
    }
    if (rings.empty()) continue;
    const int row_lo = std::max(0, static_cast<int>(std::floor(min_y)));
    const int row_hi = std::min(height - 1, static_cast<int>(std::ceil(max_y)));
    for (int row = row_lo; row <= row_hi; ++row) {
      const double py = row;
      crossings.clear();
      for (const auto& ring : rings) {
        for (std::size_t i = 0, j = ring.size() - 1; i < ring.size(); j = i++) {
          const auto& a = ring[i];
          const auto& b = ring[j];
          if ((a.y > py) != (b.y > py)) {
            crossings.push_back((b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x);
          }
        }
      }
      if (crossings.empty()) continue;
      std::sort(crossings.begin(), crossings.end());
      for (int col = 0; col < width; ++col) {
        // Even-odd: inside when an odd number of crossings lie right of the
        // pixel centre.
        const auto right = crossings.end() -
                           std::upper_bound(crossings.begin(), crossings.end(),
                                            static_cast<double>(col));
        if (right % 2 == 1) inside.at(row, col) = 1;
      }
    }
  }
  return SeedSet::from_mask(inside);
}

namespace {

Ring parse_ring(const json& coords) {
  if (!coords.is_array()) throw InvalidArgument("GeoJSON ring must be an array of positions");
  Ring ring;
  for (const auto& pos : coords) {
    if (!pos.is_array() || pos.size() < 2 || !pos[0].is_number() || !pos[1].is_number()) {
      throw InvalidArgument("GeoJSON position must be [x, y]");
    }
    ring.push_back({pos[0].get<double>(), pos[1].get<double>()});
  }
  return ring;
}

Polygon parse_polygon_coords(const json& coords) {
  if (!coords.is_array()) throw InvalidArgument("Polygon coordinates must be an array of rings");
  Polygon p;
  for (const auto& ring : coords) p.push_back(parse_ring(ring));
  return p;
}

void collect_geometry(const json& geom, std::vector<Polygon>& out) {
  if (geom.is_null()) return;
  const std::string type = geom.value("type", "");
  if (type == "Polygon") {
    out.push_back(parse_polygon_coords(geom.at("coordinates")));
  } else if (type == "MultiPolygon") {
    for (const auto& poly : geom.at("coordinates")) out.push_back(parse_polygon_coords(poly));
  } else if (type == "GeometryCollection") {
    for (const auto& g : geom.at("geometries")) collect_geometry(g, out);
  } else {
    throw InvalidArgument("unsupported GeoJSON geometry type '" + type + "'");
  }
}

}  // namespace

std::vector<Polygon> parse_geojson_polygons(const json& doc) {
  std::vector<Polygon> out;
  try {
    if (doc.is_object() && doc.contains("polygons") && !doc.contains("type")) {
      return parse_geojson_polygons(doc.at("polygons"));
    }
    const std::string type = doc.is_object() ? doc.value("type", "") : "";
    if (type == "FeatureCollection") {
      for (const auto& f : doc.at("features")) {
        if (f.value("type", "") != "Feature") throw InvalidArgument("FeatureCollection member is not a Feature");
        collect_geometry(f.contains("geometry") ? f["geometry"] : json(), out);
      }
    } else if (type == "Feature") {
      collect_geometry(doc.contains("geometry") ? doc["geometry"] : json(), out);
    } else if (type == "Polygon" || type == "MultiPolygon" || type == "GeometryCollection") {
      collect_geometry(doc, out);
    } else {
      throw InvalidArgument("expected a GeoJSON FeatureCollection of Polygons");
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed GeoJSON: ") + e.what());
  }
  return out;
}

json polygons_to_geojson(std::span<const Polygon> polygons) {
  json features = json::array();
  for (const auto& poly : polygons) {
    json rings = json::array();
    for (const auto& ring : poly) {
      json coords = json::array();
      for (const auto& p : ring) coords.push_back({p.x, p.y});
      if (!ring.empty() && (ring.front().x != ring.back().x || ring.front().y != ring.back().y)) {
        coords.push_back({ring.front().x, ring.front().y});
      }
      rings.push_back(std::move(coords));
    }
    features.push_back({{"type", "Feature"},
                        {"properties", json::object()},
                        {"geometry", {{"type", "Polygon"}, {"coordinates", std::move(rings)}}}});
  }
  return {{"type", "FeatureCollection"}, {"features", std::move(features)}};
}

// ---------------------------------------------------------------- config

void ExpansionConfig::validate() const {
  if (k < 1) throw InvalidArgument("expansion: k must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw InvalidArgument("expansion: alpha must lie in (0, 1), got " + std::to_string(alpha));
  }
  if (ridge && !(*ridge >= 0.0)) throw InvalidArgument("expansion: ridge must be >= 0");
  if (subsample && *subsample == 0) throw InvalidArgument("expansion: subsample must be positive");
}

// ---------------------------------------------------------------- PCA

PcaModel PcaModel::truncated(std::size_t keep) const {
  if (keep < 1 || keep > components.size()) {
    throw InvalidArgument("PCA truncation to " + std::to_string(keep) + " of " +
                          std::to_string(components.size()) + " components");
  }
  PcaModel out;
  out.mean = mean;
  out.components.assign(components.begin(), components.begin() + static_cast<std::ptrdiff_t>(keep));
  out.explained_variance.assign(explained_variance.begin(),
                                explained_variance.begin() + static_cast<std::ptrdiff_t>(keep));
  return out;
}

FeatureMatrix pixel_features(const BandRaster& r) {
  const auto n = r.pixel_count();
  FeatureMatrix m(n, static_cast<std::size_t>(r.bands));
  for (int b = 0; b < r.bands; ++b) {
    const auto band = r.band(b);
    for (std::size_t i = 0; i < n; ++i) m.values[i * m.cols + b] = band[i];
  }
  return m;
}

FeatureMatrix select_rows(const FeatureMatrix& m, std::span<const std::size_t> rows) {
  FeatureMatrix out(rows.size(), m.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = m.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

namespace {

std::vector<double> column_means(const FeatureMatrix& m) {
  std::vector<double> mean(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const auto r = m.row(i);
    for (std::size_t j = 0; j < m.cols; ++j) mean[j] += r[j];
  }
  for (auto& v : mean) v /= static_cast<double>(m.rows);
  return mean;
}

linalg::Matrix sample_covariance(const FeatureMatrix& m, const std::vector<double>& mean) {
  const std::size_t d = m.cols;
  linalg::Matrix cov(d);
  std::vector<double> centred(d);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const auto r = m.row(i);
    for (std::size_t j = 0; j < d; ++j) centred[j] = r[j] - mean[j];
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = a; b < d; ++b) cov(a, b) += centred[a] * centred[b];
    }
  }
  const double denom = static_cast<double>(m.rows) - 1.0;
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      cov(a, b) /= denom;
      cov(b, a) = cov(a, b);
    }
  }
  return cov;
}

bool pixel_valid(const BandRaster& r, std::size_t i) {
  if (!r.nodata) return true;
  for (int b = 0; b < r.bands; ++b) {
    if (r.is_nodata(r.data[b * r.pixel_count() + i])) return false;
  }
  return true;
}

}  // namespace

PcaModel fit_pca(const FeatureMatrix& pixels, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > pixels.cols) {
    throw InvalidArgument("fit_pca: k must lie in [1, " + std::to_string(pixels.cols) + "]");
  }
  if (pixels.rows < static_cast<std::size_t>(k) + 1) {
    throw InvalidArgument("fit_pca: need at least k+1 = " + std::to_string(k + 1) +
                          " pixels, got " + std::to_string(pixels.rows));
  }
  PcaModel model;
  model.mean = column_means(pixels);
  const auto eig = linalg::symmetric_eigen(sample_covariance(pixels, model.mean));
  for (int c = 0; c < k; ++c) {
    std::vector<double> comp(pixels.cols);
    std::size_t arg = 0;
    for (std::size_t j = 0; j < pixels.cols; ++j) {
      comp[j] = eig.vectors(j, static_cast<std::size_t>(c));
      if (std::abs(comp[j]) > std::abs(comp[arg])) arg = j;
    }
    if (comp[arg] < 0.0) {
      for (auto& v : comp) v = -v;
    }
    model.components.push_back(std::move(comp));
    model.explained_variance.push_back(std::max(0.0, eig.values[static_cast<std::size_t>(c)]));
  }
  return model;
}

PcaModel fit_pca(const StackedInput& x, const SeedSet& seeds, const ExpansionConfig& cfg) {
  cfg.validate();
  const auto& r = x.raster();
  const FeatureMatrix all = pixel_features(r);
  std::vector<std::size_t> rows;
  if (cfg.fit_population == FitPopulation::kSeedsOnly) {
    for (const auto& c : seeds.coords) {
      const auto i = static_cast<std::size_t>(c.row) * r.width + c.col;
      if (pixel_valid(r, i)) rows.push_back(i);
    }
  } else {
    rows.reserve(all.rows);
    for (std::size_t i = 0; i < all.rows; ++i) {
      if (pixel_valid(r, i)) rows.push_back(i);
    }
  }
  if (cfg.subsample && *cfg.subsample < rows.size()) {
    Rng rng(cfg.subsample_seed);
    // Partial Fisher-Yates: the first `subsample` entries are the sample.
    for (std::size_t i = 0; i < *cfg.subsample; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.uniform_int(rows.size() - i));
      std::swap(rows[i], rows[j]);
    }
    rows.resize(*cfg.subsample);
    std::sort(rows.begin(), rows.end());
  }
  return fit_pca(select_rows(all, rows), cfg.k);
}

std::vector<double> project(const PcaModel& model, std::span<const double> pixel) {
  if (pixel.size() != model.dim()) {
    throw ShapeError("project: pixel dimension " + std::to_string(pixel.size()) +
                     " does not match model dimension " + std::to_string(model.dim()));
  }
  std::vector<double> out(model.k(), 0.0);
  for (std::size_t c = 0; c < model.k(); ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < pixel.size(); ++j) s += model.components[c][j] * (pixel[j] - model.mean[j]);
    out[c] = s;
  }
  return out;
}

FeatureMatrix project(const PcaModel& model, const FeatureMatrix& pixels) {
  if (pixels.cols != model.dim()) {
    throw ShapeError("project: pixel dimension " + std::to_string(pixels.cols) +
                     " does not match model dimension " + std::to_string(model.dim()));
  }
  FeatureMatrix out(pixels.rows, model.k());
  const std::size_t chunk = 4096;
  parallel_for(0, (pixels.rows + chunk - 1) / chunk, [&](std::size_t c) {
    const std::size_t lo = c * chunk;
    const std::size_t hi = std::min(pixels.rows, lo + chunk);
    for (std::size_t i = lo; i < hi; ++i) {
      const auto p = project(model, pixels.row(i));
      std::copy(p.begin(), p.end(), out.row(i).begin());
    }
  });
  return out;
}

// ---------------------------------------------------------------- Gaussian

double default_ridge(const FeatureMatrix& samples) {
  if (samples.rows < 2) return 0.0;
  const auto cov = sample_covariance(samples, column_means(samples));
  double trace = 0.0;
  for (std::size_t i = 0; i < cov.n; ++i) trace += cov(i, i);
  return kDefaultRelativeRidge * trace / static_cast<double>(samples.cols);
}

GaussianModel fit_gaussian(const FeatureMatrix& samples, double ridge) {
  if (samples.rows < 2) {
    throw InvalidArgument("fit_gaussian: need at least 2 seed samples, got " +
                          std::to_string(samples.rows));
  }
  if (!(ridge >= 0.0)) throw InvalidArgument("fit_gaussian: ridge must be >= 0");
  GaussianModel g;
  g.mu = column_means(samples);
  g.sigma = sample_covariance(samples, g.mu);
  for (std::size_t i = 0; i < g.sigma.n; ++i) g.sigma(i, i) += ridge;
  g.ridge = ridge;
  try {
    g.sigma_inv = linalg::spd_inverse(g.sigma);
  } catch (const NumericalError&) {
    throw NumericalError("covariance singular even after ridge " + std::to_string(ridge) +
                         " (seeds too few or identical?)");
  }
  return g;
}

double mahalanobis_squared(const GaussianModel& model, std::span<const double> p) {
  const std::size_t k = model.dim();
  if (p.size() != k) {
    throw ShapeError("mahalanobis: point dimension " + std::to_string(p.size()) +
                     " does not match model dimension " + std::to_string(k));
  }
  double d2 = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double di = p[i] - model.mu[i];
    double row = 0.0;
    for (std::size_t j = 0; j < k; ++j) row += model.sigma_inv(i, j) * (p[j] - model.mu[j]);
    d2 += di * row;
  }
  return std::max(0.0, d2);
}

double mahalanobis(const GaussianModel& model, std::span<const double> p) {
  return std::sqrt(mahalanobis_squared(model, p));
}

// ---------------------------------------------------------------- expansion

json to_json(const ExpansionStats& s) {
  return {{"seed_count", s.seed_count},   {"expanded_count", s.expanded_count},
          {"total_pixels", s.total_pixels}, {"coverage", s.coverage},
          {"coverage_percent", 100.0 * s.coverage}, {"tau_squared", s.tau_squared},
          {"k", s.k},                     {"alpha", s.alpha}};
}

namespace {

void check_seeds(const SeedSet& seeds, const BandRaster& r) {
  if (seeds.empty()) throw InvalidArgument("expansion needs a non-empty seed set");
  for (const auto& c : seeds.coords) {
    if (c.row < 0 || c.row >= r.height || c.col < 0 || c.col >= r.width) {
      throw InvalidArgument("seed (" + std::to_string(c.row) + ", " + std::to_string(c.col) +
                            ") lies outside the raster domain");
    }
  }
}

// Thresholds features (n x k) against a Gaussian fitted on the seed rows.
ExpansionResult threshold_features(const BandRaster& r, const FeatureMatrix& features,
                                   const SeedSet& seeds, const ExpansionConfig& cfg, int dof) {
  std::vector<std::size_t> seed_rows;
  for (const auto& c : seeds.coords) {
    const auto i = static_cast<std::size_t>(c.row) * r.width + c.col;
    if (pixel_valid(r, i)) seed_rows.push_back(i);
  }
  std::sort(seed_rows.begin(), seed_rows.end());
  seed_rows.erase(std::unique(seed_rows.begin(), seed_rows.end()), seed_rows.end());
  const FeatureMatrix seed_features = select_rows(features, seed_rows);
  const double ridge = cfg.ridge ? *cfg.ridge : default_ridge(seed_features);

  ExpansionResult res;
  res.gaussian = fit_gaussian(seed_features, ridge);
  const double tau2 = chi2_quantile(dof, cfg.alpha);

  res.mask = seeds.to_mask(r.width, r.height);
  const std::size_t n = features.rows;
  const std::size_t chunk = 4096;
  parallel_for(0, (n + chunk - 1) / chunk, [&](std::size_t c) {
    const std::size_t lo = c * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    for (std::size_t i = lo; i < hi; ++i) {
      if (res.mask.values[i] || !pixel_valid(r, i)) continue;
      if (mahalanobis_squared(res.gaussian, features.row(i)) < tau2) res.mask.values[i] = 1;
    }
  });

  auto& st = res.stats;
  st.seed_count = seeds.size();
  st.expanded_count = res.mask.popcount();
  st.total_pixels = r.pixel_count();
  st.coverage = static_cast<double>(st.expanded_count) / static_cast<double>(st.total_pixels);
  st.tau_squared = tau2;
  st.k = dof;
  st.alpha = cfg.alpha;
  return res;
}

}  // namespace

ExpansionResult expand_labels(const StackedInput& x, const SeedSet& seeds,
                              const ExpansionConfig& cfg, const PcaModel& pca) {
  cfg.validate();
  check_seeds(seeds, x.raster());
  const PcaModel model = pca.k() == static_cast<std::size_t>(cfg.k)
                             ? pca
                             : pca.truncated(static_cast<std::size_t>(cfg.k));
  const FeatureMatrix projected = project(model, pixel_features(x.raster()));
  auto res = threshold_features(x.raster(), projected, seeds, cfg, cfg.k);
  res.pca = model;
  return res;
}

ExpansionResult expand_labels(const StackedInput& x, const SeedSet& seeds,
                              const ExpansionConfig& cfg) {
  cfg.validate();
  check_seeds(seeds, x.raster());
  return expand_labels(x, seeds, cfg, fit_pca(x, seeds, cfg));
}

ExpansionResult gaussian_ci_classifier(const StackedInput& x, const SeedSet& seeds,
                                       const ExpansionConfig& cfg) {
  cfg.validate();
  check_seeds(seeds, x.raster());
  return threshold_features(x.raster(), pixel_features(x.raster()), seeds, cfg,
                            x.raster().bands);
}

}  // namespace changeseg
