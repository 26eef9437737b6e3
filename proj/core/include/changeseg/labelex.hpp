#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "changeseg/linalg.hpp"
#include "changeseg/mask.hpp"
#include "changeseg/raster.hpp"

namespace changeseg {

struct PixelCoord {
  int row = 0;
  int col = 0;
  auto operator<=>(const PixelCoord&) const = default;
};

// Analyst seed pixels. Sorted row-major and duplicate-free.
struct SeedSet {
  std::vector<PixelCoord> coords;

  std::size_t size() const { return coords.size(); }
  bool empty() const { return coords.empty(); }
  // Sorts and removes duplicates.
  void normalize();
  LabelMask to_mask(int width, int height) const;
  static SeedSet from_mask(const LabelMask& m);

  bool operator==(const SeedSet&) const = default;
};

// Polygon vertex in pixel units: x along columns, y along rows. Pixel
// (row, col) is represented by its centre at (x = col, y = row).
struct Point2 {
  double x = 0.0;
  double y = 0.0;
};
using Ring = std::vector<Point2>;
// Rings of one polygon; holes are handled by the even-odd rule.
using Polygon = std::vector<Ring>;

// Pixels whose centre is inside any polygon under the even-odd rule. Throws
// InvalidArgument for rings with fewer than 3 distinct vertices. A closing
// vertex equal to the first one is ignored.
SeedSet rasterize_polygons(std::span<const Polygon> polygons, int width, int height);

// GeoJSON FeatureCollection (or bare Polygon / MultiPolygon geometry) in
// pixel coordinates.
std::vector<Polygon> parse_geojson_polygons(const nlohmann::json& doc);
nlohmann::json polygons_to_geojson(std::span<const Polygon> polygons);

enum class FitPopulation { kAllPixels, kSeedsOnly };

struct ExpansionConfig {
  int k = 2;
  double alpha = 0.95;
  // Absolute ridge; when unset 1e-6 * trace(Sigma) / k is used.
  std::optional<double> ridge;
  FitPopulation fit_population = FitPopulation::kAllPixels;
  // Random subset of pixels used to fit the PCA.
  std::optional<std::size_t> subsample;
  std::uint64_t subsample_seed = 0;

  void validate() const;
};

inline constexpr double kDefaultRelativeRidge = 1e-6;

struct PcaModel {
  std::vector<double> mean;                 // d
  std::vector<std::vector<double>> components;  // k rows of length d
  std::vector<double> explained_variance;   // k, non-increasing

  std::size_t dim() const { return mean.size(); }
  std::size_t k() const { return components.size(); }
  // Keeps the leading `k` components.
  PcaModel truncated(std::size_t k) const;
};

struct GaussianModel {
  std::vector<double> mu;
  linalg::Matrix sigma;
  linalg::Matrix sigma_inv;
  double ridge = 0.0;

  std::size_t dim() const { return mu.size(); }
};

// Row-major n x d pixel feature matrix.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}
  std::span<const double> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
  std::span<double> row(std::size_t i) { return {values.data() + i * cols, cols}; }
};

// Pixel-major view of a raster: row (y * width + x) holds all bands.
FeatureMatrix pixel_features(const BandRaster& r);
FeatureMatrix select_rows(const FeatureMatrix& m, std::span<const std::size_t> rows);

// PCA of the pixel covariance (divisor n - 1), top `k` components, each
// component's largest-magnitude entry made positive.
PcaModel fit_pca(const FeatureMatrix& pixels, int k);
PcaModel fit_pca(const StackedInput& x, const SeedSet& seeds, const ExpansionConfig& cfg);

FeatureMatrix project(const PcaModel& model, const FeatureMatrix& pixels);
std::vector<double> project(const PcaModel& model, std::span<const double> pixel);

// Sample mean and covariance (divisor m - 1) plus ridge * I.
GaussianModel fit_gaussian(const FeatureMatrix& samples, double ridge);
// Ridge used when ExpansionConfig::ridge is unset.
double default_ridge(const FeatureMatrix& samples);

double mahalanobis_squared(const GaussianModel& model, std::span<const double> p);
double mahalanobis(const GaussianModel& model, std::span<const double> p);

struct ExpansionStats {
  std::size_t seed_count = 0;
  std::size_t expanded_count = 0;  // |L|, seeds included
  std::size_t total_pixels = 0;
  double coverage = 0.0;           // expanded_count / total_pixels
  double tau_squared = 0.0;
  int k = 0;
  double alpha = 0.0;
};
nlohmann::json to_json(const ExpansionStats& s);

struct ExpansionResult {
  LabelMask mask;
  ExpansionStats stats;
  PcaModel pca;
  GaussianModel gaussian;
};

// L = A u { p : d_M(P_p)^2 < tau^2 } with tau^2 = chi2_quantile(k, alpha).
ExpansionResult expand_labels(const StackedInput& x, const SeedSet& seeds,
                              const ExpansionConfig& cfg);
// Same, reusing a PCA already fitted on x (truncated to cfg.k).
ExpansionResult expand_labels(const StackedInput& x, const SeedSet& seeds,
                              const ExpansionConfig& cfg, const PcaModel& pca);

// Confidence-region classifier in the raw band space (no PCA); cfg.k is
// ignored and the degrees of freedom equal the band count.
ExpansionResult gaussian_ci_classifier(const StackedInput& x, const SeedSet& seeds,
                                       const ExpansionConfig& cfg);

}  // namespace changeseg
