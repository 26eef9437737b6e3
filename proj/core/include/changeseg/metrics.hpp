#pragma once

#include <cstdint>
#include <optional>

#include <json.hpp>

#include "changeseg/mask.hpp"
#include "changeseg/raster.hpp"

namespace changeseg {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  bool operator==(const ConfusionCounts&) const = default;
};

// UA = |P n G| / |P|, PA = |P n G| / |G|, IoU = |P n G| / |P u G|.
// std::nullopt marks a zero denominator.
struct MetricsReport {
  std::optional<double> ua;
  std::optional<double> pa;
  std::optional<double> iou;
  ConfusionCounts counts;
};

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& ref);
MetricsReport compute_metrics(const ConfusionCounts& counts);

// Undefined ratios serialize as null.
nlohmann::json to_json(const MetricsReport& r);

// Commission/omission rendering.
inline constexpr std::uint8_t kColorTp[3] = {128, 128, 128};
inline constexpr std::uint8_t kColorFp[3] = {255, 0, 0};
inline constexpr std::uint8_t kColorFn[3] = {0, 0, 255};
inline constexpr std::uint8_t kColorTn[3] = {255, 255, 255};

// Three-band raster with values 0..255 (R, G, B).
BandRaster difference_map(const LabelMask& pred, const LabelMask& ref);

}  // namespace changeseg
