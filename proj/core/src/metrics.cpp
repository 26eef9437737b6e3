#include "changeseg/metrics.hpp"

#include "changeseg/error.hpp"

namespace changeseg {

namespace {

void require_binary_pair(const LabelMask& pred, const LabelMask& ref, const char* what) {
  if (pred.width != ref.width || pred.height != ref.height ||
      pred.values.size() != ref.values.size()) {
    throw ShapeError(std::string(what) + ": prediction and reference dimensions differ");
  }
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    if (pred.values[i] > 1 || ref.values[i] > 1) {
      throw FormatError(std::string(what) + ": masks must be binary");
    }
  }
}

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& ref) {
  require_binary_pair(pred, ref, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const bool p = pred.values[i];
    const bool g = ref.values[i];
    if (p && g) {
      ++c.tp;
    } else if (p) {
      ++c.fp;
    } else if (g) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

MetricsReport compute_metrics(const ConfusionCounts& counts) {
  MetricsReport r;
  r.counts = counts;
  r.ua = ratio(counts.tp, counts.tp + counts.fp);
  r.pa = ratio(counts.tp, counts.tp + counts.fn);
  r.iou = ratio(counts.tp, counts.tp + counts.fp + counts.fn);
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return {{"ua", opt(r.ua)},
          {"pa", opt(r.pa)},
          {"iou", opt(r.iou)},
          {"counts",
           {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}, {"tn", r.counts.tn}}}};
}

BandRaster difference_map(const LabelMask& pred, const LabelMask& ref) {
  require_binary_pair(pred, ref, "difference_map");
  BandRaster out(pred.width, pred.height, 3);
  out.band_names = {"R", "G", "B"};
  const auto n = out.pixel_count();
  for (std::size_t i = 0; i < n; ++i) {
    const bool p = pred.values[i];
    const bool g = ref.values[i];
    const std::uint8_t* color = p && g ? kColorTp : p ? kColorFp : g ? kColorFn : kColorTn;
    for (int c = 0; c < 3; ++c) out.data[c * n + i] = color[c];
  }
  return out;
}

}  // namespace changeseg
