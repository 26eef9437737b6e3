#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "changeseg/mask.hpp"

namespace changeseg {

// Run lengths over row-major order, alternating zeros and ones, starting
// with a (possibly empty) run of zeros.
struct RleMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint64_t> runs;

  bool operator==(const RleMask&) const = default;
};

RleMask rle_encode(const LabelMask& m);
// Throws FormatError when the runs do not sum to width * height.
LabelMask rle_decode(const RleMask& r);

nlohmann::json to_json(const RleMask& r);
RleMask rle_from_json(const nlohmann::json& j);

}  // namespace changeseg
