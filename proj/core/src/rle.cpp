#include "changeseg/rle.hpp"

#include "changeseg/error.hpp"

namespace changeseg {

RleMask rle_encode(const LabelMask& m) {
  RleMask r{m.width, m.height, {}};
  std::uint8_t current = 0;
  std::uint64_t run = 0;
  for (std::uint8_t v : m.values) {
    const std::uint8_t b = v ? 1 : 0;
    if (b != current) {
      r.runs.push_back(run);
      run = 0;
      current = b;
    }
    ++run;
  }
  r.runs.push_back(run);
  return r;
}

LabelMask rle_decode(const RleMask& r) {
  if (r.width < 0 || r.height < 0) throw FormatError("RLE mask has negative dimensions");
  LabelMask m(r.width, r.height);
  std::uint64_t pos = 0;
  std::uint8_t value = 0;
  for (std::uint64_t run : r.runs) {
    if (run > m.size() - pos) throw FormatError("RLE runs exceed the mask size");
    std::fill_n(m.values.begin() + static_cast<std::ptrdiff_t>(pos), run, value);
    pos += run;
    value ^= 1;
  }
  if (pos != m.size()) {
    throw FormatError("RLE runs cover " + std::to_string(pos) + " pixels, mask has " + std::to_string(m.size()));
  }
  return m;
}

nlohmann::json to_json(const RleMask& r) {
  return {{"width", r.width}, {"height", r.height}, {"order", "row-major"}, {"start", 0}, {"runs", r.runs}};
}

RleMask rle_from_json(const nlohmann::json& j) {
  try {
    return {j.at("width").get<int>(), j.at("height").get<int>(), j.at("runs").get<std::vector<std::uint64_t>>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed RLE mask: ") + e.what());
  }
}

}  // namespace changeseg
