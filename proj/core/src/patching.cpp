#include "changeseg/patching.hpp"

#include <string>

#include "changeseg/error.hpp"

namespace changeseg {

PadMode parse_pad_mode(const std::string& s) {
  if (s == "reflect") return PadMode::kReflect;
  if (s == "zero") return PadMode::kZero;
  throw InvalidArgument("unknown pad mode '" + s + "' (expected reflect|zero)");
}

std::string to_string(PadMode m) { return m == PadMode::kReflect ? "reflect" : "zero"; }

nlohmann::json to_json(const PatchGrid& g) {
  return {{"patch_h", g.patch_h}, {"patch_w", g.patch_w},   {"rows", g.rows},
          {"cols", g.cols},       {"orig_h", g.orig_h},     {"orig_w", g.orig_w},
          {"pad_mode", to_string(g.pad_mode)}, {"count", g.count()},
          {"padded_h", g.padded_h()}, {"padded_w", g.padded_w()}};
}

PatchGrid make_patch_grid(int height, int width, int patch_h, int patch_w, PadMode pad_mode) {
  if (patch_h < kMinPatchSize || patch_w < kMinPatchSize) {
    throw InvalidArgument("patch dimensions must be >= " + std::to_string(kMinPatchSize));
  }
  if (height < 1 || width < 1) throw InvalidArgument("cannot tile an empty raster");
  PatchGrid g;
  g.patch_h = patch_h;
  g.patch_w = patch_w;
  g.rows = (height + patch_h - 1) / patch_h;
  g.cols = (width + patch_w - 1) / patch_w;
  g.orig_h = height;
  g.orig_w = width;
  g.pad_mode = pad_mode;
  return g;
}

namespace {

// Mirror index without repeating the edge; caller guarantees i <= 2n - 2.
int reflect_index(int i, int n) { return i < n ? i : 2 * (n - 1) - i; }

bool can_reflect(int size, int padded) { return padded - size <= size - 1; }

}  // namespace

BandRaster pad_to_grid(const BandRaster& r, const PatchGrid& grid) {
  const int ph = grid.padded_h();
  const int pw = grid.padded_w();
  if (ph == r.height && pw == r.width) return r;
  const bool reflect = grid.pad_mode == PadMode::kReflect && can_reflect(r.height, ph) &&
                       can_reflect(r.width, pw);
  BandRaster out(pw, ph, r.bands, 0.0f);
  out.band_names = r.band_names;
  out.nodata = r.nodata;
  for (int b = 0; b < r.bands; ++b) {
    for (int y = 0; y < ph; ++y) {
      for (int x = 0; x < pw; ++x) {
        if (y < r.height && x < r.width) {
          out.at(b, y, x) = r.at(b, y, x);
        } else if (reflect) {
          out.at(b, y, x) = r.at(b, reflect_index(y, r.height), reflect_index(x, r.width));
        }
      }
    }
  }
  return out;
}

PatchSet extract_patches(const BandRaster& r, int patch_h, int patch_w, PadMode pad_mode) {
  r.validate();
  PatchSet set;
  set.grid = make_patch_grid(r.height, r.width, patch_h, patch_w, pad_mode);
  if (pad_mode == PadMode::kReflect &&
      (!can_reflect(r.height, set.grid.padded_h()) || !can_reflect(r.width, set.grid.padded_w()))) {
    set.grid.pad_mode = PadMode::kZero;
    set.fell_back_to_zero = true;
  }
  const BandRaster canvas = pad_to_grid(r, set.grid);
  set.patches.reserve(static_cast<std::size_t>(set.grid.count()));
  for (int gr = 0; gr < set.grid.rows; ++gr) {
    for (int gc = 0; gc < set.grid.cols; ++gc) {
      BandRaster p(patch_w, patch_h, r.bands);
      p.band_names = r.band_names;
      p.nodata = r.nodata;
      for (int b = 0; b < r.bands; ++b) {
        for (int y = 0; y < patch_h; ++y) {
          const float* src = &canvas.data[canvas.index(b, gr * patch_h + y, gc * patch_w)];
          std::copy(src, src + patch_w, &p.data[p.index(b, y, 0)]);
        }
      }
      set.patches.push_back(std::move(p));
    }
  }
  return set;
}

BandRaster reassemble(const std::vector<BandRaster>& patches, const PatchGrid& grid) {
  if (patches.size() != static_cast<std::size_t>(grid.count())) {
    throw ShapeError("reassemble: expected " + std::to_string(grid.count()) + " patches, got " +
                     std::to_string(patches.size()));
  }
  if (patches.empty()) throw ShapeError("reassemble: empty grid");
  const int bands = patches.front().bands;
  for (const auto& p : patches) {
    if (p.width != grid.patch_w || p.height != grid.patch_h || p.bands != bands) {
      throw ShapeError("reassemble: patch shape does not match the grid");
    }
  }
  BandRaster out(grid.orig_w, grid.orig_h, bands);
  out.band_names = patches.front().band_names;
  out.nodata = patches.front().nodata;
  for (int gr = 0; gr < grid.rows; ++gr) {
    for (int gc = 0; gc < grid.cols; ++gc) {
      const auto& p = patches[static_cast<std::size_t>(gr * grid.cols + gc)];
      for (int b = 0; b < bands; ++b) {
        for (int y = 0; y < grid.patch_h; ++y) {
          const int oy = gr * grid.patch_h + y;
          if (oy >= grid.orig_h) break;
          for (int x = 0; x < grid.patch_w; ++x) {
            const int ox = gc * grid.patch_w + x;
            if (ox >= grid.orig_w) break;
            out.at(b, oy, ox) = p.at(b, y, x);
          }
        }
      }
    }
  }
  return out;
}

}  // namespace changeseg
