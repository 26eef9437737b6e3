// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes.

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "changeseg/chi2.hpp"
#include "changeseg/labelex.hpp"
#include "changeseg/linalg.hpp"
#include "changeseg/losses.hpp"
#include "changeseg/metrics.hpp"
#include "changeseg/patching.hpp"
#include "changeseg/pipeline.hpp"
#include "changeseg/rle.hpp"
#include "changeseg/rng.hpp"
#include "changeseg/service.hpp"
#include "changeseg/synthdata.hpp"
#include "changeseg/training.hpp"
#include "chi2_oracle.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "process.hpp"
#include "test_util.hpp"

using namespace changeseg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// ------------------------------------------------------------------ A1

Outcome a1_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst32 = 0.0, worst64 = 0.0;
  std::string where32, where64;
  std::size_t groups = 0;
  for (const auto& cfg : testing::gradcheck_configs()) {
    const std::string name = "decoder " + to_string(cfg.decoder) + " depth " + std::to_string(cfg.depth);
    for (const auto& g : testing::directional_gradcheck<float>(cfg, 3e-2, 17, 1.0, true, 3e-3, true)) {
      ++groups;
      if (g.rel_error > worst32) {
        worst32 = g.rel_error;
        where32 = name + " " + g.tensor;
      }
    }
    for (std::uint64_t seed : {3u, 17u, 29u}) {
      for (const auto& g : testing::directional_gradcheck<double>(cfg, 1e-3, seed, 1.0, true, 1e-6)) {
        if (g.rel_error > worst64) {
          worst64 = g.rel_error;
          where64 = name + " " + g.tensor;
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst32 < 1e-3 && worst64 < 1e-6 && secs < 60.0,
          fmt("%zu parameter groups; worst f32 %.2e (%s) < 1e-3; worst f64 %.2e (%s) < 1e-6; %.1f s < 60 s", groups,
              worst32, where32.c_str(), worst64, where64.c_str(), secs)};
}

// ------------------------------------------------------------------ A2

Outcome a2_metrics() {
  Rng rng(2024);
  std::size_t mismatches = 0;
  double worst = 0.0;
  auto compare = [&](const std::optional<double>& got, const std::optional<double>& want) {
    if (got.has_value() != want.has_value()) {
      ++mismatches;
    } else if (got) {
      worst = std::max(worst, std::abs(*got - *want));
      if (std::abs(*got - *want) > 1e-12) ++mismatches;
    }
  };
  for (int t = 0; t < 1000; ++t) {
    const LabelMask p = testing::random_mask(16, 16, rng);
    const LabelMask g = testing::random_mask(16, 16, rng);
    const auto naive = testing::naive_confusion(p, g);
    const auto c = confusion(p, g);
    if (c.tp != naive.tp || c.fp != naive.fp || c.fn != naive.fn || c.tn != naive.tn) ++mismatches;
    const auto m = compute_metrics(c);
    compare(m.ua, testing::naive_ratio(naive.tp, naive.tp + naive.fp));
    compare(m.pa, testing::naive_ratio(naive.tp, naive.tp + naive.fn));
    compare(m.iou, testing::naive_ratio(naive.tp, naive.tp + naive.fp + naive.fn));
  }
  return {mismatches == 0, fmt("1000 random 16x16 pairs; %zu mismatches; worst ratio difference %.1e", mismatches,
                               worst)};
}

// ------------------------------------------------------------------ A3

Outcome a3_chi2() {
  double worst_closed = 0.0, worst_oracle = 0.0;
  for (double a : {0.5, 0.9, 0.95, 0.99}) {
    worst_closed = std::max(worst_closed, std::abs(chi2_quantile(2, a) + 2.0 * std::log(1.0 - a)));
  }
  for (int k = 1; k <= 16; ++k) {
    for (double a : {0.9, 0.95, 0.99}) {
      worst_oracle = std::max(worst_oracle, std::abs(chi2_quantile(k, a) - testing::chi2_quantile_bisect(k, a)));
    }
  }
  return {worst_closed < 1e-9 && worst_oracle < 1e-6,
          fmt("k=2 closed form max error %.1e < 1e-9; 48 (k, alpha) vs bisection oracle max error %.1e < 1e-6",
              worst_closed, worst_oracle)};
}

// ------------------------------------------------------------------ A4

Outcome a4_expansion() {
  SceneSpec spec;
  spec.rng_seed = 42;
  spec.region_pixels = 500;
  const auto scene = generate_scene(spec);
  const SeedSet seeds = sample_seeds(scene.truth, 0.06, 42);
  const auto features = pipeline::expansion_features(stack(scene.pre, scene.post));
  const PcaModel pca = pipeline::full_pca(features);

  std::vector<LabelMask> masks;
  for (double a : {0.5, 0.9, 0.95, 0.99}) masks.push_back(pipeline::expand(features, seeds, a, 2, &pca).mask);
  bool monotone = true;
  for (std::size_t i = 1; i < masks.size(); ++i) monotone = monotone && is_subset(masks[i - 1], masks[i]);

  const LabelMask& top = masks.back();
  std::size_t planted_hit = 0, background_hit = 0;
  const std::size_t planted = scene.truth.popcount();
  const std::size_t background = scene.truth.size() - planted;
  for (std::size_t i = 0; i < top.size(); ++i) {
    if (!top.values[i]) continue;
    (scene.truth.values[i] ? planted_hit : background_hit)++;
  }
  const double recall = static_cast<double>(planted_hit) / planted;
  const double bg = static_cast<double>(background_hit) / background;
  return {planted == 500 && seeds.size() == 30 && recall >= 0.95 && bg <= 0.05 && monotone,
          fmt("%zu planted, %zu seeds; alpha 0.99: %.2f%% of planted >= 95%%, %.3f%% of background <= 5%%; "
              "nested over alpha {0.5, 0.9, 0.95, 0.99}: %s",
              planted, seeds.size(), 100.0 * recall, 100.0 * bg, monotone ? "yes" : "no")};
}

// ------------------------------------------------------------------ A5

Outcome a5_calibration() {
  bool ok = true;
  std::string detail;
  for (int k : {2, 8}) {
    // Fit to correlated data, then sample the fitted model.
    Rng rng(5, static_cast<std::uint64_t>(k));
    FeatureMatrix data(400, k);
    for (std::size_t i = 0; i < data.rows; ++i) {
      double common = rng.normal();
      for (int j = 0; j < k; ++j) data.row(i)[j] = (j + 1) * 0.5 * rng.normal() + 0.8 * common + j;
    }
    const GaussianModel g = fit_gaussian(data, 0.0);
    linalg::Matrix l;
    if (!linalg::cholesky(g.sigma, l)) return {false, "fitted covariance is not positive definite"};
    const int n = 100000;
    std::vector<double> d2(n);
    std::vector<double> z(k), p(k);
    for (int s = 0; s < n; ++s) {
      for (int j = 0; j < k; ++j) z[j] = rng.normal();
      for (int i = 0; i < k; ++i) {
        p[i] = g.mu[i];
        for (int j = 0; j <= i; ++j) p[i] += l(i, j) * z[j];
      }
      d2[s] = mahalanobis_squared(g, p);
    }
    for (double a : {0.9, 0.95, 0.99}) {
      const double tau2 = chi2_quantile(k, a);
      const double inside =
          static_cast<double>(std::count_if(d2.begin(), d2.end(), [&](double v) { return v <= tau2; })) / n;
      const double err_pp = 100.0 * std::abs(inside - a);
      ok = ok && err_pp <= 1.0;
      detail += fmt("%sk=%d a=%.2f: %.2f%%", detail.empty() ? "" : "; ", k, a, 100.0 * inside);
    }
  }
  return {ok, "100000 samples per k; " + detail + " (each within 1 pp)"};
}

// ------------------------------------------------------------------ A6 / A9

struct DeskRun {
  double iou = 0.0;
  TrainHistory history;
};

struct DeskScale {
  bool ran = false;
  std::string error;
  std::size_t seed_pixels = 0;
  std::size_t total_pixels = 0;
  double snr = 0.0;
  int max_epochs = 50;
  DeskRun bce, two_stage;
  double seconds = 0.0;
};

DeskScale run_desk_scale() {
  DeskScale d;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    SceneSpec spec;
    spec.rng_seed = 42;
    spec.width = 256;
    spec.height = 256;
    d.snr = 1e9;
    for (int b = 0; b < 4; ++b) d.snr = std::min(d.snr, std::abs(spec.spectral_shift[b]) / spec.noise_sd[b]);
    const auto scene = generate_scene(spec);
    const StackedInput st = stack(scene.pre, scene.post);
    const SeedSet seeds = sample_seeds(scene.truth, 0.1, 42);
    d.seed_pixels = seeds.size();
    d.total_pixels = scene.truth.size();
    const auto labels = pipeline::expand(pipeline::expansion_features(st), seeds, 0.95, 2).mask;

    testing::TempDir dir("a6");
    save_raster(st.raster(), dir / "stack.json");
    save_mask(labels, dir / "labels.json");
    auto run = [&](const char* loss) {
      const json j = {{"stack", "stack.json"},
                      {"labels", "labels.json"},
                      {"output_dir", std::string("run_") + loss},
                      {"tile_size", 32},
                      {"model", {{"patch_size", 8}, {"embed_dim", 32}, {"depth", 2}, {"num_heads", 2}, {"decoder", "A"}}},
                      {"train",
                       {{"loss", loss},
                        {"max_epochs", d.max_epochs},
                        {"batch_size", 8},
                        {"learning_rate", 1e-3},
                        {"rng_seed", 42}}}};
      const auto out = pipeline::run_training(pipeline::PipelineConfig::from_json(j, dir.path()));
      const auto pred = threshold_mask(pipeline::infer_scene(out.checkpoint, st), kBinarizeThreshold);
      return DeskRun{compute_metrics(confusion(pred, scene.truth)).iou.value_or(0.0), out.history};
    };
    d.bce = run("bce");
    d.two_stage = run("two_stage");
    d.ran = true;
  } catch (const std::exception& e) {
    d.error = e.what();
  }
  d.seconds = seconds_since(t0);
  return d;
}

Outcome a6_desk_scale(const DeskScale& d) {
  if (!d.ran) return {false, "run failed: " + d.error};
  const double seed_pct = 100.0 * d.seed_pixels / d.total_pixels;
  const bool ok = d.snr >= 5.0 && seed_pct < 2.0 && d.bce.history.epochs.size() <= 50 &&
                  d.two_stage.history.epochs.size() <= 50 && d.bce.iou >= 0.80 &&
                  d.two_stage.iou >= d.bce.iou - 0.02 && d.seconds <= 600.0;
  return {ok, fmt("SNR %.1f; seeds %.2f%% of pixels; BCE IoU %.4f >= 0.80 (%zu epochs); two-stage IoU %.4f >= %.4f "
                  "(%zu epochs); %.1f s <= 600 s",
                  d.snr, seed_pct, d.bce.iou, d.bce.history.epochs.size(), d.two_stage.iou, d.bce.iou - 0.02,
                  d.two_stage.history.epochs.size(), d.seconds)};
}

Outcome a9_stage_switch(const DeskScale& d) {
  if (!d.ran) return {false, "seed-42 training run failed: " + d.error};
  const TrainConfig defaults;
  const auto series = d.two_stage.history.val_series(1);
  std::optional<int> replay;
  for (std::size_t n = 1; n <= series.size() && !replay; ++n) {
    if (detect_plateau(std::span(series).first(n), defaults.plateau_rel_delta, defaults.plateau_patience)) {
      replay = static_cast<int>(n) - 1;
    }
  }
  const auto& recorded = d.two_stage.history.stage_switch_epoch;
  return {recorded.has_value() && recorded == replay,
          fmt("recorded stage_switch_epoch %d; replayed first plateau on %zu-epoch stage-1 series at %d",
              recorded.value_or(-1), series.size(), replay.value_or(-1))};
}

// ------------------------------------------------------------------ A7

Outcome a7_patches() {
  Rng rng(77);
  int non_divisible = 0, failures = 0, fallbacks = 0;
  for (int t = 0; t < 50; ++t) {
    const int w = t == 0 ? 300 : 1 + static_cast<int>(rng.uniform_int(300));
    const int h = t == 0 ? 200 : 1 + static_cast<int>(rng.uniform_int(300));
    const int ph = kMinPatchSize + static_cast<int>(rng.uniform_int(120));
    const int pw = rng.uniform_int(2) ? ph : kMinPatchSize + static_cast<int>(rng.uniform_int(120));
    const PadMode mode = rng.uniform_int(2) ? PadMode::kReflect : PadMode::kZero;
    BandRaster r(w, h, 1 + static_cast<int>(rng.uniform_int(8)));
    for (auto& v : r.data) v = static_cast<float>(rng.normal());
    if (w % pw || h % ph) ++non_divisible;
    const PatchSet s = extract_patches(r, ph, pw, mode);
    if (s.fell_back_to_zero) ++fallbacks;
    if (!(reassemble(s.patches, s.grid) == r)) ++failures;
  }
  return {failures == 0 && non_divisible > 0,
          fmt("50 combinations (%d non-divisible, %d reflect->zero fallbacks); %d not bit-exact", non_divisible,
              fallbacks, failures)};
}

// ------------------------------------------------------------------ A8

Outcome a8_losses() {
  Rng rng(88);
  double worst_perfect = 0.0;
  for (int t = 0; t < 20; ++t) {
    const LabelMask m = t == 0 ? LabelMask(16, 16) : testing::random_mask(16, 16, rng);
    const std::vector<double> y(m.values.begin(), m.values.end());
    worst_perfect = std::max({worst_perfect, std::abs(dice_loss(y, y).value), std::abs(iou_loss(y, y).value)});
  }
  double worst_bce = 0.0;
  for (int t = 0; t < 20; ++t) {
    const LabelMask m = testing::random_mask(16, 16, rng);
    const std::vector<double> y(m.values.begin(), m.values.end());
    const std::vector<double> half(y.size(), 0.5);
    worst_bce = std::max(worst_bce, std::abs(bce(half, y).value - std::numbers::ln2));
  }
  double worst_iou = 0.0;
  int pairs = 0;
  while (pairs < 100) {
    const LabelMask p = testing::random_mask(16, 16, rng);
    const LabelMask g = testing::random_mask(16, 16, rng);
    const auto iou = compute_metrics(confusion(p, g)).iou;
    if (!iou) continue;  // both empty: IoU undefined
    const std::vector<double> x(p.values.begin(), p.values.end());
    const std::vector<double> y(g.values.begin(), g.values.end());
    worst_iou = std::max(worst_iou, std::abs(iou_loss(x, y, 0.0).value - (1.0 - *iou)));
    ++pairs;
  }
  return {worst_perfect == 0.0 && worst_bce <= 1e-6 && worst_iou <= 1e-9,
          fmt("perfect Dice/IoU max %.1e; uniform-0.5 BCE - ln 2 max %.1e <= 1e-6; "
              "iou_loss(smooth=0) vs 1 - IoU on 100 pairs max %.1e <= 1e-9",
              worst_perfect, worst_bce, worst_iou)};
}

// ------------------------------------------------------------------ A10

Outcome a10_parity() {
  testing::TempDir dir("a10");
  SceneSpec spec;
  spec.width = 128;
  spec.height = 96;
  spec.rng_seed = 10;
  const auto scene = generate_scene(spec);
  save_raster(scene.pre, dir / "pre.json");
  save_raster(scene.post, dir / "post.json");
  const std::string cli = CHANGESEG_CLI_PATH;
  auto r = testing::run_process({cli, "stack", "--pre", (dir / "pre.json").string(), "--post",
                                 (dir / "post.json").string(), "--out", (dir / "stack.json").string()});
  if (r.exit_code != 0) return {false, "changeseg stack failed: " + r.output};

  AnnotationService service(ServiceOptions{dir.path(), "127.0.0.1", 0});
  const int port = service.start();
  httplib::Client client("127.0.0.1", port);
  const auto created =
      client.Post("/api/sessions", json{{"pre", "pre.json"}, {"post", "post.json"}}.dump(), "application/json");
  if (!created || created->status != 200) return {false, "session creation failed"};
  const std::string id = json::parse(created->body)["session_id"];

  struct Combo {
    double seed_fraction;
    double alpha;
    int pc;
  };
  int identical = 0;
  std::string detail;
  const std::vector<Combo> combos = {{0.05, 0.9, 2}, {0.1, 0.95, 3}, {0.2, 0.99, 8}};
  for (std::size_t c = 0; c < combos.size(); ++c) {
    const auto& combo = combos[c];
    const SeedSet seeds = sample_seeds(scene.truth, combo.seed_fraction, c);
    std::vector<Polygon> squares;
    for (const auto& p : seeds.coords) {
      const double x = p.col - 0.5, y = p.row - 0.5;
      squares.push_back({Ring{{x, y}, {x + 1, y}, {x + 1, y + 1}, {x, y + 1}}});
    }
    const std::string geojson = polygons_to_geojson(squares).dump();
    const auto seeds_path = dir / ("seeds" + std::to_string(c) + ".geojson");
    std::ofstream(seeds_path) << geojson;
    const auto mask_path = dir / ("mask" + std::to_string(c) + ".json");
    r = testing::run_process({cli, "expand", "--stack", (dir / "stack.json").string(), "--seeds",
                              seeds_path.string(), "--alpha", fmt("%.17g", combo.alpha), "--pc",
                              std::to_string(combo.pc), "--out-mask", mask_path.string(), "--out-stats",
                              (dir / ("stats" + std::to_string(c) + ".json")).string()});
    if (r.exit_code != 0) return {false, "changeseg expand failed: " + r.output};

    const auto put = client.Put("/api/sessions/" + id + "/seeds", geojson, "application/json");
    if (!put || put->status != 200) return {false, "PUT seeds failed"};
    const auto got = client.Get(fmt("/api/sessions/%s/expansion?alpha=%.17g&pc=%d", id.c_str(), combo.alpha,
                                    combo.pc));
    if (!got || got->status != 200) return {false, "GET expansion failed"};
    const LabelMask served = rle_decode(rle_from_json(json::parse(got->body)["mask"]));
    const std::string served_bytes = raster_payload_bytes(mask_to_raster(served));
    const bool same = served_bytes == slurp(fs::path(mask_path).replace_extension(".bin"));
    identical += same;
    detail += fmt("%s(%zu seeds, a=%.2f, pc=%d) %s", c ? "; " : "", seeds.size(), combo.alpha, combo.pc,
                  same ? "identical" : "DIFFERENT");
  }
  service.stop();
  return {identical == 3, detail + "; no UI involved"};
}

}  // namespace

int main() {
  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"A1", a1_gradients}, {"A2", a2_metrics}, {"A3", a3_chi2}, {"A4", a4_expansion}, {"A5", a5_calibration}};
  DeskScale desk;
  bool desk_done = false;
  auto desk_once = [&]() -> const DeskScale& {
    if (!desk_done) {
      desk = run_desk_scale();
      desk_done = true;
    }
    return desk;
  };
  criteria.emplace_back("A6", [&] { return a6_desk_scale(desk_once()); });
  criteria.emplace_back("A7", a7_patches);
  criteria.emplace_back("A8", a8_losses);
  criteria.emplace_back("A9", [&] { return a9_stage_switch(desk_once()); });
  criteria.emplace_back("A10", a10_parity);

  int failed = 0;
  for (const auto& [id, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%-3s %s  %s\n", id.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
