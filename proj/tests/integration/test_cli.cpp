#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "changeseg/labelex.hpp"
#include "changeseg/mask.hpp"
#include "changeseg/patching.hpp"
#include "process.hpp"
#include "test_util.hpp"

using namespace changeseg;
using testing::run_process;
namespace fs = std::filesystem;

namespace {

const std::string kCli = CHANGESEG_CLI_PATH;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

testing::ProcessResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), kCli);
  return run_process(args);
}

SeedSet load_seeds(const fs::path& p, int w, int h) {
  return rasterize_polygons(parse_geojson_polygons(nlohmann::json::parse(slurp(p))), w, h);
}

// synth + stack into `dir`; returns the stack header path.
fs::path prepare_scene(const testing::TempDir& dir) {
  REQUIRE(cli({"synth", "--out-dir", (dir / "scene").string(), "--width", "64", "--height", "48", "--seed", "3",
               "--seed-fraction", "0.1"})
              .exit_code == 0);
  const auto r = cli({"stack", "--pre", (dir / "scene/pre.json").string(), "--post",
                      (dir / "scene/post.json").string(), "--out", (dir / "stack.json").string()});
  INFO(r.output);
  REQUIRE(r.exit_code == 0);
  return dir / "stack.json";
}

// Strips per-epoch wall_time from a JSON value, recursively.
void strip_wall_time(nlohmann::json& j) {
  if (j.is_object()) {
    j.erase("wall_time");
    for (auto& [k, v] : j.items()) strip_wall_time(v);
  } else if (j.is_array()) {
    for (auto& v : j) strip_wall_time(v);
  }
}

std::string normalized_jsonl(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line, out;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    strip_wall_time(j);
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace

TEST_CASE("synth -> stack -> expand -> eval workflow") {
  testing::TempDir dir("cli");
  const auto stack = prepare_scene(dir);
  const auto r = cli({"expand", "--stack", stack.string(), "--seeds", (dir / "scene/seeds.geojson").string(),
                      "--alpha", "0.99", "--pc", "2", "--out-mask", (dir / "mask.json").string(), "--out-stats",
                      (dir / "stats.json").string()});
  INFO(r.output);
  REQUIRE(r.exit_code == 0);
  const LabelMask mask = load_mask(dir / "mask.json");
  const LabelMask truth = load_mask(dir / "scene/truth.json");
  const auto seeds = load_seeds(dir / "scene/seeds.geojson", 64, 48);
  CHECK(is_subset(seeds.to_mask(64, 48), mask));
  CHECK(is_subset(seeds.to_mask(64, 48), truth));
  const auto stats = nlohmann::json::parse(slurp(dir / "stats.json"));
  CHECK(stats["seed_count"] == seeds.size());
  CHECK(stats["expanded_count"] == mask.popcount());

  const auto ev = cli({"eval", "--pred", (dir / "mask.json").string(), "--ref", (dir / "scene/truth.json").string(),
                       "--out", (dir / "eval.json").string()});
  INFO(ev.output);
  REQUIRE(ev.exit_code == 0);
  const auto report = nlohmann::json::parse(slurp(dir / "eval.json"));
  CHECK(report["iou"].get<double>() > 0.5);

  const auto diff = cli({"diff", "--pred", (dir / "mask.json").string(), "--ref",
                         (dir / "scene/truth.json").string(), "--out", (dir / "diff.png").string()});
  CHECK(diff.exit_code == 0);
  CHECK(slurp(dir / "diff.png").substr(1, 3) == "PNG");
}

TEST_CASE("repeated expand runs are byte-identical") {
  testing::TempDir dir("cli");
  const auto stack = prepare_scene(dir);
  for (const char* name : {"a", "b"}) {
    REQUIRE(cli({"expand", "--stack", stack.string(), "--seeds", (dir / "scene/seeds.geojson").string(),
                 "--out-mask", (dir / (std::string(name) + ".json")).string(), "--out-stats",
                 (dir / (std::string(name) + "_stats.json")).string()})
                .exit_code == 0);
  }
  CHECK(slurp(dir / "a.bin") == slurp(dir / "b.bin"));
  CHECK(slurp(dir / "a_stats.json") == slurp(dir / "b_stats.json"));
}

TEST_CASE("usage errors exit 2 and leave no outputs") {
  testing::TempDir dir("cli");
  const auto stack = prepare_scene(dir);
  const std::vector<std::string> base = {"expand", "--stack", stack.string(), "--seeds",
                                         (dir / "scene/seeds.geojson").string(), "--out-mask",
                                         (dir / "m.json").string(), "--out-stats", (dir / "s.json").string()};
  for (const auto& extra : std::vector<std::vector<std::string>>{{"--alpha", "1.5"}, {"--pc", "9"}, {"--bogus"}}) {
    auto args = base;
    args.insert(args.end(), extra.begin(), extra.end());
    const auto r = cli(args);
    INFO(r.output);
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("[usage]") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "m.json"));
    CHECK_FALSE(fs::exists(dir / "s.json"));
  }
  CHECK(cli({"expand", "--stack", stack.string()}).exit_code == 2);
  CHECK(cli({}).exit_code == 2);
}

TEST_CASE("runtime errors exit 1 with a stage tag and remove partial outputs") {
  testing::TempDir dir("cli");
  prepare_scene(dir);
  const auto r = cli({"stack", "--pre", (dir / "scene/truth.json").string(), "--post",
                      (dir / "scene/post.json").string(), "--out", (dir / "bad.json").string()});
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("[stack]") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "bad.json"));
  CHECK_FALSE(fs::exists(dir / "bad.bin"));

  // Seeds that rasterize to nothing make expansion fail after the stack loads.
  std::ofstream(dir / "empty.geojson") << R"({"type":"FeatureCollection","features":[]})";
  const auto e = cli({"expand", "--stack", (dir / "stack.json").string(), "--seeds",
                      (dir / "empty.geojson").string(), "--out-mask", (dir / "m.json").string(), "--out-stats",
                      (dir / "s.json").string()});
  INFO(e.output);
  CHECK(e.exit_code == 1);
  CHECK(e.output.rfind("[expand] ", 0) == 0);
  CHECK_FALSE(fs::exists(dir / "m.json"));
  CHECK_FALSE(fs::exists(dir / "m.bin"));
  CHECK_FALSE(fs::exists(dir / "s.json"));

  const auto missing = cli({"eval", "--pred", (dir / "nope.json").string(), "--ref",
                            (dir / "scene/truth.json").string()});
  CHECK(missing.exit_code == 1);
}

TEST_CASE("command-line values override the config file") {
  testing::TempDir dir("cli");
  const auto stack = prepare_scene(dir);
  const nlohmann::json cfg = {{"stack", stack.string()},
                              {"seeds", (dir / "scene/seeds.geojson").string()},
                              {"alpha", 0.5},
                              {"pc", 1},
                              {"out_stats", (dir / "cfg_stats.json").string()}};
  std::ofstream(dir / "expand.json") << cfg.dump();
  REQUIRE(cli({"expand", "--config", (dir / "expand.json").string(), "--out-mask", (dir / "c.json").string()})
              .exit_code == 0);
  auto stats = nlohmann::json::parse(slurp(dir / "cfg_stats.json"));
  CHECK(stats["alpha"] == 0.5);
  CHECK(stats["k"] == 1);
  REQUIRE(cli({"expand", "--config", (dir / "expand.json").string(), "--alpha", "0.9", "--out-mask",
               (dir / "d.json").string()})
              .exit_code == 0);
  stats = nlohmann::json::parse(slurp(dir / "cfg_stats.json"));
  CHECK(stats["alpha"] == 0.9);
  CHECK(stats["k"] == 1);

  std::ofstream(dir / "bad.json") << R"({"alpha": 0.5, "colour": 1})";
  CHECK(cli({"expand", "--config", (dir / "bad.json").string()}).exit_code == 2);
}

TEST_CASE("train and infer are reproducible apart from wall time") {
  testing::TempDir dir("cli");
  const auto stack = prepare_scene(dir);
  const nlohmann::json cfg = {
      {"stack", stack.string()},
      {"labels", (dir / "scene/truth.json").string()},
      {"tile_size", 16},
      {"model", {{"patch_size", 8}, {"embed_dim", 8}, {"depth", 1}, {"num_heads", 2}}},
      {"train", {{"max_epochs", 3}, {"batch_size", 4}, {"learning_rate", 0.01}}}};
  std::ofstream(dir / "train.json") << cfg.dump(2);
  for (const char* run : {"r1", "r2"}) {
    const auto r = cli({"train", (dir / "train.json").string(), "--output-dir", (dir / run).string()});
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
  }
  CHECK(slurp(dir / "r1/model.bin") == slurp(dir / "r2/model.bin"));
  CHECK(normalized_jsonl(dir / "r1/history.jsonl") == normalized_jsonl(dir / "r2/history.jsonl"));
  auto m1 = nlohmann::json::parse(slurp(dir / "r1/model.json"));
  auto m2 = nlohmann::json::parse(slurp(dir / "r2/model.json"));
  strip_wall_time(m1);
  strip_wall_time(m2);
  CHECK(m1 == m2);

  const auto inf = cli({"infer", "--checkpoint", (dir / "r1/model.json").string(), "--stack", stack.string(),
                        "--out-prefix", (dir / "pred").string()});
  INFO(inf.output);
  REQUIRE(inf.exit_code == 0);
  CHECK(load_mask(dir / "pred_mask.json").width == 64);

  // --epochs overrides the config file.
  REQUIRE(cli({"train", (dir / "train.json").string(), "--output-dir", (dir / "r3").string(), "--epochs", "1"})
              .exit_code == 0);
  std::istringstream h(slurp(dir / "r3/history.jsonl"));
  int lines = 0;
  for (std::string l; std::getline(h, l);) ++lines;
  CHECK(lines == 1);
}

TEST_CASE("patches writes tiles that reassemble to the input") {
  testing::TempDir dir("cli");
  const auto stack = prepare_scene(dir);
  const auto r = cli({"patches", "--input", stack.string(), "--size", "24", "--pad", "zero", "--out-dir",
                      (dir / "tiles").string()});
  INFO(r.output);
  REQUIRE(r.exit_code == 0);
  const BandRaster original = load_raster(stack);
  const PatchGrid grid = make_patch_grid(48, 64, 24, 24, PadMode::kZero);
  auto manifest = nlohmann::json::parse(slurp(dir / "tiles/grid.json"));
  std::vector<BandRaster> tiles;
  for (const auto& p : manifest["patches"]) tiles.push_back(load_raster(dir / "tiles" / p["header"].get<std::string>()));
  manifest.erase("patches");
  CHECK(manifest == to_json(grid));
  REQUIRE(tiles.size() == 6);
  CHECK(reassemble(tiles, grid) == original);

  const auto bad = cli({"patches", "--input", stack.string(), "--size", "4", "--out-dir", (dir / "t2").string()});
  CHECK(bad.exit_code == 1);
  CHECK(bad.output.rfind("[patches] ", 0) == 0);
  CHECK_FALSE(fs::exists(dir / "t2"));
}
