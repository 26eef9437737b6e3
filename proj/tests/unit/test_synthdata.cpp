#include <doctest.h>

#include <cmath>
#include <set>

#include "changeseg/error.hpp"
#include "changeseg/synthdata.hpp"

using namespace changeseg;

TEST_CASE("null disaster leaves post equal to pre") {
  SceneSpec s;
  s.spectral_shift = {0, 0, 0, 0};
  s.noise_sd = {0, 0, 0, 0};
  const auto scene = generate_scene(s);
  CHECK(scene.pre.data == scene.post.data);
}

TEST_CASE("default scene: truth size, band names, determinism") {
  const SceneSpec s;
  const auto a = generate_scene(s);
  const auto b = generate_scene(s);
  CHECK(a.pre == b.pre);
  CHECK(a.post == b.post);
  CHECK(a.truth == b.truth);
  const auto n = a.truth.popcount();
  CHECK(n > 0);
  CHECK(n < a.truth.size() / 2);
  CHECK(a.pre.band_names == std::vector<std::string>{"R", "G", "B", "NIR"});

  SceneSpec other = s;
  other.rng_seed = 43;
  CHECK(generate_scene(other).post.data != a.post.data);
}

TEST_CASE("mean post - pre over truth pixels matches the spectral shift") {
  const SceneSpec s;
  const auto scene = generate_scene(s);
  const auto np = scene.pre.pixel_count();
  const double n = static_cast<double>(scene.truth.popcount());
  for (int b = 0; b < 4; ++b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < np; ++i) {
      if (scene.truth.values[i]) sum += scene.post.data[b * np + i] - scene.pre.data[b * np + i];
    }
    CHECK(std::abs(sum / n - s.spectral_shift[b]) <= 3.0 * s.noise_sd[b] / std::sqrt(n));
  }
}

TEST_CASE("region_pixels plants exactly that many pixels") {
  SceneSpec s;
  s.region_pixels = 500;
  CHECK(generate_scene(s).truth.popcount() == 500u);
  s.region_pixels = 0;
  CHECK_THROWS_AS(s.validate(), InvalidArgument);
}

TEST_CASE("seed sampling") {
  SceneSpec s;
  s.region_pixels = 500;
  const auto truth = generate_scene(s).truth;
  const SeedSet tenth = sample_seeds(truth, 0.1, 1);
  CHECK(tenth.size() == 50);
  std::set<PixelCoord> unique(tenth.coords.begin(), tenth.coords.end());
  CHECK(unique.size() == 50);
  for (const auto& c : tenth.coords) CHECK(truth.at(c.row, c.col) == 1);
  CHECK(sample_seeds(truth, 0.1, 1) == tenth);
  CHECK(sample_seeds(truth, 0.1, 2) != tenth);
  CHECK(sample_seeds(truth, 1.0, 0) == SeedSet::from_mask(truth));
  CHECK(sample_seeds(truth, 0.06, 0).size() == 30);
  CHECK_THROWS_AS(sample_seeds(LabelMask(32, 32), 0.5, 0), InvalidArgument);
  CHECK_THROWS_AS(sample_seeds(truth, 0.0, 0), InvalidArgument);
}

TEST_CASE("spec validation and JSON") {
  SceneSpec s;
  s.width = 16;
  CHECK_THROWS_AS(generate_scene(s), InvalidArgument);
  SceneSpec t;
  t.rng_seed = 9;
  t.region_pixels = 100;
  const SceneSpec back = scene_spec_from_json(to_json(t));
  CHECK(back.rng_seed == 9);
  CHECK(back.region_pixels == t.region_pixels);
  CHECK(back.spectral_shift == t.spectral_shift);
  CHECK_THROWS_AS(scene_spec_from_json(nlohmann::json{{"colour", 1}}), InvalidArgument);
}
