#include <doctest.h>

#include <cmath>
#include <numeric>

#include "changeseg/error.hpp"
#include "changeseg/rng.hpp"
#include "changeseg/vit.hpp"
#include "gradcheck.hpp"

using namespace changeseg;

namespace {

// Shape arithmetic written out independently of param_layout().
std::size_t closed_form_count(int c, int ps, int d, int depth, int mlp, int tokens) {
  const std::size_t patch = static_cast<std::size_t>(d) * c * ps * ps + d;
  const std::size_t pos = static_cast<std::size_t>(tokens) * d;
  const std::size_t norms = 2 * (2 * static_cast<std::size_t>(d));
  // q, v and output projections carry a bias; the key projection does not.
  const std::size_t attn = 4 * static_cast<std::size_t>(d) * d + 3 * d;
  const std::size_t hid = static_cast<std::size_t>(d) * mlp;
  const std::size_t ffn = (hid * d + hid) + (d * hid + d);
  const std::size_t decoder_a = static_cast<std::size_t>(d) * 9 + 1;
  return patch + pos + depth * (norms + attn + ffn) + decoder_a;
}

ViTConfig small(DecoderKind dec, int ps, int size, int depth = 1) {
  ViTConfig c;
  c.in_channels = 2;
  c.patch_size = ps;
  c.embed_dim = 8;
  c.depth = depth;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.decoder = dec;
  c.input_h = size;
  c.input_w = size;
  return c;
}

}  // namespace

TEST_CASE("desk-scale parameter count matches closed form") {
  const ViTConfig cfg = ViTConfig::desk_scale(64);
  CHECK(closed_form_count(8, 8, 32, 2, 4, 64) == 44097);
  CHECK(parameter_count(cfg) == 44097);
  CHECK(init_params<float>(cfg).parameter_count() == 44097);
}

TEST_CASE("default skip depths are evenly spaced and end at the last block") {
  CHECK(ViTConfig::default_skip_depths(6) == std::vector<int>{1, 2, 4, 6});
  CHECK(ViTConfig::default_skip_depths(2) == std::vector<int>{1, 2});
  CHECK(ViTConfig::default_skip_depths(1) == std::vector<int>{1});
  CHECK(ViTConfig::default_skip_depths(12) == std::vector<int>{1, 4, 8, 12});
}

TEST_CASE("config validation") {
  ViTConfig c = small(DecoderKind::kA, 4, 8);
  CHECK_NOTHROW(c.validate());
  c.embed_dim = 9;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = small(DecoderKind::kA, 4, 10);
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = small(DecoderKind::kB, 8, 16);
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = small(DecoderKind::kB, 16, 32);
  CHECK_NOTHROW(c.validate());
  c = small(DecoderKind::kC, 4, 8, 3);
  c.skip_depths = {1, 3};
  CHECK_NOTHROW(c.validate());
  c.skip_depths = {3, 1};
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c.skip_depths = {1, 4};
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c.skip_depths = {1, 2, 3};
  c.patch_size = 2;
  c.input_h = c.input_w = 8;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);  // ladder x4 > patch 2
}

TEST_CASE("config JSON round trip rejects unknown keys") {
  ViTConfig c = small(DecoderKind::kC, 4, 8, 2);
  c.skip_depths = {1, 2};
  c.rng_seed = 99;
  CHECK(vit_config_from_json(to_json(c)) == c);
  auto j = to_json(c);
  j["bogus"] = 1;
  CHECK_THROWS_AS(vit_config_from_json(j), InvalidArgument);
}

TEST_CASE("init is deterministic and follows the stated convention") {
  const ViTConfig cfg = ViTConfig::desk_scale(32);
  const auto a = init_params<float>(cfg);
  const auto b = init_params<float>(cfg);
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (std::size_t i = 0; i < a.tensors.size(); ++i) CHECK(a.tensors[i].values == b.tensors[i].values);
  ViTConfig other = cfg;
  other.rng_seed = 1;
  CHECK(init_params<float>(other).get("pos_embed").values != a.get("pos_embed").values);

  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& t : a.tensors) {
    if (t.name.ends_with(".scale")) {
      for (float v : t.values) CHECK(v == 1.0f);
    } else if (t.name.ends_with(".shift") || t.name.ends_with(".bias")) {
      for (float v : t.values) CHECK(v == 0.0f);
    } else {
      for (float v : t.values) {
        CHECK(std::abs(v) <= 0.04f + 1e-7f);
        sum += v;
        sq += static_cast<double>(v) * v;
        ++n;
      }
    }
  }
  // sd of N(0, 0.02^2) truncated at 2 sd is 0.02 * 0.8796.
  const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
  CHECK(sd == doctest::Approx(0.02 * 0.8796).epsilon(0.02));
}

TEST_CASE("forward shapes, token count and sigmoid range") {
  ViTConfig c = small(DecoderKind::kA, 16, 256);
  c.in_channels = 8;
  c.embed_dim = 16;
  CHECK(c.tokens() == 256);
  const auto x = testing::gradcheck_input<float>(c, 1);
  const auto out = forward<float>(init_params<float>(c), c, x);
  CHECK(out.mask.width == 256);
  CHECK(out.mask.height == 256);
  CHECK(out.cache.block_outputs.back().size() == 256u * 16u);
  for (float p : out.mask.values) {
    CHECK(p > 0.0f);
    CHECK(p < 1.0f);
  }
  CHECK_THROWS_AS(forward<float>(init_params<float>(c), c, std::vector<float>(10)), ShapeError);
}

TEST_CASE("output size equals input size across random valid configs") {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const auto dec = static_cast<DecoderKind>(rng.uniform_int(3));
    ViTConfig c;
    c.in_channels = 1 + static_cast<int>(rng.uniform_int(3));
    c.num_heads = 1 + static_cast<int>(rng.uniform_int(2));
    c.embed_dim = c.num_heads * (2 + static_cast<int>(rng.uniform_int(3)));
    c.depth = 1 + static_cast<int>(rng.uniform_int(3));
    c.mlp_ratio = 1 + static_cast<int>(rng.uniform_int(2));
    c.decoder = dec;
    c.patch_size = dec == DecoderKind::kB ? 16 : (dec == DecoderKind::kC ? 4 : 2 + static_cast<int>(rng.uniform_int(3)));
    c.input_h = c.patch_size * (1 + static_cast<int>(rng.uniform_int(3)));
    c.input_w = c.patch_size * (1 + static_cast<int>(rng.uniform_int(3)));
    REQUIRE_NOTHROW(c.validate());
    const auto out = forward<double>(init_params<double>(c), c, testing::gradcheck_input<double>(c, trial));
    CHECK(out.mask.width == c.input_w);
    CHECK(out.mask.height == c.input_h);
    CHECK(out.mask.values.size() == static_cast<std::size_t>(c.input_h) * c.input_w);
    for (const auto& b : out.cache.block_outputs) CHECK(b.size() == static_cast<std::size_t>(c.tokens()) * c.embed_dim);
  }
}

TEST_CASE("attention rows sum to one") {
  const ViTConfig c = small(DecoderKind::kA, 4, 16, 2);
  const auto out = forward<float>(testing::gradcheck_params<float>(c, 3), c, testing::gradcheck_input<float>(c, 3));
  const int n = c.tokens();
  for (const auto& b : out.cache.blocks) {
    for (int r = 0; r < c.num_heads * n; ++r) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += b.attn[static_cast<std::size_t>(r) * n + j];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
}

TEST_CASE("zeroed decoder with bias b gives constant logit b") {
  for (auto dec : {DecoderKind::kA, DecoderKind::kC}) {
    ViTConfig c = small(dec, 4, 16, 2);
    auto p = testing::gradcheck_params<double>(c, 4);
    for (auto& t : p.tensors) {
      if (t.name.starts_with("decoder.")) std::fill(t.values.begin(), t.values.end(), 0.0);
    }
    const double b = 0.7;
    if (dec == DecoderKind::kA) {
      p.get("decoder.conv.bias").values[0] = b;
    } else {
      p.get("decoder.head.bias").values[0] = b;
    }
    const auto out = forward<double>(p, c, testing::gradcheck_input<double>(c, 4));
    for (double l : out.cache.logits) CHECK(l == doctest::Approx(b).epsilon(1e-12));
  }
}

TEST_CASE("backward: zero upstream gradient and determinism") {
  const ViTConfig c = small(DecoderKind::kC, 4, 8, 2);
  const auto p = testing::gradcheck_params<float>(c, 6);
  const auto x = testing::gradcheck_input<float>(c, 6);
  const auto fwd = forward<float>(p, c, x);
  const std::vector<float> zero(fwd.mask.values.size(), 0.0f);
  const auto g0 = backward<float>(p, c, fwd.cache, zero);
  for (const auto& t : g0.tensors) {
    for (float v : t.values) CHECK(v == 0.0f);
  }
  std::vector<float> up(fwd.mask.values.size());
  Rng rng(8);
  for (auto& v : up) v = static_cast<float>(rng.normal());
  const auto g1 = backward<float>(p, c, fwd.cache, up);
  const auto g2 = backward<float>(p, c, forward<float>(p, c, x).cache, up);
  for (std::size_t i = 0; i < g1.tensors.size(); ++i) CHECK(g1.tensors[i].values == g2.tensors[i].values);
  CHECK_THROWS_AS(backward<float>(p, c, fwd.cache, std::vector<float>(3)), ShapeError);
}

TEST_CASE("finite-difference gradient check, float64") {
  for (const auto& cfg : testing::gradcheck_configs()) {
    for (std::uint64_t seed : {3u, 17u, 29u}) {
      for (const auto& g : testing::directional_gradcheck<double>(cfg, 1e-3, seed, 1.0, true, 1e-6)) {
        INFO("decoder " << to_string(cfg.decoder) << " depth " << cfg.depth << " seed " << seed << " tensor "
                        << g.tensor << " analytic " << g.analytic << " numeric " << g.numeric);
        CHECK(g.rel_error < 1e-6);
      }
    }
  }
}

TEST_CASE("finite-difference gradient check, float32") {
  for (const auto& cfg : testing::gradcheck_configs()) {
    for (const auto& g : testing::directional_gradcheck<float>(cfg, 3e-2, 17, 1.0, true, 3e-3, true)) {
      INFO("decoder " << to_string(cfg.decoder) << " depth " << cfg.depth << " tensor " << g.tensor << " analytic "
                      << g.analytic << " numeric " << g.numeric);
      CHECK(g.rel_error < 1e-3);
    }
  }
}

TEST_CASE("samples are processed independently") {
  const ViTConfig c = small(DecoderKind::kA, 4, 8);
  const auto p = init_params<float>(c);
  const auto a = testing::gradcheck_input<float>(c, 1);
  const auto b = testing::gradcheck_input<float>(c, 2);
  const auto pa1 = forward<float>(p, c, a).mask.values;
  const auto pb = forward<float>(p, c, b).mask.values;
  const auto pa2 = forward<float>(p, c, a).mask.values;
  CHECK(pa1 == pa2);
  CHECK(pa1 != pb);
}
