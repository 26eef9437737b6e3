#include "changeseg/vit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <string>

#include "changeseg/error.hpp"
#include "changeseg/rng.hpp"

namespace changeseg {

using nlohmann::json;

// ====================================================================== config

DecoderKind parse_decoder_kind(const std::string& s) {
  if (s == "A" || s == "a") return DecoderKind::kA;
  if (s == "B" || s == "b") return DecoderKind::kB;
  if (s == "C" || s == "c") return DecoderKind::kC;
  throw InvalidArgument("unknown decoder '" + s + "' (expected A|B|C)");
}

std::string to_string(DecoderKind d) {
  switch (d) {
    case DecoderKind::kA: return "A";
    case DecoderKind::kB: return "B";
    case DecoderKind::kC: return "C";
  }
  return "?";
}

std::vector<int> ViTConfig::default_skip_depths(int depth) {
  const int n = std::min(4, std::max(depth, 1));
  if (n == 1) return {depth};
  std::vector<int> taps;
  for (int i = 0; i < n; ++i) {
    const int t = 1 + ((depth - 1) * i) / (n - 1);
    if (taps.empty() || taps.back() != t) taps.push_back(t);
  }
  return taps;
}

std::vector<int> ViTConfig::effective_skip_depths() const {
  return skip_depths.empty() ? default_skip_depths(depth) : skip_depths;
}

void ViTConfig::validate() const {
  auto fail = [](const std::string& m) { throw InvalidArgument("vit config: " + m); };
  if (in_channels < 1 || patch_size < 1 || embed_dim < 1 || depth < 1 || num_heads < 1 ||
      mlp_ratio < 1) {
    fail("all sizes must be positive");
  }
  if (embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
  if (input_h < patch_size || input_w < patch_size || input_h % patch_size != 0 ||
      input_w % patch_size != 0) {
    fail("input height/width (" + std::to_string(input_h) + "x" + std::to_string(input_w) +
         ") must be positive multiples of patch_size " + std::to_string(patch_size));
  }
  if (decoder == DecoderKind::kB && patch_size != 16) {
    fail("decoder B upsamples 4 times by 2 and needs patch_size 16, got " +
         std::to_string(patch_size));
  }
  if (decoder == DecoderKind::kC) {
    const auto skips = effective_skip_depths();
    if (skips.empty()) fail("decoder C needs at least one skip depth");
    for (std::size_t i = 0; i < skips.size(); ++i) {
      if (skips[i] < 1 || skips[i] > depth) fail("skip_depths must lie in [1, depth]");
      if (i > 0 && skips[i] <= skips[i - 1]) fail("skip_depths must be strictly increasing");
    }
    if (skips.back() != depth) fail("the deepest skip depth must be the last block");
    const long long ladder = 1LL << (skips.size() - 1);
    if (ladder > patch_size) fail("too many skip depths: ladder upsampling exceeds patch_size");
  }
}

ViTConfig ViTConfig::desk_scale(int input_size) {
  ViTConfig c;
  c.in_channels = 8;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.depth = 2;
  c.num_heads = 4;
  c.mlp_ratio = 4;
  c.decoder = DecoderKind::kA;
  c.input_h = input_size;
  c.input_w = input_size;
  return c;
}

json to_json(const ViTConfig& c) {
  return {{"in_channels", c.in_channels}, {"patch_size", c.patch_size},
          {"embed_dim", c.embed_dim},     {"depth", c.depth},
          {"num_heads", c.num_heads},     {"mlp_ratio", c.mlp_ratio},
          {"decoder", to_string(c.decoder)}, {"skip_depths", c.skip_depths},
          {"rng_seed", c.rng_seed},       {"input_h", c.input_h},
          {"input_w", c.input_w}};
}

ViTConfig vit_config_from_json(const json& j, ViTConfig c) {
  static const std::set<std::string> kKeys{"in_channels", "patch_size", "embed_dim", "depth",
                                           "num_heads",   "mlp_ratio",  "decoder",   "skip_depths",
                                           "rng_seed",    "input_h",    "input_w"};
  if (!j.is_object()) throw InvalidArgument("vit config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.contains(key)) throw InvalidArgument("unknown vit config key '" + key + "'");
  }
  try {
    c.in_channels = j.value("in_channels", c.in_channels);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.depth = j.value("depth", c.depth);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    if (j.contains("decoder")) c.decoder = parse_decoder_kind(j["decoder"].get<std::string>());
    if (j.contains("skip_depths")) c.skip_depths = j["skip_depths"].get<std::vector<int>>();
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.input_h = j.value("input_h", c.input_h);
    c.input_w = j.value("input_w", c.input_w);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed vit config: ") + e.what());
  }
  return c;
}

std::vector<int> decoder_channel_widths(int embed_dim, int stages) {
  std::vector<int> w{embed_dim};
  for (int s = 0; s < stages; ++s) w.push_back(std::max(1, w.back() / 2));
  return w;
}

// ====================================================================== layout

std::size_t TensorSpec::numel() const {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr double kInitSd = 0.02;
constexpr double kInitTruncation = 2.0;

struct BlockIdx {
  int norm1_scale, norm1_shift, wq, bq, wk, wv, bv, wo, bo;
  int norm2_scale, norm2_shift, w1, b1, w2, b2;
};

struct Layout {
  std::vector<TensorSpec> specs;
  int patch_w = -1, patch_b = -1, pos = -1;
  std::vector<BlockIdx> blocks;
  // Decoder A: conv_w/conv_b. Decoder B: stage convs. Decoder C: fusion convs.
  std::vector<int> conv_w, conv_b;
  std::vector<int> skip_w, skip_b;  // decoder C 1x1 skip projections
  int head_w = -1, head_b = -1;     // final 1x1 conv (B, C)
  std::vector<int> widths;
  std::vector<int> skips;           // decoder C

  int add(std::string name, std::vector<int> shape, InitKind init) {
    specs.push_back({std::move(name), std::move(shape), init});
    return static_cast<int>(specs.size()) - 1;
  }
};

Layout build_layout(const ViTConfig& cfg) {
  cfg.validate();
  Layout l;
  const int d = cfg.embed_dim;
  const int hid = cfg.hidden_dim();
  l.patch_w = l.add("patch_embed.weight", {d, cfg.patch_dim()}, InitKind::kTruncNormal);
  l.patch_b = l.add("patch_embed.bias", {d}, InitKind::kZero);
  l.pos = l.add("pos_embed", {cfg.tokens(), d}, InitKind::kTruncNormal);
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    BlockIdx bi{};
    bi.norm1_scale = l.add(p + "norm1.scale", {d}, InitKind::kOne);
    bi.norm1_shift = l.add(p + "norm1.shift", {d}, InitKind::kZero);
    bi.wq = l.add(p + "attn.q.weight", {d, d}, InitKind::kTruncNormal);
    bi.bq = l.add(p + "attn.q.bias", {d}, InitKind::kZero);
    // No key bias: it adds q.b_k to every score in a softmax row, which the
    // softmax ignores, so its gradient is identically zero.
    bi.wk = l.add(p + "attn.k.weight", {d, d}, InitKind::kTruncNormal);
    bi.wv = l.add(p + "attn.v.weight", {d, d}, InitKind::kTruncNormal);
    bi.bv = l.add(p + "attn.v.bias", {d}, InitKind::kZero);
    bi.wo = l.add(p + "attn.out.weight", {d, d}, InitKind::kTruncNormal);
    bi.bo = l.add(p + "attn.out.bias", {d}, InitKind::kZero);
    bi.norm2_scale = l.add(p + "norm2.scale", {d}, InitKind::kOne);
    bi.norm2_shift = l.add(p + "norm2.shift", {d}, InitKind::kZero);
    bi.w1 = l.add(p + "mlp.fc1.weight", {hid, d}, InitKind::kTruncNormal);
    bi.b1 = l.add(p + "mlp.fc1.bias", {hid}, InitKind::kZero);
    bi.w2 = l.add(p + "mlp.fc2.weight", {d, hid}, InitKind::kTruncNormal);
    bi.b2 = l.add(p + "mlp.fc2.bias", {d}, InitKind::kZero);
    l.blocks.push_back(bi);
  }
  switch (cfg.decoder) {
    case DecoderKind::kA:
      l.conv_w.push_back(l.add("decoder.conv.weight", {1, d, 3, 3}, InitKind::kTruncNormal));
      l.conv_b.push_back(l.add("decoder.conv.bias", {1}, InitKind::kZero));
      break;
    case DecoderKind::kB: {
      l.widths = decoder_channel_widths(d, 4);
      for (int s = 0; s < 4; ++s) {
        const std::string p = "decoder.stage" + std::to_string(s) + ".";
        l.conv_w.push_back(
            l.add(p + "weight", {l.widths[s + 1], l.widths[s], 3, 3}, InitKind::kTruncNormal));
        l.conv_b.push_back(l.add(p + "bias", {l.widths[s + 1]}, InitKind::kZero));
      }
      l.head_w = l.add("decoder.head.weight", {1, l.widths[4], 1, 1}, InitKind::kTruncNormal);
      l.head_b = l.add("decoder.head.bias", {1}, InitKind::kZero);
      break;
    }
    case DecoderKind::kC: {
      l.skips = cfg.effective_skip_depths();
      const int stages = static_cast<int>(l.skips.size()) - 1;
      l.widths = decoder_channel_widths(d, stages);
      for (int s = 0; s < stages; ++s) {
        const std::string p = "decoder.";
        const int cj = l.widths[s];
        l.skip_w.push_back(l.add(p + "skip" + std::to_string(s) + ".weight", {cj, d, 1, 1},
                                 InitKind::kTruncNormal));
        l.skip_b.push_back(l.add(p + "skip" + std::to_string(s) + ".bias", {cj}, InitKind::kZero));
        l.conv_w.push_back(l.add(p + "fuse" + std::to_string(s) + ".weight",
                                 {l.widths[s + 1], 2 * cj, 3, 3}, InitKind::kTruncNormal));
        l.conv_b.push_back(
            l.add(p + "fuse" + std::to_string(s) + ".bias", {l.widths[s + 1]}, InitKind::kZero));
      }
      l.head_w = l.add("decoder.head.weight", {1, l.widths[stages], 1, 1}, InitKind::kTruncNormal);
      l.head_b = l.add("decoder.head.bias", {1}, InitKind::kZero);
      break;
    }
  }
  return l;
}

}  // namespace

std::vector<TensorSpec> param_layout(const ViTConfig& cfg) { return build_layout(cfg).specs; }

std::size_t parameter_count(const ViTConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : param_layout(cfg)) n += s.numel();
  return n;
}

// ====================================================================== params

template <typename T>
std::size_t ViTParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.numel();
  return n;
}

template <typename T>
Tensor<T>& ViTParams<T>::get(const std::string& name) {
  for (auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw InvalidArgument("no parameter tensor named '" + name + "'");
}

template <typename T>
const Tensor<T>& ViTParams<T>::get(const std::string& name) const {
  return const_cast<ViTParams<T>*>(this)->get(name);
}

template <typename T>
ViTParams<T> ViTParams<T>::zeros_like() const {
  ViTParams<T> z;
  z.tensors.reserve(tensors.size());
  for (const auto& t : tensors) z.tensors.push_back({t.name, t.shape, std::vector<T>(t.numel(), T(0))});
  return z;
}

template <typename T>
void ViTParams<T>::set_zero() {
  for (auto& t : tensors) std::fill(t.values.begin(), t.values.end(), T(0));
}

template <typename T>
void ViTParams<T>::add(const ViTParams& other) {
  if (other.tensors.size() != tensors.size()) throw ShapeError("parameter sets differ in layout");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& dst = tensors[i].values;
    const auto& src = other.tensors[i].values;
    if (dst.size() != src.size()) throw ShapeError("parameter tensor size mismatch");
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

template <typename T>
void ViTParams<T>::scale(T factor) {
  for (auto& t : tensors) {
    for (auto& v : t.values) v *= factor;
  }
}

template <typename T>
bool ViTParams<T>::all_finite() const {
  for (const auto& t : tensors) {
    for (T v : t.values) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

template <typename T>
ViTParams<T> init_params(const ViTConfig& cfg) {
  const Layout layout = build_layout(cfg);
  Rng rng(cfg.rng_seed);
  ViTParams<T> p;
  p.tensors.reserve(layout.specs.size());
  for (const auto& spec : layout.specs) {
    Tensor<T> t{spec.name, spec.shape, std::vector<T>(spec.numel(), T(0))};
    switch (spec.init) {
      case InitKind::kZero: break;
      case InitKind::kOne: std::fill(t.values.begin(), t.values.end(), T(1)); break;
      case InitKind::kTruncNormal:
        for (auto& v : t.values) v = static_cast<T>(kInitSd * rng.truncated_normal(kInitTruncation));
        break;
    }
    p.tensors.push_back(std::move(t));
  }
  return p;
}

// ====================================================================== kernels

namespace {

// y[n x out] = x[n x in] W^T + b, W is out x in.
template <typename T>
void linear_forward(const T* x, int n, int in, const T* w, const T* b, int out, T* y) {
  for (int i = 0; i < n; ++i) {
    const T* xi = x + static_cast<std::size_t>(i) * in;
    for (int o = 0; o < out; ++o) {
      const T* wo = w + static_cast<std::size_t>(o) * in;
      double s = b ? static_cast<double>(b[o]) : 0.0;
      for (int k = 0; k < in; ++k) s += static_cast<double>(xi[k]) * wo[k];
      y[static_cast<std::size_t>(i) * out + o] = static_cast<T>(s);
    }
  }
}

// Accumulates dx (optional), dW and db for linear_forward.
template <typename T>
void linear_backward(const T* x, int n, int in, const T* w, int out, const T* dy, T* dx, T* dw,
                     T* db) {
  if (dx) {
    for (int i = 0; i < n; ++i) {
      const T* dyi = dy + static_cast<std::size_t>(i) * out;
      for (int k = 0; k < in; ++k) {
        double s = 0.0;
        for (int o = 0; o < out; ++o) s += static_cast<double>(dyi[o]) * w[static_cast<std::size_t>(o) * in + k];
        dx[static_cast<std::size_t>(i) * in + k] += static_cast<T>(s);
      }
    }
  }
  std::vector<double> acc(static_cast<std::size_t>(in));
  for (int o = 0; o < out; ++o) {
    std::fill(acc.begin(), acc.end(), 0.0);
    double bsum = 0.0;
    for (int i = 0; i < n; ++i) {
      const double g = dy[static_cast<std::size_t>(i) * out + o];
      if (g == 0.0) continue;
      bsum += g;
      const T* xi = x + static_cast<std::size_t>(i) * in;
      for (int k = 0; k < in; ++k) acc[k] += g * xi[k];
    }
    T* dwo = dw + static_cast<std::size_t>(o) * in;
    for (int k = 0; k < in; ++k) dwo[k] += static_cast<T>(acc[k]);
    if (db) db[o] += static_cast<T>(bsum);
  }
}

template <typename T>
void layernorm_forward(const T* x, int n, int d, const T* scale, const T* shift, T* y,
                       LayerNormCache<T>& cache) {
  cache.xhat.assign(static_cast<std::size_t>(n) * d, T(0));
  cache.rstd.assign(static_cast<std::size_t>(n), T(0));
  for (int i = 0; i < n; ++i) {
    const T* xi = x + static_cast<std::size_t>(i) * d;
    double mean = 0.0;
    for (int k = 0; k < d; ++k) mean += xi[k];
    mean /= d;
    double var = 0.0;
    for (int k = 0; k < d; ++k) var += (xi[k] - mean) * (xi[k] - mean);
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd[i] = static_cast<T>(rstd);
    for (int k = 0; k < d; ++k) {
      const double xh = (xi[k] - mean) * rstd;
      cache.xhat[static_cast<std::size_t>(i) * d + k] = static_cast<T>(xh);
      y[static_cast<std::size_t>(i) * d + k] = static_cast<T>(xh * scale[k] + shift[k]);
    }
  }
}

template <typename T>
void layernorm_backward(const T* dy, int n, int d, const T* scale, const LayerNormCache<T>& cache,
                        T* dx, T* dscale, T* dshift) {
  std::vector<double> dxhat(static_cast<std::size_t>(d));
  std::vector<double> gs(static_cast<std::size_t>(d), 0.0), gb(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < n; ++i) {
    const T* dyi = dy + static_cast<std::size_t>(i) * d;
    const T* xh = cache.xhat.data() + static_cast<std::size_t>(i) * d;
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (int k = 0; k < d; ++k) {
      gs[k] += static_cast<double>(dyi[k]) * xh[k];
      gb[k] += dyi[k];
      dxhat[k] = static_cast<double>(dyi[k]) * scale[k];
      mean_dxhat += dxhat[k];
      mean_dxhat_xhat += dxhat[k] * xh[k];
    }
    mean_dxhat /= d;
    mean_dxhat_xhat /= d;
    const double rstd = cache.rstd[i];
    for (int k = 0; k < d; ++k) {
      dx[static_cast<std::size_t>(i) * d + k] +=
          static_cast<T>(rstd * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xhat));
    }
  }
  for (int k = 0; k < d; ++k) {
    dscale[k] += static_cast<T>(gs[k]);
    dshift[k] += static_cast<T>(gb[k]);
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

template <typename T>
T sigmoid(T x) {
  const double v = x;
  if (v >= 0.0) return static_cast<T>(1.0 / (1.0 + std::exp(-v)));
  const double e = std::exp(v);
  return static_cast<T>(e / (1.0 + e));
}

// Square kernel k (odd), zero padding k/2, stride 1. W is cout x cin x k x k.
template <typename T>
FeatureMap<T> conv2d_forward(const FeatureMap<T>& in, const T* w, const T* b, int cout, int k) {
  FeatureMap<T> out(cout, in.height, in.width);
  const int pad = k / 2;
  const int h = in.height;
  const int wd = in.width;
  std::vector<double> acc(static_cast<std::size_t>(h) * wd);
  for (int o = 0; o < cout; ++o) {
    std::fill(acc.begin(), acc.end(), b ? static_cast<double>(b[o]) : 0.0);
    for (int c = 0; c < in.channels; ++c) {
      const T* src = in.data.data() + static_cast<std::size_t>(c) * h * wd;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double wv = w[((static_cast<std::size_t>(o) * in.channels + c) * k + ky) * k + kx];
          if (wv == 0.0) continue;
          const int dy = ky - pad;
          const int dx = kx - pad;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
          for (int y = y0; y < y1; ++y) {
            const T* row = src + static_cast<std::size_t>(y + dy) * wd + dx;
            double* arow = acc.data() + static_cast<std::size_t>(y) * wd;
            for (int x = x0; x < x1; ++x) arow[x] += wv * row[x];
          }
        }
      }
    }
    T* dst = out.data.data() + static_cast<std::size_t>(o) * h * wd;
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<T>(acc[i]);
  }
  return out;
}

// Returns d_in; accumulates dW and db.
template <typename T>
FeatureMap<T> conv2d_backward(const FeatureMap<T>& in, const T* w, int cout, int k,
                              const FeatureMap<T>& dout, T* dw, T* db) {
  const int pad = k / 2;
  const int h = in.height;
  const int wd = in.width;
  FeatureMap<T> din(in.channels, h, wd);
  std::vector<double> dacc(din.data.size(), 0.0);
  for (int o = 0; o < cout; ++o) {
    const T* g = dout.data.data() + static_cast<std::size_t>(o) * h * wd;
    if (db) {
      double s = 0.0;
      for (std::size_t i = 0; i < static_cast<std::size_t>(h) * wd; ++i) s += g[i];
      db[o] += static_cast<T>(s);
    }
    for (int c = 0; c < in.channels; ++c) {
      const T* src = in.data.data() + static_cast<std::size_t>(c) * h * wd;
      double* dsrc = dacc.data() + static_cast<std::size_t>(c) * h * wd;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const std::size_t widx = ((static_cast<std::size_t>(o) * in.channels + c) * k + ky) * k + kx;
          const double wv = w[widx];
          const int dy = ky - pad;
          const int dx = kx - pad;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
          double gw = 0.0;
          for (int y = y0; y < y1; ++y) {
            const T* grow = g + static_cast<std::size_t>(y) * wd;
            const T* srow = src + static_cast<std::size_t>(y + dy) * wd + dx;
            double* drow = dsrc + static_cast<std::size_t>(y + dy) * wd + dx;
            for (int x = x0; x < x1; ++x) {
              gw += static_cast<double>(grow[x]) * srow[x];
              drow[x] += wv * grow[x];
            }
          }
          dw[widx] += static_cast<T>(gw);
        }
      }
    }
  }
  for (std::size_t i = 0; i < dacc.size(); ++i) din.data[i] = static_cast<T>(dacc[i]);
  return din;
}

template <typename T>
FeatureMap<T> upsample_nearest(const FeatureMap<T>& in, int factor) {
  FeatureMap<T> out(in.channels, in.height * factor, in.width * factor);
  for (int c = 0; c < in.channels; ++c) {
    for (int y = 0; y < out.height; ++y) {
      const T* src = in.data.data() + (static_cast<std::size_t>(c) * in.height + y / factor) * in.width;
      T* dst = out.data.data() + (static_cast<std::size_t>(c) * out.height + y) * out.width;
      for (int x = 0; x < out.width; ++x) dst[x] = src[x / factor];
    }
  }
  return out;
}

template <typename T>
FeatureMap<T> upsample_nearest_backward(const FeatureMap<T>& dout, int factor) {
  FeatureMap<T> din(dout.channels, dout.height / factor, dout.width / factor);
  std::vector<double> acc(din.data.size(), 0.0);
  for (int c = 0; c < dout.channels; ++c) {
    for (int y = 0; y < dout.height; ++y) {
      const T* src = dout.data.data() + (static_cast<std::size_t>(c) * dout.height + y) * dout.width;
      double* dst = acc.data() + (static_cast<std::size_t>(c) * din.height + y / factor) * din.width;
      for (int x = 0; x < dout.width; ++x) dst[x / factor] += src[x];
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) din.data[i] = static_cast<T>(acc[i]);
  return din;
}

struct BilinearTap {
  int i0, i1;
  double w1;
};

// Half-pixel centres with edge clamping, matching raster::resample.
std::vector<BilinearTap> bilinear_taps(int target, int source) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(target));
  const double scale = static_cast<double>(source) / target;
  for (int i = 0; i < target; ++i) {
    const double s = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(source - 1));
    const int i0 = static_cast<int>(std::floor(s));
    taps[i] = {i0, std::min(i0 + 1, source - 1), s - i0};
  }
  return taps;
}

template <typename T>
FeatureMap<T> resize_bilinear(const FeatureMap<T>& in, int out_h, int out_w) {
  FeatureMap<T> out(in.channels, out_h, out_w);
  const auto ty = bilinear_taps(out_h, in.height);
  const auto tx = bilinear_taps(out_w, in.width);
  for (int c = 0; c < in.channels; ++c) {
    const T* src = in.data.data() + static_cast<std::size_t>(c) * in.height * in.width;
    T* dst = out.data.data() + static_cast<std::size_t>(c) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const T* r0 = src + static_cast<std::size_t>(ty[y].i0) * in.width;
      const T* r1 = src + static_cast<std::size_t>(ty[y].i1) * in.width;
      const double wy = ty[y].w1;
      for (int x = 0; x < out_w; ++x) {
        const double wx = tx[x].w1;
        const double top = r0[tx[x].i0] * (1.0 - wx) + r0[tx[x].i1] * wx;
        const double bottom = r1[tx[x].i0] * (1.0 - wx) + r1[tx[x].i1] * wx;
        dst[static_cast<std::size_t>(y) * out_w + x] = static_cast<T>(top * (1.0 - wy) + bottom * wy);
      }
    }
  }
  return out;
}

template <typename T>
FeatureMap<T> resize_bilinear_backward(const FeatureMap<T>& dout, int in_h, int in_w) {
  FeatureMap<T> din(dout.channels, in_h, in_w);
  const auto ty = bilinear_taps(dout.height, in_h);
  const auto tx = bilinear_taps(dout.width, in_w);
  std::vector<double> acc(din.data.size(), 0.0);
  for (int c = 0; c < dout.channels; ++c) {
    const T* g = dout.data.data() + static_cast<std::size_t>(c) * dout.height * dout.width;
    double* d = acc.data() + static_cast<std::size_t>(c) * in_h * in_w;
    for (int y = 0; y < dout.height; ++y) {
      double* r0 = d + static_cast<std::size_t>(ty[y].i0) * in_w;
      double* r1 = d + static_cast<std::size_t>(ty[y].i1) * in_w;
      const double wy = ty[y].w1;
      for (int x = 0; x < dout.width; ++x) {
        const double gv = g[static_cast<std::size_t>(y) * dout.width + x];
        const double wx = tx[x].w1;
        r0[tx[x].i0] += gv * (1.0 - wy) * (1.0 - wx);
        r0[tx[x].i1] += gv * (1.0 - wy) * wx;
        r1[tx[x].i0] += gv * wy * (1.0 - wx);
        r1[tx[x].i1] += gv * wy * wx;
      }
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) din.data[i] = static_cast<T>(acc[i]);
  return din;
}

template <typename T>
FeatureMap<T> gelu_map(const FeatureMap<T>& in) {
  FeatureMap<T> out = in;
  for (auto& v : out.data) v = static_cast<T>(gelu(v));
  return out;
}

template <typename T>
FeatureMap<T> gelu_map_backward(const FeatureMap<T>& pre, const FeatureMap<T>& dout) {
  FeatureMap<T> din = dout;
  for (std::size_t i = 0; i < din.data.size(); ++i) {
    din.data[i] = static_cast<T>(dout.data[i] * gelu_grad(pre.data[i]));
  }
  return din;
}

template <typename T>
FeatureMap<T> concat_channels(const FeatureMap<T>& a, const FeatureMap<T>& b) {
  FeatureMap<T> out(a.channels + b.channels, a.height, a.width);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return out;
}

template <typename T>
std::pair<FeatureMap<T>, FeatureMap<T>> split_channels(const FeatureMap<T>& m, int first) {
  FeatureMap<T> a(first, m.height, m.width);
  FeatureMap<T> b(m.channels - first, m.height, m.width);
  std::copy(m.data.begin(), m.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()), a.data.begin());
  std::copy(m.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()), m.data.end(), b.data.begin());
  return {std::move(a), std::move(b)};
}

// N x D tokens (row-major over the gh x gw grid) -> D x gh x gw.
template <typename T>
FeatureMap<T> tokens_to_grid(const std::vector<T>& tokens, int d, int gh, int gw) {
  FeatureMap<T> g(d, gh, gw);
  for (int t = 0; t < gh * gw; ++t) {
    for (int c = 0; c < d; ++c) {
      g.data[static_cast<std::size_t>(c) * gh * gw + t] = tokens[static_cast<std::size_t>(t) * d + c];
    }
  }
  return g;
}

template <typename T>
void grid_to_tokens_add(const FeatureMap<T>& g, std::vector<T>& tokens) {
  const int n = g.height * g.width;
  for (int t = 0; t < n; ++t) {
    for (int c = 0; c < g.channels; ++c) {
      tokens[static_cast<std::size_t>(t) * g.channels + c] += g.data[static_cast<std::size_t>(c) * n + t];
    }
  }
}

template <typename T>
const T* tensor_ptr(const ViTParams<T>& p, int idx) {
  return p.tensors[static_cast<std::size_t>(idx)].values.data();
}

template <typename T>
T* tensor_ptr(ViTParams<T>& p, int idx) {
  return p.tensors[static_cast<std::size_t>(idx)].values.data();
}

void check_params(const Layout& layout, std::size_t tensor_count, const char* what) {
  if (tensor_count != layout.specs.size()) {
    throw ShapeError(std::string(what) + ": parameter set does not match the config layout");
  }
}

// ====================================================================== encoder

template <typename T>
std::vector<T> block_forward(const ViTParams<T>& p, const ViTConfig& cfg, const BlockIdx& bi,
                             const std::vector<T>& x, BlockCache<T>& c) {
  const int n = cfg.tokens();
  const int d = cfg.embed_dim;
  const int hid = cfg.hidden_dim();
  const int heads = cfg.num_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t nd = static_cast<std::size_t>(n) * d;

  c.input = x;
  c.normed1.assign(nd, T(0));
  layernorm_forward(x.data(), n, d, tensor_ptr(p, bi.norm1_scale), tensor_ptr(p, bi.norm1_shift),
                    c.normed1.data(), c.ln1);
  c.q.assign(nd, T(0));
  c.k.assign(nd, T(0));
  c.v.assign(nd, T(0));
  linear_forward(c.normed1.data(), n, d, tensor_ptr(p, bi.wq), tensor_ptr(p, bi.bq), d, c.q.data());
  linear_forward<T>(c.normed1.data(), n, d, tensor_ptr(p, bi.wk), nullptr, d, c.k.data());
  linear_forward(c.normed1.data(), n, d, tensor_ptr(p, bi.wv), tensor_ptr(p, bi.bv), d, c.v.data());

  c.attn.assign(static_cast<std::size_t>(heads) * n * n, T(0));
  c.context.assign(nd, T(0));
  std::vector<double> scores(static_cast<std::size_t>(n));
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int e = 0; e < dh; ++e) {
          s += static_cast<double>(c.q[static_cast<std::size_t>(i) * d + off + e]) *
               c.k[static_cast<std::size_t>(j) * d + off + e];
        }
        scores[j] = s * scale;
        mx = std::max(mx, scores[j]);
      }
      double z = 0.0;
      for (int j = 0; j < n; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        z += scores[j];
      }
      T* arow = c.attn.data() + (static_cast<std::size_t>(h) * n + i) * n;
      for (int j = 0; j < n; ++j) arow[j] = static_cast<T>(scores[j] / z);
      for (int e = 0; e < dh; ++e) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += static_cast<double>(arow[j]) * c.v[static_cast<std::size_t>(j) * d + off + e];
        c.context[static_cast<std::size_t>(i) * d + off + e] = static_cast<T>(s);
      }
    }
  }

  std::vector<T> attn_out(nd);
  linear_forward(c.context.data(), n, d, tensor_ptr(p, bi.wo), tensor_ptr(p, bi.bo), d, attn_out.data());
  c.mid.resize(nd);
  for (std::size_t i = 0; i < nd; ++i) c.mid[i] = x[i] + attn_out[i];

  c.normed2.assign(nd, T(0));
  layernorm_forward(c.mid.data(), n, d, tensor_ptr(p, bi.norm2_scale), tensor_ptr(p, bi.norm2_shift),
                    c.normed2.data(), c.ln2);
  c.pre_act.assign(static_cast<std::size_t>(n) * hid, T(0));
  linear_forward(c.normed2.data(), n, d, tensor_ptr(p, bi.w1), tensor_ptr(p, bi.b1), hid, c.pre_act.data());
  c.act.resize(c.pre_act.size());
  for (std::size_t i = 0; i < c.act.size(); ++i) c.act[i] = static_cast<T>(gelu(c.pre_act[i]));
  std::vector<T> mlp_out(nd);
  linear_forward(c.act.data(), n, hid, tensor_ptr(p, bi.w2), tensor_ptr(p, bi.b2), d, mlp_out.data());

  std::vector<T> out(nd);
  for (std::size_t i = 0; i < nd; ++i) out[i] = c.mid[i] + mlp_out[i];
  return out;
}

// Returns d(block input); accumulates parameter gradients.
template <typename T>
std::vector<T> block_backward(const ViTParams<T>& p, const ViTConfig& cfg, const BlockIdx& bi,
                              const BlockCache<T>& c, const std::vector<T>& dout, ViTParams<T>& g) {
  const int n = cfg.tokens();
  const int d = cfg.embed_dim;
  const int hid = cfg.hidden_dim();
  const int heads = cfg.num_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t nd = static_cast<std::size_t>(n) * d;

  // MLP branch.
  std::vector<T> dmid = dout;
  std::vector<T> dact(static_cast<std::size_t>(n) * hid, T(0));
  linear_backward(c.act.data(), n, hid, tensor_ptr(p, bi.w2), d, dout.data(), dact.data(),
                  tensor_ptr(g, bi.w2), tensor_ptr(g, bi.b2));
  for (std::size_t i = 0; i < dact.size(); ++i) dact[i] = static_cast<T>(dact[i] * gelu_grad(c.pre_act[i]));
  std::vector<T> dnormed2(nd, T(0));
  linear_backward(c.normed2.data(), n, d, tensor_ptr(p, bi.w1), hid, dact.data(), dnormed2.data(),
                  tensor_ptr(g, bi.w1), tensor_ptr(g, bi.b1));
  layernorm_backward(dnormed2.data(), n, d, tensor_ptr(p, bi.norm2_scale), c.ln2, dmid.data(),
                     tensor_ptr(g, bi.norm2_scale), tensor_ptr(g, bi.norm2_shift));

  // Attention branch.
  std::vector<T> dx = dmid;
  std::vector<T> dcontext(nd, T(0));
  linear_backward(c.context.data(), n, d, tensor_ptr(p, bi.wo), d, dmid.data(), dcontext.data(),
                  tensor_ptr(g, bi.wo), tensor_ptr(g, bi.bo));

  std::vector<double> dq(nd, 0.0), dk(nd, 0.0), dv(nd, 0.0);
  std::vector<double> da(static_cast<std::size_t>(n));
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < n; ++i) {
      const T* arow = c.attn.data() + (static_cast<std::size_t>(h) * n + i) * n;
      const T* gctx = dcontext.data() + static_cast<std::size_t>(i) * d + off;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) {
        const T* vj = c.v.data() + static_cast<std::size_t>(j) * d + off;
        double s = 0.0;
        for (int e = 0; e < dh; ++e) {
          s += static_cast<double>(gctx[e]) * vj[e];
          dv[static_cast<std::size_t>(j) * d + off + e] += static_cast<double>(arow[j]) * gctx[e];
        }
        da[j] = s;
        dot += s * arow[j];
      }
      for (int j = 0; j < n; ++j) {
        const double ds = arow[j] * (da[j] - dot) * scale;
        if (ds == 0.0) continue;
        for (int e = 0; e < dh; ++e) {
          dq[static_cast<std::size_t>(i) * d + off + e] += ds * c.k[static_cast<std::size_t>(j) * d + off + e];
          dk[static_cast<std::size_t>(j) * d + off + e] += ds * c.q[static_cast<std::size_t>(i) * d + off + e];
        }
      }
    }
  }
  std::vector<T> dqt(nd), dkt(nd), dvt(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    dqt[i] = static_cast<T>(dq[i]);
    dkt[i] = static_cast<T>(dk[i]);
    dvt[i] = static_cast<T>(dv[i]);
  }
  std::vector<T> dnormed1(nd, T(0));
  linear_backward(c.normed1.data(), n, d, tensor_ptr(p, bi.wq), d, dqt.data(), dnormed1.data(),
                  tensor_ptr(g, bi.wq), tensor_ptr(g, bi.bq));
  linear_backward<T>(c.normed1.data(), n, d, tensor_ptr(p, bi.wk), d, dkt.data(), dnormed1.data(),
                     tensor_ptr(g, bi.wk), nullptr);
  linear_backward(c.normed1.data(), n, d, tensor_ptr(p, bi.wv), d, dvt.data(), dnormed1.data(),
                  tensor_ptr(g, bi.wv), tensor_ptr(g, bi.bv));
  layernorm_backward(dnormed1.data(), n, d, tensor_ptr(p, bi.norm1_scale), c.ln1, dx.data(),
                     tensor_ptr(g, bi.norm1_scale), tensor_ptr(g, bi.norm1_shift));
  return dx;
}

// ====================================================================== decoders

template <typename T>
FeatureMap<T> decoder_forward(const ViTParams<T>& p, const ViTConfig& cfg, const Layout& l,
                              const std::vector<std::vector<T>>& block_outputs,
                              DecoderCache<T>& dc) {
  const int d = cfg.embed_dim;
  const int gh = cfg.grid_h();
  const int gw = cfg.grid_w();
  dc = DecoderCache<T>{};
  switch (cfg.decoder) {
    case DecoderKind::kA: {
      dc.head_input = tokens_to_grid(block_outputs.back(), d, gh, gw);
      dc.head_output = conv2d_forward(dc.head_input, tensor_ptr(p, l.conv_w[0]), tensor_ptr(p, l.conv_b[0]), 1, 3);
      return resize_bilinear(dc.head_output, cfg.input_h, cfg.input_w);
    }
    case DecoderKind::kB: {
      FeatureMap<T> f = tokens_to_grid(block_outputs.back(), d, gh, gw);
      for (int s = 0; s < 4; ++s) {
        dc.conv_inputs.push_back(upsample_nearest(f, 2));
        dc.pre_acts.push_back(conv2d_forward(dc.conv_inputs.back(), tensor_ptr(p, l.conv_w[s]),
                                             tensor_ptr(p, l.conv_b[s]), l.widths[s + 1], 3));
        f = gelu_map(dc.pre_acts.back());
      }
      dc.head_input = std::move(f);
      dc.head_output = conv2d_forward(dc.head_input, tensor_ptr(p, l.head_w), tensor_ptr(p, l.head_b), 1, 1);
      if (dc.head_output.height == cfg.input_h && dc.head_output.width == cfg.input_w) {
        return dc.head_output;
      }
      return resize_bilinear(dc.head_output, cfg.input_h, cfg.input_w);
    }
    case DecoderKind::kC: {
      const int m = static_cast<int>(l.skips.size());
      FeatureMap<T> f = tokens_to_grid(block_outputs[static_cast<std::size_t>(l.skips.back() - 1)], d, gh, gw);
      for (int s = 0; s < m - 1; ++s) {
        const int cj = l.widths[s];
        const FeatureMap<T> up = upsample_nearest(f, 2);
        const auto& skip_tokens = block_outputs[static_cast<std::size_t>(l.skips[m - 2 - s] - 1)];
        dc.skip_projected.push_back(conv2d_forward(tokens_to_grid(skip_tokens, d, gh, gw),
                                                   tensor_ptr(p, l.skip_w[s]), tensor_ptr(p, l.skip_b[s]), cj, 1));
        const FeatureMap<T> skip_up = upsample_nearest(dc.skip_projected.back(), 1 << (s + 1));
        dc.conv_inputs.push_back(concat_channels(up, skip_up));
        dc.pre_acts.push_back(conv2d_forward(dc.conv_inputs.back(), tensor_ptr(p, l.conv_w[s]),
                                             tensor_ptr(p, l.conv_b[s]), l.widths[s + 1], 3));
        f = gelu_map(dc.pre_acts.back());
      }
      dc.head_input = std::move(f);
      // The 1x1 head commutes with bilinear resizing (both linear, resize
      // weights sum to 1), so it runs at the coarse resolution.
      dc.head_output = conv2d_forward(dc.head_input, tensor_ptr(p, l.head_w), tensor_ptr(p, l.head_b), 1, 1);
      return resize_bilinear(dc.head_output, cfg.input_h, cfg.input_w);
    }
  }
  throw InvalidArgument("unknown decoder");
}

// Adds token-space gradients for every tapped block into d_blocks.
template <typename T>
void decoder_backward(const ViTParams<T>& p, const ViTConfig& cfg, const Layout& l,
                      const std::vector<std::vector<T>>& block_outputs, const DecoderCache<T>& dc,
                      const FeatureMap<T>& dlogits, ViTParams<T>& g,
                      std::vector<std::vector<T>>& d_blocks) {
  const auto head_grad = [&](const FeatureMap<T>& dlow) {
    return conv2d_backward(dc.head_input, tensor_ptr(p, l.head_w), 1, 1, dlow, tensor_ptr(g, l.head_w),
                           tensor_ptr(g, l.head_b));
  };
  switch (cfg.decoder) {
    case DecoderKind::kA: {
      const FeatureMap<T> dlow = resize_bilinear_backward(dlogits, dc.head_output.height, dc.head_output.width);
      const FeatureMap<T> dgrid = conv2d_backward(dc.head_input, tensor_ptr(p, l.conv_w[0]), 1, 3, dlow,
                                                  tensor_ptr(g, l.conv_w[0]), tensor_ptr(g, l.conv_b[0]));
      grid_to_tokens_add(dgrid, d_blocks.back());
      return;
    }
    case DecoderKind::kB: {
      FeatureMap<T> dlow = dlogits;
      if (dc.head_output.height != cfg.input_h || dc.head_output.width != cfg.input_w) {
        dlow = resize_bilinear_backward(dlogits, dc.head_output.height, dc.head_output.width);
      }
      FeatureMap<T> df = head_grad(dlow);
      for (int s = 3; s >= 0; --s) {
        const FeatureMap<T> dpre = gelu_map_backward(dc.pre_acts[s], df);
        const FeatureMap<T> dup = conv2d_backward(dc.conv_inputs[s], tensor_ptr(p, l.conv_w[s]), l.widths[s + 1], 3,
                                                  dpre, tensor_ptr(g, l.conv_w[s]), tensor_ptr(g, l.conv_b[s]));
        df = upsample_nearest_backward(dup, 2);
      }
      grid_to_tokens_add(df, d_blocks.back());
      return;
    }
    case DecoderKind::kC: {
      const int m = static_cast<int>(l.skips.size());
      const int d = cfg.embed_dim;
      const int gh = cfg.grid_h();
      const int gw = cfg.grid_w();
      const FeatureMap<T> dlow = resize_bilinear_backward(dlogits, dc.head_output.height, dc.head_output.width);
      FeatureMap<T> df = head_grad(dlow);
      for (int s = m - 2; s >= 0; --s) {
        const int cj = l.widths[s];
        const FeatureMap<T> dpre = gelu_map_backward(dc.pre_acts[s], df);
        const FeatureMap<T> dcat = conv2d_backward(dc.conv_inputs[s], tensor_ptr(p, l.conv_w[s]), l.widths[s + 1], 3,
                                                   dpre, tensor_ptr(g, l.conv_w[s]), tensor_ptr(g, l.conv_b[s]));
        auto [dup, dskip_up] = split_channels(dcat, cj);
        const FeatureMap<T> dskip_proj = upsample_nearest_backward(dskip_up, 1 << (s + 1));
        const std::size_t block = static_cast<std::size_t>(l.skips[m - 2 - s] - 1);
        const FeatureMap<T> skip_grid = tokens_to_grid(block_outputs[block], d, gh, gw);
        const FeatureMap<T> dskip_grid = conv2d_backward(skip_grid, tensor_ptr(p, l.skip_w[s]), cj, 1, dskip_proj,
                                                         tensor_ptr(g, l.skip_w[s]), tensor_ptr(g, l.skip_b[s]));
        grid_to_tokens_add(dskip_grid, d_blocks[block]);
        df = upsample_nearest_backward(dup, 2);
      }
      grid_to_tokens_add(df, d_blocks[static_cast<std::size_t>(l.skips.back() - 1)]);
      return;
    }
  }
}

}  // namespace

// ====================================================================== public

template <typename T>
ForwardResult<T> forward(const ViTParams<T>& params, const ViTConfig& cfg, std::span<const T> input) {
  const Layout l = build_layout(cfg);
  check_params(l, params.tensors.size(), "forward");
  const int c = cfg.in_channels;
  const int h = cfg.input_h;
  const int w = cfg.input_w;
  const int ps = cfg.patch_size;
  const int gh = cfg.grid_h();
  const int gw = cfg.grid_w();
  const int n = cfg.tokens();
  const int d = cfg.embed_dim;
  const int pd = cfg.patch_dim();
  if (input.size() != static_cast<std::size_t>(c) * h * w) {
    throw ShapeError("forward: input has " + std::to_string(input.size()) + " values, expected " +
                     std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w));
  }

  ForwardResult<T> res;
  ForwardCache<T>& cache = res.cache;
  cache.cfg = cfg;
  cache.input.assign(input.begin(), input.end());
  cache.patches.assign(static_cast<std::size_t>(n) * pd, T(0));
  for (int ty = 0; ty < gh; ++ty) {
    for (int tx = 0; tx < gw; ++tx) {
      T* row = cache.patches.data() + static_cast<std::size_t>(ty * gw + tx) * pd;
      for (int ch = 0; ch < c; ++ch) {
        for (int py = 0; py < ps; ++py) {
          const T* src = input.data() + (static_cast<std::size_t>(ch) * h + ty * ps + py) * w + tx * ps;
          std::copy(src, src + ps, row + (static_cast<std::size_t>(ch) * ps + py) * ps);
        }
      }
    }
  }

  std::vector<T> x(static_cast<std::size_t>(n) * d);
  linear_forward(cache.patches.data(), n, pd, tensor_ptr(params, l.patch_w), tensor_ptr(params, l.patch_b), d,
                 x.data());
  const T* pos = tensor_ptr(params, l.pos);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += pos[i];

  cache.blocks.resize(static_cast<std::size_t>(cfg.depth));
  for (int b = 0; b < cfg.depth; ++b) {
    x = block_forward(params, cfg, l.blocks[b], x, cache.blocks[b]);
    cache.block_outputs.push_back(x);
  }

  cache.logits = decoder_forward(params, cfg, l, cache.block_outputs, cache.decoder).data;
  cache.probabilities.resize(cache.logits.size());
  for (std::size_t i = 0; i < cache.logits.size(); ++i) cache.probabilities[i] = sigmoid(cache.logits[i]);
  res.mask = {w, h, cache.probabilities};
  return res;
}

template <typename T>
std::vector<T> decode_logits(const ViTParams<T>& params, const ViTConfig& cfg,
                             const std::vector<std::vector<T>>& block_outputs) {
  const Layout l = build_layout(cfg);
  check_params(l, params.tensors.size(), "decode_logits");
  if (block_outputs.size() != static_cast<std::size_t>(cfg.depth)) {
    throw ShapeError("decode_logits: expected one token grid per block");
  }
  DecoderCache<T> dc;
  return decoder_forward(params, cfg, l, block_outputs, dc).data;
}

template <typename T>
void backward_accumulate(const ViTParams<T>& params, const ViTConfig& cfg, const ForwardCache<T>& cache,
                         std::span<const T> d_prob, ViTParams<T>& grads) {
  const Layout l = build_layout(cfg);
  check_params(l, params.tensors.size(), "backward");
  check_params(l, grads.tensors.size(), "backward (gradient buffer)");
  if (d_prob.size() != cache.probabilities.size()) {
    throw ShapeError("backward: gradient size does not match the output mask");
  }
  const int n = cfg.tokens();
  const int d = cfg.embed_dim;
  const int pd = cfg.patch_dim();

  FeatureMap<T> dlogits(1, cfg.input_h, cfg.input_w);
  for (std::size_t i = 0; i < d_prob.size(); ++i) {
    const double p = cache.probabilities[i];
    dlogits.data[i] = static_cast<T>(d_prob[i] * p * (1.0 - p));
  }

  std::vector<std::vector<T>> d_blocks(static_cast<std::size_t>(cfg.depth),
                                       std::vector<T>(static_cast<std::size_t>(n) * d, T(0)));
  decoder_backward(params, cfg, l, cache.block_outputs, cache.decoder, dlogits, grads, d_blocks);

  std::vector<T> dx(static_cast<std::size_t>(n) * d, T(0));
  for (int b = cfg.depth - 1; b >= 0; --b) {
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d_blocks[b][i];
    dx = block_backward(params, cfg, l.blocks[b], cache.blocks[b], dx, grads);
  }

  T* dpos = tensor_ptr(grads, l.pos);
  for (std::size_t i = 0; i < dx.size(); ++i) dpos[i] += dx[i];
  linear_backward<T>(cache.patches.data(), n, pd, tensor_ptr(params, l.patch_w), d, dx.data(), nullptr,
                     tensor_ptr(grads, l.patch_w), tensor_ptr(grads, l.patch_b));
}

template <typename T>
ViTParams<T> backward(const ViTParams<T>& params, const ViTConfig& cfg, const ForwardCache<T>& cache,
                      std::span<const T> d_prob) {
  ViTParams<T> grads = params.zeros_like();
  backward_accumulate(params, cfg, cache, d_prob, grads);
  return grads;
}

#define CHANGESEG_INSTANTIATE_VIT(T)                                                              \
  template struct ViTParams<T>;                                                                   \
  template ViTParams<T> init_params<T>(const ViTConfig&);                                         \
  template ForwardResult<T> forward<T>(const ViTParams<T>&, const ViTConfig&, std::span<const T>); \
  template std::vector<T> decode_logits<T>(const ViTParams<T>&, const ViTConfig&,                 \
                                           const std::vector<std::vector<T>>&);                   \
  template void backward_accumulate<T>(const ViTParams<T>&, const ViTConfig&, const ForwardCache<T>&, \
                                       std::span<const T>, ViTParams<T>&);                        \
  template ViTParams<T> backward<T>(const ViTParams<T>&, const ViTConfig&, const ForwardCache<T>&, \
                                    std::span<const T>);

CHANGESEG_INSTANTIATE_VIT(float)
CHANGESEG_INSTANTIATE_VIT(double)

#undef CHANGESEG_INSTANTIATE_VIT

}  // namespace changeseg
