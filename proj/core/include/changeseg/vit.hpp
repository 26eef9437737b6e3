#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace changeseg {

enum class DecoderKind { kA, kB, kC };
DecoderKind parse_decoder_kind(const std::string& s);
std::string to_string(DecoderKind d);

// Architecture hyper-parameters. input_h/input_w fix the token count and
// therefore the size of the learned positional embedding: a model only
// accepts inputs of the size it was built for.
struct ViTConfig {
  int in_channels = 8;
  int patch_size = 16;
  int embed_dim = 128;
  int depth = 6;
  int num_heads = 4;
  int mlp_ratio = 4;
  DecoderKind decoder = DecoderKind::kA;
  // Blocks (1-based) tapped by decoder C; empty means default_skip_depths().
  std::vector<int> skip_depths;
  std::uint64_t rng_seed = 0;
  int input_h = 256;
  int input_w = 256;

  int grid_h() const { return input_h / patch_size; }
  int grid_w() const { return input_w / patch_size; }
  int tokens() const { return grid_h() * grid_w(); }
  int head_dim() const { return embed_dim / num_heads; }
  int hidden_dim() const { return embed_dim * mlp_ratio; }
  int patch_dim() const { return in_channels * patch_size * patch_size; }

  // Up to four evenly spaced taps ending at the last block:
  // 1 + floor((depth - 1) * i / (n - 1)), e.g. [1, 2, 4, 6] for depth 6.
  static std::vector<int> default_skip_depths(int depth);
  std::vector<int> effective_skip_depths() const;

  // Throws InvalidArgument on divisibility or decoder constraints.
  void validate() const;

  // in=8, ps=8, dim=32, depth=2, heads=4, decoder A.
  static ViTConfig desk_scale(int input_size);

  bool operator==(const ViTConfig&) const = default;
};
nlohmann::json to_json(const ViTConfig& c);
// Unknown keys are rejected.
ViTConfig vit_config_from_json(const nlohmann::json& j, ViTConfig base = {});

// Channel widths of decoder B stages / decoder C ladder levels: starts at
// embed_dim and halves per stage, never below 1.
std::vector<int> decoder_channel_widths(int embed_dim, int stages);

enum class InitKind { kTruncNormal, kZero, kOne };

struct TensorSpec {
  std::string name;
  std::vector<int> shape;
  InitKind init = InitKind::kTruncNormal;

  std::size_t numel() const;
};

// Ordered tensor list of a model; a pure function of the config.
std::vector<TensorSpec> param_layout(const ViTConfig& cfg);
std::size_t parameter_count(const ViTConfig& cfg);

template <typename T>
struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<T> values;

  std::size_t numel() const { return values.size(); }
};

template <typename T>
struct ViTParams {
  std::vector<Tensor<T>> tensors;

  std::size_t parameter_count() const;
  Tensor<T>& get(const std::string& name);
  const Tensor<T>& get(const std::string& name) const;
  ViTParams zeros_like() const;
  void set_zero();
  // this += other, tensor by tensor.
  void add(const ViTParams& other);
  void scale(T factor);
  bool all_finite() const;

  template <typename U>
  ViTParams<U> cast() const {
    ViTParams<U> out;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) {
      Tensor<U> c{t.name, t.shape, {}};
      c.values.assign(t.values.begin(), t.values.end());
      out.tensors.push_back(std::move(c));
    }
    return out;
  }
};

// Weights ~ N(0, 0.02^2) truncated at +-2 sd; biases and norm shifts 0; norm
// scales 1. Deterministic in cfg.rng_seed.
template <typename T>
ViTParams<T> init_params(const ViTConfig& cfg);

// Per-pixel affected probability, row-major.
template <typename T>
struct ProbabilityMask {
  int width = 0;
  int height = 0;
  std::vector<T> values;
};

// C x H x W feature map.
template <typename T>
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w) : channels(c), height(h), width(w),
      data(static_cast<std::size_t>(c) * h * w, T(0)) {}
};

template <typename T>
struct LayerNormCache {
  std::vector<T> xhat;  // N x D
  std::vector<T> rstd;  // N
};

template <typename T>
struct BlockCache {
  std::vector<T> input;   // N x D residual stream entering the block
  LayerNormCache<T> ln1;
  std::vector<T> normed1; // N x D
  std::vector<T> q, k, v; // N x D
  std::vector<T> attn;    // heads x N x N, post-softmax
  std::vector<T> context; // N x D, concatenated head outputs
  std::vector<T> mid;     // N x D after the attention residual
  LayerNormCache<T> ln2;
  std::vector<T> normed2; // N x D
  std::vector<T> pre_act; // N x hidden
  std::vector<T> act;     // N x hidden
};

// One decoder step; which fields are used depends on the step kind.
template <typename T>
struct DecoderCache {
  // Decoder B stages / decoder C fusions: input to the 3x3 conv and its
  // pre-activation output.
  std::vector<FeatureMap<T>> conv_inputs;
  std::vector<FeatureMap<T>> pre_acts;
  // Decoder C: projected skip maps before nearest upsampling.
  std::vector<FeatureMap<T>> skip_projected;
  FeatureMap<T> head_input;   // input of the final conv
  FeatureMap<T> head_output;  // low-resolution logits before bilinear resize
};

template <typename T>
struct ForwardCache {
  ViTConfig cfg;
  std::vector<T> input;          // C x H x W
  std::vector<T> patches;        // N x patch_dim
  std::vector<BlockCache<T>> blocks;
  // Residual stream after every block: block_outputs[i] leaves block i+1.
  std::vector<std::vector<T>> block_outputs;
  DecoderCache<T> decoder;
  std::vector<T> logits;         // H x W
  std::vector<T> probabilities;  // H x W
};

template <typename T>
struct ForwardResult {
  ProbabilityMask<T> mask;
  ForwardCache<T> cache;
};

// `input` is C x H x W with C, H, W from cfg.
template <typename T>
ForwardResult<T> forward(const ViTParams<T>& params, const ViTConfig& cfg,
                         std::span<const T> input);

// Decoder head alone: token grids after each block -> H x W logits.
template <typename T>
std::vector<T> decode_logits(const ViTParams<T>& params, const ViTConfig& cfg,
                             const std::vector<std::vector<T>>& block_outputs);

// Reverse-mode gradient of a scalar loss given dLoss/dprobability.
template <typename T>
ViTParams<T> backward(const ViTParams<T>& params, const ViTConfig& cfg,
                      const ForwardCache<T>& cache, std::span<const T> d_prob);

// Accumulating variant: grads += gradient.
template <typename T>
void backward_accumulate(const ViTParams<T>& params, const ViTConfig& cfg,
                         const ForwardCache<T>& cache, std::span<const T> d_prob,
                         ViTParams<T>& grads);

}  // namespace changeseg
