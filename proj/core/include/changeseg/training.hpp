#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "changeseg/vit.hpp"

namespace changeseg {

enum class LossKind { kBce, kBceDice, kTwoStage };
LossKind parse_loss_kind(const std::string& s);
std::string to_string(LossKind k);

struct TrainConfig {
  LossKind loss = LossKind::kBce;
  double learning_rate = 1e-4;
  int batch_size = 8;
  int max_epochs = 100;
  double plateau_rel_delta = 1e-3;
  int plateau_patience = 5;
  double val_fraction = 0.2;
  std::uint64_t rng_seed = 0;
  int checkpoint_every = 0;  // epochs; 0 disables periodic checkpoints
  double smooth = 1.0;       // Dice / IoU smoothing

  void validate() const;
};
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

// Adam constants.
inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;
// Probability threshold that turns a prediction into a binary mask.
inline constexpr float kBinarizeThreshold = 0.5f;

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  int stage = 1;
  double wall_time = 0.0;  // seconds spent in this epoch
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  // Epoch (0-based) at which the stage-1 plateau fired; stage 2 starts with
  // the following epoch.
  std::optional<int> stage_switch_epoch;

  std::vector<double> val_series(int stage) const;
  // One JSON object per epoch, newline-terminated.
  std::string to_jsonl() const;
};
nlohmann::json to_json(const EpochRecord& e);
EpochRecord epoch_record_from_json(const nlohmann::json& j);

// One training example: C x H x W input and H x W binary label.
struct PatchSample {
  std::vector<float> input;
  std::vector<float> label;
};

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Seeded shuffle of [0, count); val gets round(count * val_fraction) items,
// clamped so both sides keep at least one. Throws for count < 2.
DatasetSplit split_dataset(std::size_t count, double val_fraction, std::uint64_t seed);

// True when each of the last `patience` epochs improved on the best value
// seen before it by a relative amount no greater than rel_delta.
bool detect_plateau(std::span<const double> val_losses, double rel_delta, int patience);

struct AdamState {
  ViTParams<float> m;
  ViTParams<float> v;
  std::int64_t step = 0;
};

// Everything needed to continue a run bit-exactly.
struct TrainState {
  ViTParams<float> params;
  AdamState adam;
  TrainHistory history;
  int next_epoch = 0;
  int stage = 1;
  bool finished = false;
};

struct TrainOptions {
  // Directory for periodic checkpoints (checkpoint_every > 0).
  std::optional<std::filesystem::path> checkpoint_dir;
  // Stop after this many epochs in this call (used to test resume).
  std::optional<int> stop_after_epochs;
  // Called after every optimizer step with the averaged batch gradient.
  std::function<void(const ViTParams<float>&)> on_gradient;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  TrainState state;
};

TrainState initial_train_state(const ViTParams<float>& params);

// Mini-batch Adam over `data` with the schedule in tcfg. Throws
// NumericalError naming epoch and batch when a loss is not finite.
TrainResult train(const ViTParams<float>& params, const ViTConfig& cfg,
                  const std::vector<PatchSample>& data, const TrainConfig& tcfg,
                  const TrainOptions& options = {});

// Continues from a saved state with the same data and configs.
TrainResult resume_training(TrainState state, const ViTConfig& cfg,
                            const std::vector<PatchSample>& data, const TrainConfig& tcfg,
                            const TrainOptions& options = {});

// Probabilities for one C x H x W sample.
std::vector<float> predict(const ViTParams<float>& params, const ViTConfig& cfg,
                           std::span<const float> input);

}  // namespace changeseg
