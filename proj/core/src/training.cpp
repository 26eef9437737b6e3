#include "changeseg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "changeseg/checkpoint.hpp"
#include "changeseg/error.hpp"
#include "changeseg/losses.hpp"
#include "changeseg/parallel.hpp"
#include "changeseg/rng.hpp"

namespace changeseg {

using nlohmann::json;

namespace {

// Stream id of the train/val split; epoch shuffles use stream = epoch + 1.
constexpr std::uint64_t kSplitStream = 0;
// Absorbs rounding in the relative-improvement ratio so that an improvement
// of exactly rel_delta (as written in decimal) still counts as stalled.
constexpr double kPlateauSlack = 1e-12;

}  // namespace

LossKind parse_loss_kind(const std::string& s) {
  if (s == "bce") return LossKind::kBce;
  if (s == "bce_dice") return LossKind::kBceDice;
  if (s == "two_stage") return LossKind::kTwoStage;
  throw InvalidArgument("unknown loss '" + s + "' (expected bce|bce_dice|two_stage)");
}

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::kBce: return "bce";
    case LossKind::kBceDice: return "bce_dice";
    case LossKind::kTwoStage: return "two_stage";
  }
  return "?";
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw InvalidArgument("train config: " + m); };
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_epochs < 1) fail("max_epochs must be >= 1");
  if (!(plateau_rel_delta >= 0.0)) fail("plateau_rel_delta must be >= 0");
  if (plateau_patience < 1) fail("plateau_patience must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail("val_fraction must lie in (0, 1)");
  if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
  if (!(smooth >= 0.0)) fail("smooth must be >= 0");
}

json to_json(const TrainConfig& c) {
  return {{"loss", to_string(c.loss)},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"plateau_rel_delta", c.plateau_rel_delta},
          {"plateau_patience", c.plateau_patience},
          {"val_fraction", c.val_fraction},
          {"rng_seed", c.rng_seed},
          {"checkpoint_every", c.checkpoint_every},
          {"smooth", c.smooth}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  static const std::set<std::string> kKeys{"loss",         "learning_rate",    "batch_size",
                                           "max_epochs",   "plateau_rel_delta", "plateau_patience",
                                           "val_fraction", "rng_seed",         "checkpoint_every",
                                           "smooth"};
  if (!j.is_object()) throw InvalidArgument("train config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.contains(key)) throw InvalidArgument("unknown train config key '" + key + "'");
  }
  try {
    if (j.contains("loss")) c.loss = parse_loss_kind(j["loss"].get<std::string>());
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.plateau_rel_delta = j.value("plateau_rel_delta", c.plateau_rel_delta);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.smooth = j.value("smooth", c.smooth);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed train config: ") + e.what());
  }
  return c;
}

std::vector<double> TrainHistory::val_series(int stage) const {
  std::vector<double> out;
  for (const auto& e : epochs) {
    if (e.stage == stage) out.push_back(e.val_loss);
  }
  return out;
}

json to_json(const EpochRecord& e) {
  return {{"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"val_loss", e.val_loss},
          {"stage", e.stage},
          {"wall_time", e.wall_time}};
}

EpochRecord epoch_record_from_json(const json& j) {
  try {
    EpochRecord e;
    e.epoch = j.at("epoch").get<int>();
    e.train_loss = j.at("train_loss").get<double>();
    e.val_loss = j.at("val_loss").get<double>();
    e.stage = j.at("stage").get<int>();
    e.wall_time = j.value("wall_time", 0.0);
    return e;
  } catch (const json::exception& ex) {
    throw FormatError(std::string("malformed epoch record: ") + ex.what());
  }
}

std::string TrainHistory::to_jsonl() const {
  std::string out;
  for (const auto& e : epochs) {
    json j = to_json(e);
    if (stage_switch_epoch && e.epoch == *stage_switch_epoch) j["stage_switch"] = true;
    out += j.dump();
    out += '\n';
  }
  return out;
}

DatasetSplit split_dataset(std::size_t count, double val_fraction, std::uint64_t seed) {
  if (count < 2) throw InvalidArgument("split_dataset needs at least 2 patches, got " + std::to_string(count));
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw InvalidArgument("val_fraction must lie in (0, 1)");
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed, kSplitStream);
  rng.shuffle(idx);
  auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(count) * val_fraction));
  n_val = std::clamp<std::size_t>(n_val, 1, count - 1);
  DatasetSplit s;
  s.val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

bool detect_plateau(std::span<const double> val_losses, double rel_delta, int patience) {
  if (patience < 1) return false;
  const auto n = val_losses.size();
  // Each of the last `patience` epochs needs a predecessor to compare with.
  if (n < static_cast<std::size_t>(patience) + 1) return false;
  for (std::size_t i = n - static_cast<std::size_t>(patience); i < n; ++i) {
    const double best = *std::min_element(val_losses.begin(), val_losses.begin() + static_cast<std::ptrdiff_t>(i));
    const double improvement = best - val_losses[i];
    const double rel = best != 0.0 ? improvement / std::abs(best) : (improvement > 0.0 ? 1.0 : 0.0);
    if (rel > rel_delta + kPlateauSlack) return false;
  }
  return true;
}

TrainState initial_train_state(const ViTParams<float>& params) {
  TrainState s;
  s.params = params;
  s.adam.m = params.zeros_like();
  s.adam.v = params.zeros_like();
  return s;
}

namespace {

LossValue stage_loss(const TrainConfig& tcfg, int stage, std::span<const double> x, std::span<const double> y,
                     std::span<double> grad) {
  switch (tcfg.loss) {
    case LossKind::kBce: return bce(x, y, grad);
    case LossKind::kBceDice: return bce_dice(x, y, tcfg.smooth, grad);
    case LossKind::kTwoStage: return stage == 1 ? bce(x, y, grad) : iou_loss(x, y, tcfg.smooth, grad);
  }
  throw InvalidArgument("unknown loss kind");
}

void check_data(const ViTConfig& cfg, const std::vector<PatchSample>& data) {
  const std::size_t in = static_cast<std::size_t>(cfg.in_channels) * cfg.input_h * cfg.input_w;
  const std::size_t px = static_cast<std::size_t>(cfg.input_h) * cfg.input_w;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].input.size() != in || data[i].label.size() != px) {
      throw ShapeError("training sample " + std::to_string(i) + " does not match the model input shape " +
                       std::to_string(cfg.in_channels) + "x" + std::to_string(cfg.input_h) + "x" +
                       std::to_string(cfg.input_w));
    }
  }
}

// Forward every sample of `batch`; returns per-sample caches.
std::vector<ForwardCache<float>> forward_batch(const ViTParams<float>& params, const ViTConfig& cfg,
                                               const std::vector<PatchSample>& data,
                                               const std::vector<std::size_t>& batch) {
  std::vector<ForwardCache<float>> caches(batch.size());
  parallel_for(0, batch.size(), [&](std::size_t i) {
    caches[i] = forward<float>(params, cfg, data[batch[i]].input).cache;
  });
  return caches;
}

// Loss over the concatenated pixels of every sample in the batch.
LossValue batch_loss(const TrainConfig& tcfg, int stage, const std::vector<ForwardCache<float>>& caches,
                     const std::vector<PatchSample>& data, const std::vector<std::size_t>& batch,
                     std::vector<double>* grad) {
  std::vector<double> x, y;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    x.insert(x.end(), caches[i].probabilities.begin(), caches[i].probabilities.end());
    y.insert(y.end(), data[batch[i]].label.begin(), data[batch[i]].label.end());
  }
  if (grad) grad->assign(x.size(), 0.0);
  return stage_loss(tcfg, stage, x, y, grad ? std::span<double>(*grad) : std::span<double>{});
}

double validation_loss(const ViTParams<float>& params, const ViTConfig& cfg, const std::vector<PatchSample>& data,
                       const std::vector<std::size_t>& val, const TrainConfig& tcfg, int stage) {
  std::vector<std::vector<float>> probs(val.size());
  parallel_for(0, val.size(), [&](std::size_t i) { probs[i] = predict(params, cfg, data[val[i]].input); });
  std::vector<double> x, y;
  for (std::size_t i = 0; i < val.size(); ++i) {
    x.insert(x.end(), probs[i].begin(), probs[i].end());
    y.insert(y.end(), data[val[i]].label.begin(), data[val[i]].label.end());
  }
  return stage_loss(tcfg, stage, x, y, {}).value;
}

void adam_step(TrainState& s, const ViTParams<float>& grad, double lr) {
  s.adam.step += 1;
  const double t = static_cast<double>(s.adam.step);
  const double c1 = 1.0 - std::pow(kAdamBeta1, t);
  const double c2 = 1.0 - std::pow(kAdamBeta2, t);
  for (std::size_t k = 0; k < s.params.tensors.size(); ++k) {
    auto& p = s.params.tensors[k].values;
    auto& m = s.adam.m.tensors[k].values;
    auto& v = s.adam.v.tensors[k].values;
    const auto& g = grad.tensors[k].values;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * gi;
      const double vi = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      p[i] = static_cast<float>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + kAdamEps));
    }
  }
}

void write_periodic_checkpoint(const TrainState& s, const ViTConfig& cfg, const TrainConfig& tcfg,
                               const std::filesystem::path& dir) {
  Checkpoint ck;
  ck.config = cfg;
  ck.params = s.params;
  ck.train_config = tcfg;
  ck.train_state = s;
  ck.tile_size = cfg.input_h;
  std::filesystem::create_directories(dir);
  save_checkpoint(ck, dir / "checkpoint.json");
}

TrainResult run(TrainState state, const ViTConfig& cfg, const std::vector<PatchSample>& data,
                const TrainConfig& tcfg, const TrainOptions& options) {
  cfg.validate();
  tcfg.validate();
  check_data(cfg, data);
  if (state.params.tensors.size() != param_layout(cfg).size()) {
    throw ShapeError("training: parameters do not match the model config");
  }
  const DatasetSplit split = split_dataset(data.size(), tcfg.val_fraction, tcfg.rng_seed);
  const auto batch = static_cast<std::size_t>(tcfg.batch_size);
  int epochs_this_call = 0;

  while (!state.finished && state.next_epoch < tcfg.max_epochs) {
    if (options.stop_after_epochs && epochs_this_call >= *options.stop_after_epochs) break;
    const auto t0 = std::chrono::steady_clock::now();
    const int epoch = state.next_epoch;
    const int stage = state.stage;

    std::vector<std::size_t> order = split.train;
    Rng rng(tcfg.rng_seed, static_cast<std::uint64_t>(epoch) + 1);
    rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t loss_weight = 0;
    for (std::size_t start = 0, b = 0; start < order.size(); start += batch, ++b) {
      const std::vector<std::size_t> ids(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(start + batch, order.size())));
      const auto caches = forward_batch(state.params, cfg, data, ids);
      std::vector<double> grad;
      const LossValue lv = batch_loss(tcfg, stage, caches, data, ids, &grad);
      if (!std::isfinite(lv.value)) {
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b));
      }
      loss_sum += lv.value * static_cast<double>(ids.size());
      loss_weight += ids.size();

      const std::size_t px = caches.front().probabilities.size();
      std::vector<ViTParams<float>> per_sample(ids.size());
      parallel_for(0, ids.size(), [&](std::size_t i) {
        std::vector<float> dprob(grad.begin() + static_cast<std::ptrdiff_t>(i * px),
                                 grad.begin() + static_cast<std::ptrdiff_t>((i + 1) * px));
        per_sample[i] = backward<float>(state.params, cfg, caches[i], dprob);
      });
      ViTParams<float> total = std::move(per_sample.front());
      for (std::size_t i = 1; i < per_sample.size(); ++i) total.add(per_sample[i]);
      if (!total.all_finite()) {
        throw NumericalError("non-finite gradient at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b));
      }
      if (options.on_gradient) options.on_gradient(total);
      adam_step(state, total, tcfg.learning_rate);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.stage = stage;
    rec.train_loss = loss_sum / static_cast<double>(loss_weight);
    rec.val_loss = validation_loss(state.params, cfg, data, split.val, tcfg, stage);
    if (!std::isfinite(rec.val_loss)) {
      throw NumericalError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.history.epochs.push_back(rec);
    state.next_epoch = epoch + 1;
    ++epochs_this_call;

    const auto series = state.history.val_series(stage);
    if (detect_plateau(series, tcfg.plateau_rel_delta, tcfg.plateau_patience)) {
      if (tcfg.loss == LossKind::kTwoStage && stage == 1) {
        state.history.stage_switch_epoch = epoch;
        state.stage = 2;
      } else {
        state.finished = true;
      }
    }
    if (state.next_epoch >= tcfg.max_epochs) state.finished = true;

    if (options.on_epoch) options.on_epoch(rec);
    if (options.checkpoint_dir && tcfg.checkpoint_every > 0 && state.next_epoch % tcfg.checkpoint_every == 0) {
      write_periodic_checkpoint(state, cfg, tcfg, *options.checkpoint_dir);
    }
  }
  return TrainResult{std::move(state)};
}

}  // namespace

TrainResult train(const ViTParams<float>& params, const ViTConfig& cfg, const std::vector<PatchSample>& data,
                  const TrainConfig& tcfg, const TrainOptions& options) {
  return run(initial_train_state(params), cfg, data, tcfg, options);
}

TrainResult resume_training(TrainState state, const ViTConfig& cfg, const std::vector<PatchSample>& data,
                            const TrainConfig& tcfg, const TrainOptions& options) {
  if (state.adam.m.tensors.size() != state.params.tensors.size() ||
      state.adam.v.tensors.size() != state.params.tensors.size()) {
    throw ShapeError("resume: optimizer state does not match the parameters");
  }
  return run(std::move(state), cfg, data, tcfg, options);
}

std::vector<float> predict(const ViTParams<float>& params, const ViTConfig& cfg, std::span<const float> input) {
  return forward<float>(params, cfg, input).cache.probabilities;
}

}  // namespace changeseg
