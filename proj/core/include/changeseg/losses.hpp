#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace changeseg {

inline constexpr double kProbabilityClamp = 1e-7;
inline constexpr double kDefaultSmooth = 1.0;

struct LossTerms {
  std::optional<double> bce;
  std::optional<double> dice;
  std::optional<double> iou;
};

struct LossValue {
  double value = 0.0;
  LossTerms terms;
};

// Losses over post-sigmoid probabilities x and binary targets y. Each
// function optionally writes dLoss/dx into `grad` (same length as x).
// x is clamped to [1e-7, 1 - 1e-7] for the BCE logarithms; the clamp has zero
// derivative outside that interval.
LossValue bce(std::span<const double> x, std::span<const double> y,
              std::span<double> grad = {});

// 1 - (2 sum xy + smooth) / (sum x + sum y + smooth)
LossValue dice_loss(std::span<const double> x, std::span<const double> y,
                    double smooth = kDefaultSmooth, std::span<double> grad = {});

LossValue bce_dice(std::span<const double> x, std::span<const double> y,
                   double smooth = kDefaultSmooth, std::span<double> grad = {});

// 1 - (sum xy + smooth) / (sum (x + y - xy) + smooth)
LossValue iou_loss(std::span<const double> x, std::span<const double> y,
                   double smooth = kDefaultSmooth, std::span<double> grad = {});

}  // namespace changeseg
