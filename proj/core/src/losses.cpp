#include "changeseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "changeseg/error.hpp"

namespace changeseg {

namespace {

void check_operands(std::span<const double> x, std::span<const double> y, std::span<double> grad,
                    const char* what) {
  if (x.empty()) throw InvalidArgument(std::string(what) + ": empty input");
  if (x.size() != y.size()) {
    throw ShapeError(std::string(what) + ": prediction/target length mismatch (" +
                     std::to_string(x.size()) + " vs " + std::to_string(y.size()) + ")");
  }
  if (!grad.empty() && grad.size() != x.size()) {
    throw ShapeError(std::string(what) + ": gradient buffer length mismatch");
  }
}

}  // namespace

LossValue bce(std::span<const double> x, std::span<const double> y, std::span<double> grad) {
  check_operands(x, y, grad, "bce");
  const double eps = kProbabilityClamp;
  const double n = static_cast<double>(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xc = std::clamp(x[i], eps, 1.0 - eps);
    sum += y[i] * std::log(xc) + (1.0 - y[i]) * std::log(1.0 - xc);
    if (!grad.empty()) {
      const bool interior = x[i] > eps && x[i] < 1.0 - eps;
      grad[i] = interior ? -(y[i] / xc - (1.0 - y[i]) / (1.0 - xc)) / n : 0.0;
    }
  }
  LossValue v;
  v.value = -sum / n;
  v.terms.bce = v.value;
  return v;
}

LossValue dice_loss(std::span<const double> x, std::span<const double> y, double smooth,
                    std::span<double> grad) {
  check_operands(x, y, grad, "dice_loss");
  double inter = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    inter += x[i] * y[i];
    total += x[i] + y[i];
  }
  const double num = 2.0 * inter + smooth;
  const double den = total + smooth;
  LossValue v;
  if (den == 0.0) {
    // Empty prediction and target without smoothing: treated as perfect.
    v.value = 0.0;
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  } else {
    v.value = 1.0 - num / den;
    if (!grad.empty()) {
      const double den2 = den * den;
      for (std::size_t i = 0; i < x.size(); ++i) grad[i] = -(2.0 * y[i] * den - num) / den2;
    }
  }
  v.terms.dice = v.value;
  return v;
}

LossValue bce_dice(std::span<const double> x, std::span<const double> y, double smooth,
                   std::span<double> grad) {
  check_operands(x, y, grad, "bce_dice");
  std::vector<double> g_dice(grad.empty() ? 0 : grad.size());
  const LossValue b = bce(x, y, grad);
  const LossValue d = dice_loss(x, y, smooth, g_dice);
  if (!grad.empty()) {
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g_dice[i];
  }
  LossValue v;
  v.value = b.value + d.value;
  v.terms.bce = b.value;
  v.terms.dice = d.value;
  return v;
}

LossValue iou_loss(std::span<const double> x, std::span<const double> y, double smooth,
                   std::span<double> grad) {
  check_operands(x, y, grad, "iou_loss");
  double inter = 0.0;
  double uni = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    inter += x[i] * y[i];
    uni += x[i] + y[i] - x[i] * y[i];
  }
  const double num = inter + smooth;
  const double den = uni + smooth;
  LossValue v;
  if (den == 0.0) {
    v.value = 0.0;
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  } else {
    v.value = 1.0 - num / den;
    if (!grad.empty()) {
      const double den2 = den * den;
      for (std::size_t i = 0; i < x.size(); ++i) {
        grad[i] = -(y[i] * den - num * (1.0 - y[i])) / den2;
      }
    }
  }
  v.terms.iou = v.value;
  return v;
}

}  // namespace changeseg
