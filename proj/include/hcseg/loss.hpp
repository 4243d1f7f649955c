#pragma once

// Training objective: distance-weighted binary cross-entropy plus soft Dice.
//
//   loss = mean_x( w(x) * bce(P(x), G(x)) ) + (1 - softDice(P, G))
//   w(x) = 1 + omega0 * exp(-d(x)^2 / (2 sigma^2))      (gaussian form)
//
// d(x) is the Euclidean pixel distance to the nearest ground-truth boundary
// pixel, so pixels on the head outline carry the largest weight.

#include <vector>

#include "hcseg/image.hpp"
#include "hcseg/tensor.hpp"

namespace hcseg {

enum class WeightForm {
  kGaussian,  // 1 + omega0 * exp(-d^2 / (2 sigma^2))
  kLiteral,   // 1 + omega0 * exp(d / (2 sigma^2)), grows with distance
};

struct LossConfig {
  double omega0 = 30.0;
  double sigma = 10.0;  // pixels
  double clamp_epsilon = 1e-7;
  double smooth_epsilon = 1.0;
  WeightForm form = WeightForm::kGaussian;

  void validate() const;
};

/// Foreground pixels that are 4-adjacent to background or on the image border.
Mask boundary_mask(const Mask& mask);

/// Exact Euclidean distance from every pixel to the nearest boundary pixel.
/// Throws std::invalid_argument for masks without both foreground and
/// background.
Image distance_map(const Mask& mask);

Image weight_map(const Mask& mask, const LossConfig& cfg);

/// (2 sum(p g) + eps) / (sum(p) + sum(g) + eps), over every element.
template <typename T>
BasicTensor<T> soft_dice(const BasicTensor<T>& pred, const BasicTensor<T>& gt, const LossConfig& cfg);

/// Per-pixel -(g log p + (1 - g) log(1 - p)) with p clamped to [eps, 1 - eps].
template <typename T>
BasicTensor<T> bce_map(const BasicTensor<T>& pred, const BasicTensor<T>& gt, const LossConfig& cfg);

/// Mean of bce_map.
template <typename T>
BasicTensor<T> bce(const BasicTensor<T>& pred, const BasicTensor<T>& gt, const LossConfig& cfg);

/// Weighted BCE + (1 - soft Dice) with precomputed per-pixel weights (same
/// shape as pred).
template <typename T>
BasicTensor<T> l_ln(const BasicTensor<T>& pred, const BasicTensor<T>& gt, const BasicTensor<T>& weights,
                    const LossConfig& cfg);

/// As above, deriving the weights from gt. The last two axes of gt are the
/// image plane; leading axes index independent masks.
template <typename T>
BasicTensor<T> l_ln(const BasicTensor<T>& pred, const BasicTensor<T>& gt, const LossConfig& cfg);

/// Weight maps for every mask in a (..., h, w) ground-truth tensor.
template <typename T>
BasicTensor<T> weight_tensor(const BasicTensor<T>& gt, const LossConfig& cfg);

}  // namespace hcseg
