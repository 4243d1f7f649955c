#include "hcseg/loss.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "hcseg/ops.hpp"

namespace hcseg {

void LossConfig::validate() const {
  if (!(omega0 >= 0)) throw std::invalid_argument("omega0 must be non-negative");
  if (!(sigma > 0)) throw std::invalid_argument("sigma must be positive");
  if (!(clamp_epsilon > 0) || clamp_epsilon >= 0.5) throw std::invalid_argument("clamp epsilon must be in (0, 0.5)");
  if (!(smooth_epsilon > 0)) throw std::invalid_argument("smooth epsilon must be positive");
}

Mask boundary_mask(const Mask& mask) {
  Mask b(mask.rows, mask.cols);
  for (std::size_t r = 0; r < mask.rows; ++r) {
    for (std::size_t c = 0; c < mask.cols; ++c) {
      if (!mask(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r + 1 == mask.rows || c + 1 == mask.cols;
      b(r, c) = edge || !mask(r - 1, c) || !mask(r + 1, c) || !mask(r, c - 1) || !mask(r, c + 1);
    }
  }
  return b;
}

namespace {

// 1-D squared distance transform of a sampled function: the lower envelope of
// parabolas rooted at each finite sample. Infinite samples never contribute.
void squared_edt_1d(const double* f, std::size_t n, std::size_t stride, double* out, std::vector<std::size_t>& v,
                    std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  auto root = [&](std::size_t q) { return f[q * stride] + static_cast<double>(q) * static_cast<double>(q); };
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q * stride] == inf) continue;
    if (!any) {
      any = true;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s = 0.0;
    // z[0] is -inf, so the scan stops at k == 0 at the latest.
    while ((s = (root(q) - root(v[k])) / (2.0 * static_cast<double>(q - v[k]))) <= z[k]) --k;
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (!any) {
    for (std::size_t q = 0; q < n; ++q) out[q * stride] = inf;
    return;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const auto dq = static_cast<double>(q);
    while (z[k + 1] < dq) ++k;
    const auto d = dq - static_cast<double>(v[k]);
    out[q * stride] = d * d + f[v[k] * stride];
  }
}

}  // namespace

Image distance_map(const Mask& mask) {
  const std::size_t fg = count_foreground(mask);
  if (fg == 0) throw std::invalid_argument("distance_map: mask has no foreground, boundary undefined");
  if (fg == mask.size()) throw std::invalid_argument("distance_map: mask has no background, boundary undefined");
  const Mask boundary = boundary_mask(mask);
  constexpr double inf = std::numeric_limits<double>::infinity();
  Image f(mask.rows, mask.cols, inf);
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (boundary.data[i]) f.data[i] = 0.0;
  }
  Image tmp(mask.rows, mask.cols);
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (std::size_t c = 0; c < mask.cols; ++c) squared_edt_1d(&f(0, c), mask.rows, mask.cols, &tmp(0, c), v, z);
  Image out(mask.rows, mask.cols);
  for (std::size_t r = 0; r < mask.rows; ++r) squared_edt_1d(&tmp(r, 0), mask.cols, 1, &out(r, 0), v, z);
  for (auto& d : out.data) d = std::sqrt(d);
  return out;
}

Image weight_map(const Mask& mask, const LossConfig& cfg) {
  cfg.validate();
  Image w = distance_map(mask);
  const double two_sigma_sq = 2.0 * cfg.sigma * cfg.sigma;
  for (auto& d : w.data) {
    d = cfg.form == WeightForm::kGaussian ? 1.0 + cfg.omega0 * std::exp(-d * d / two_sigma_sq)
                                          : 1.0 + cfg.omega0 * std::exp(d / two_sigma_sq);
  }
  return w;
}

namespace {

template <typename T>
void require_match(const BasicTensor<T>& pred, const BasicTensor<T>& gt, const char* op) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError(std::string(op) + ": prediction " + to_string(pred.shape()) + " vs ground truth " +
                     to_string(gt.shape()));
  }
}

}  // namespace

template <typename T>
BasicTensor<T> soft_dice(const BasicTensor<T>& pred, const BasicTensor<T>& gt, const LossConfig& cfg) {
  require_match(pred, gt, "soft_dice");
  const T eps = static_cast<T>(cfg.smooth_epsilon);
  auto numerator = add_scalar(mul_scalar(sum(mul(pred, gt)), T(2)), eps);
  auto denominator = add_scalar(add(sum(pred), sum(gt)), eps);
  return div(numerator, denominator);
}

template <typename T>
BasicTensor<T> bce_map(const BasicTensor<T>& pred, const BasicTensor<T>& gt, const LossConfig& cfg) {
  require_match(pred, gt, "bce");
  const T eps = static_cast<T>(cfg.clamp_epsilon);
  auto p = clamp(pred, eps, T(1) - eps);
  auto one_minus_gt = add_scalar(mul_scalar(gt, T(-1)), T(1));
  auto one_minus_p = add_scalar(mul_scalar(p, T(-1)), T(1));
  return mul_scalar(add(mul(gt, log(p)), mul(one_minus_gt, log(one_minus_p))), T(-1));
}

template <typename T>
BasicTensor<T> bce(const BasicTensor<T>& pred, const BasicTensor<T>& gt, const LossConfig& cfg) {
  return mean(bce_map(pred, gt, cfg));
}

template <typename T>
BasicTensor<T> l_ln(const BasicTensor<T>& pred, const BasicTensor<T>& gt, const BasicTensor<T>& weights,
                    const LossConfig& cfg) {
  require_match(pred, weights, "l_ln weights");
  auto weighted = mean(mul(weights, bce_map(pred, gt, cfg)));
  return add_scalar(sub(weighted, soft_dice(pred, gt, cfg)), T(1));
}

template <typename T>
BasicTensor<T> weight_tensor(const BasicTensor<T>& gt, const LossConfig& cfg) {
  if (gt.rank() < 2) throw ShapeError("weight_tensor: need at least (h, w), got " + to_string(gt.shape()));
  const std::size_t h = gt.dim(gt.rank() - 2), w = gt.dim(gt.rank() - 1);
  const std::size_t plane = h * w;
  std::vector<T> out(gt.size());
  for (std::size_t m = 0; m < gt.size() / plane; ++m) {
    Mask mask(h, w);
    for (std::size_t i = 0; i < plane; ++i) mask.data[i] = gt[m * plane + i] > T(0.5) ? 1 : 0;
    const Image wm = weight_map(mask, cfg);
    for (std::size_t i = 0; i < plane; ++i) out[m * plane + i] = static_cast<T>(wm.data[i]);
  }
  return BasicTensor<T>(gt.shape(), std::move(out));
}

template <typename T>
BasicTensor<T> l_ln(const BasicTensor<T>& pred, const BasicTensor<T>& gt, const LossConfig& cfg) {
  require_match(pred, gt, "l_ln");
  return l_ln(pred, gt, weight_tensor(gt, cfg), cfg);
}

#define HCSEG_INSTANTIATE_LOSS(T)                                                                                 \
  template BasicTensor<T> soft_dice(const BasicTensor<T>&, const BasicTensor<T>&, const LossConfig&);             \
  template BasicTensor<T> bce_map(const BasicTensor<T>&, const BasicTensor<T>&, const LossConfig&);               \
  template BasicTensor<T> bce(const BasicTensor<T>&, const BasicTensor<T>&, const LossConfig&);                   \
  template BasicTensor<T> l_ln(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,               \
                               const LossConfig&);                                                                \
  template BasicTensor<T> l_ln(const BasicTensor<T>&, const BasicTensor<T>&, const LossConfig&);                  \
  template BasicTensor<T> weight_tensor(const BasicTensor<T>&, const LossConfig&);

HCSEG_INSTANTIATE_LOSS(float)
HCSEG_INSTANTIATE_LOSS(double)

}  // namespace hcseg
