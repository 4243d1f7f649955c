#pragma once

// Differentiable primitive operations on BasicTensor.
//
// Binary elementwise ops demand identical shapes; the only broadcasting is
// the explicit scalar forms (add_scalar, mul_scalar).

#include <functional>
#include <optional>
#include <vector>

#include "hcseg/tensor.hpp"

namespace hcseg {

/// Default lower clamp applied before log in the losses.
inline constexpr double kLogClampEpsilon = 1e-7;

template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s);
template <typename T> BasicTensor<T> mul_scalar(const BasicTensor<T>& a, T s);

template <typename T> BasicTensor<T> relu(const BasicTensor<T>& x);
/// Output is kept strictly inside (0, 1) even where the logistic saturates.
template <typename T> BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> exp(const BasicTensor<T>& x);
/// Natural log; throws std::domain_error on non-positive input (clamp first).
/// NaN passes through.
template <typename T> BasicTensor<T> log(const BasicTensor<T>& x);
/// Derivative is 1 strictly inside [lo, hi] and 0 where clamped.
template <typename T> BasicTensor<T> clamp(const BasicTensor<T>& x, T lo, T hi);

/// Sum over `axes` (all axes when empty). Reduced axes are removed; a full
/// reduction yields shape (1).
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x, const std::vector<std::size_t>& axes = {});
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x, const std::vector<std::size_t>& axes = {});

template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape);
template <typename T> BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);
/// Half-open range [begin, end) along `axis`.
template <typename T> BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);

/// Max over coordinates of |analytic - central difference| /
/// max(|analytic|, |numeric|, floor). `fn` must map the point to a
/// single-element tensor. Throws std::domain_error on non-finite values.
double gradcheck(const std::function<TensorD(const TensorD&)>& fn, const TensorD& point, double step = 1e-5,
                 double floor = 1e-8);

/// Gradient check over existing leaf tensors (e.g. network parameters).
/// Values are perturbed in place and restored. When `max_coords_per_tensor`
/// is set, that many coordinates are checked per tensor, chosen by `seed`.
double gradcheck_leaves(const std::function<TensorD()>& fn, const std::vector<TensorD>& leaves, double step = 1e-5,
                        double floor = 1e-8, std::optional<std::size_t> max_coords_per_tensor = std::nullopt,
                        std::uint64_t seed = 0);

}  // namespace hcseg
