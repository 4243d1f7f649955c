#pragma once

// Structured layers for encoder-decoder segmentation networks. All image
// tensors are (batch, channel, height, width).

#include <cstddef>
#include <vector>

#include "hcseg/tensor.hpp"

namespace hcseg {

struct Extent2 {
  std::size_t h = 1;
  std::size_t w = 1;
  friend bool operator==(const Extent2&, const Extent2&) = default;
};

/// Convolution hyperparameters. For transposed convolutions `in_channels`
/// and `out_channels` refer to the transposed op's own input and output,
/// and the weight tensor is (in, out, kh, kw).
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  Extent2 kernel{3, 3};
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};
  /// Extra rows/cols appended to a transposed convolution's output; must be
  /// smaller than the stride. Ignored by conv2d.
  Extent2 output_padding{0, 0};
  bool has_bias = true;

  Shape weight_shape(bool transposed) const;
  /// floor((in + 2p - k) / s) + 1; throws ShapeError when not >= 1.
  Extent2 conv_output(Extent2 in) const;
  /// (in - 1) s - 2p + k + output_padding; throws ShapeError when not >= 1.
  Extent2 transposed_output(Extent2 in) const;
};

enum class NormMode { kTrain, kEval };

template <typename T>
struct BatchNormState {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.9);  // weight of the previous running value
  T epsilon = T(1e-5);
  NormMode mode = NormMode::kTrain;

  /// gamma = 1, beta = 0 (both requiring grad), running mean 0, var 1.
  static BatchNormState create(std::size_t channels);
  std::size_t channels() const { return running_mean.size(); }
};

/// Cross-correlation with zero padding. `bias` may be undefined.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      const ConvSpec& spec);

/// Adjoint of conv2d with the same weight tensor: for y of conv2d's output
/// shape, <conv2d(x, w), y> == <x, transposed_conv2d(y, w)>.
template <typename T>
BasicTensor<T> transposed_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                                 const BasicTensor<T>& bias, const ConvSpec& spec);

/// Max pooling; padded positions never win. Gradient goes to the first
/// maximum in row-major window order.
template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& input, Extent2 kernel, Extent2 stride, Extent2 padding = {0, 0});

/// Train mode normalizes with batch statistics and updates the running
/// statistics in `state`; eval mode applies the running statistics.
template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input, BatchNormState<T>& state);

/// 2x2 average pooling. Odd heights/widths are padded by replicating the last
/// row/column, so the output is ceil(h/2) x ceil(w/2).
template <typename T>
BasicTensor<T> downsample_half(const BasicTensor<T>& input);

}  // namespace hcseg
