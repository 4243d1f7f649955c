#include "hcseg/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace hcseg {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

std::string extent_str(Extent2 e) { return std::to_string(e.h) + "x" + std::to_string(e.w); }

template <typename T>
void require_4d(const BasicTensor<T>& x, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected (n, c, h, w), got " + to_string(x.shape()));
}

// Geometry of one convolution in its forward (im2col) direction: `channels`
// input planes of size `in` produce `out` positions per plane.
struct ConvGeometry {
  std::size_t channels;
  Extent2 in, out, kernel, stride, padding;

  std::size_t col_rows() const { return channels * kernel.h * kernel.w; }
  std::size_t col_cols() const { return out.h * out.w; }
};

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const auto cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel.h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel.w; ++kj) {
        T* row = col + ((c * g.kernel.h + ki) * g.kernel.w + kj) * cols;
        for (std::size_t oy = 0; oy < g.out.h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride.h + ki) - static_cast<std::ptrdiff_t>(g.padding.h);
          T* dst = row + oy * g.out.w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in.h)) {
            std::fill_n(dst, g.out.w, T(0));
            continue;
          }
          const T* src = image + (c * g.in.h + static_cast<std::size_t>(iy)) * g.in.w;
          for (std::size_t ox = 0; ox < g.out.w; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * g.stride.w + kj) - static_cast<std::ptrdiff_t>(g.padding.w);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in.w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

// Scatter-add counterpart of im2col.
template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* image) {
  const auto cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel.h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel.w; ++kj) {
        const T* row = col + ((c * g.kernel.h + ki) * g.kernel.w + kj) * cols;
        for (std::size_t oy = 0; oy < g.out.h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride.h + ki) - static_cast<std::ptrdiff_t>(g.padding.h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in.h)) continue;
          T* dst = image + (c * g.in.h + static_cast<std::size_t>(iy)) * g.in.w;
          const T* src = row + oy * g.out.w;
          for (std::size_t ox = 0; ox < g.out.w; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * g.stride.w + kj) - static_cast<std::ptrdiff_t>(g.padding.w);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void check_weight_and_bias(const BasicTensor<T>& weight, const BasicTensor<T>& bias, const Shape& expected,
                           std::size_t bias_len, const ConvSpec& spec, const char* op) {
  if (weight.shape() != expected) {
    throw ShapeError(std::string(op) + ": weight shape " + to_string(weight.shape()) + " does not match expected " +
                     to_string(expected));
  }
  if (spec.has_bias != bias.defined()) {
    throw ShapeError(std::string(op) + ": bias presence does not match spec.has_bias");
  }
  if (bias.defined() && bias.shape() != Shape{bias_len}) {
    throw ShapeError(std::string(op) + ": bias shape " + to_string(bias.shape()) + " expected (" +
                     std::to_string(bias_len) + ")");
  }
}

}  // namespace

Shape ConvSpec::weight_shape(bool transposed) const {
  return transposed ? Shape{in_channels, out_channels, kernel.h, kernel.w}
                    : Shape{out_channels, in_channels, kernel.h, kernel.w};
}

Extent2 ConvSpec::conv_output(Extent2 in) const {
  if (kernel.h == 0 || kernel.w == 0 || stride.h == 0 || stride.w == 0) {
    throw ShapeError("conv: kernel and stride must be >= 1");
  }
  const auto span_h = static_cast<std::ptrdiff_t>(in.h + 2 * padding.h) - static_cast<std::ptrdiff_t>(kernel.h);
  const auto span_w = static_cast<std::ptrdiff_t>(in.w + 2 * padding.w) - static_cast<std::ptrdiff_t>(kernel.w);
  if (span_h < 0 || span_w < 0) {
    throw ShapeError("conv: kernel " + extent_str(kernel) + " exceeds padded input " + extent_str(in) +
                     " (padding " + extent_str(padding) + ")");
  }
  return {static_cast<std::size_t>(span_h) / stride.h + 1, static_cast<std::size_t>(span_w) / stride.w + 1};
}

Extent2 ConvSpec::transposed_output(Extent2 in) const {
  if (kernel.h == 0 || kernel.w == 0 || stride.h == 0 || stride.w == 0) {
    throw ShapeError("transposed conv: kernel and stride must be >= 1");
  }
  if (output_padding.h >= stride.h || output_padding.w >= stride.w) {
    throw ShapeError("transposed conv: output padding must be smaller than the stride");
  }
  const auto h = static_cast<std::ptrdiff_t>((in.h - 1) * stride.h + kernel.h + output_padding.h) -
                 static_cast<std::ptrdiff_t>(2 * padding.h);
  const auto w = static_cast<std::ptrdiff_t>((in.w - 1) * stride.w + kernel.w + output_padding.w) -
                 static_cast<std::ptrdiff_t>(2 * padding.w);
  if (h < 1 || w < 1) throw ShapeError("transposed conv: non-positive output size for input " + extent_str(in));
  return {static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
}

template <typename T>
BatchNormState<T> BatchNormState<T>::create(std::size_t channels) {
  BatchNormState s;
  s.gamma = BasicTensor<T>::full({channels}, T(1));
  s.beta = BasicTensor<T>::zeros({channels});
  s.gamma.set_requires_grad();
  s.beta.set_requires_grad();
  s.running_mean.assign(channels, T(0));
  s.running_var.assign(channels, T(1));
  return s;
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      const ConvSpec& spec) {
  require_4d(input, "conv2d");
  if (input.dim(1) != spec.in_channels) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) + " channels, ConvSpec expects " +
                     std::to_string(spec.in_channels));
  }
  check_weight_and_bias(weight, bias, spec.weight_shape(false), spec.out_channels, spec, "conv2d");
  const std::size_t n = input.dim(0);
  const Extent2 in{input.dim(2), input.dim(3)};
  const ConvGeometry geo{spec.in_channels, in, spec.conv_output(in), spec.kernel, spec.stride, spec.padding};
  const std::size_t oc = spec.out_channels;
  const std::size_t in_plane = spec.in_channels * in.h * in.w;
  const std::size_t out_plane = oc * geo.col_cols();

  std::vector<T> out(n * out_plane);
  std::vector<T> col(geo.col_rows() * geo.col_cols());
  ConstMatMap<T> w(weight.values().data(), oc, geo.col_rows());
  for (std::size_t b = 0; b < n; ++b) {
    im2col(input.values().data() + b * in_plane, geo, col.data());
    MatMap<T> y(out.data() + b * out_plane, oc, geo.col_cols());
    y.noalias() = w * ConstMatMap<T>(col.data(), geo.col_rows(), geo.col_cols());
    if (bias.defined()) {
      for (std::size_t o = 0; o < oc; ++o) y.row(o).array() += bias[o];
    }
  }

  auto xi = input.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr;
  std::vector<BasicTensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result<T>(
      {n, oc, geo.out.h, geo.out.w}, std::move(out), "conv2d", inputs,
      [xi, wi, bi, geo, oc, in_plane, out_plane, n](const TensorImpl<T>& o) {
        auto* gx = detail::grad_sink(xi);
        auto* gw = detail::grad_sink(wi);
        auto* gb = bi ? detail::grad_sink(bi) : nullptr;
        std::vector<T> col(geo.col_rows() * geo.col_cols());
        ConstMatMap<T> w(wi->values.data(), oc, geo.col_rows());
        for (std::size_t b = 0; b < n; ++b) {
          ConstMatMap<T> dy(o.grad.data() + b * out_plane, oc, geo.col_cols());
          if (gb) {
            for (std::size_t c = 0; c < oc; ++c) (*gb)[c] += dy.row(c).sum();
          }
          if (gw) {
            im2col(xi->values.data() + b * in_plane, geo, col.data());
            MatMap<T>(gw->data(), oc, geo.col_rows()).noalias() +=
                dy * ConstMatMap<T>(col.data(), geo.col_rows(), geo.col_cols()).transpose();
          }
          if (gx) {
            MatMap<T>(col.data(), geo.col_rows(), geo.col_cols()).noalias() = w.transpose() * dy;
            col2im_add(col.data(), geo, gx->data() + b * in_plane);
          }
        }
      });
}

template <typename T>
BasicTensor<T> transposed_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                                 const BasicTensor<T>& bias, const ConvSpec& spec) {
  require_4d(input, "transposed_conv2d");
  if (input.dim(1) != spec.in_channels) {
    throw ShapeError("transposed_conv2d: input has " + std::to_string(input.dim(1)) + " channels, ConvSpec expects " +
                     std::to_string(spec.in_channels));
  }
  check_weight_and_bias(weight, bias, spec.weight_shape(true), spec.out_channels, spec, "transposed_conv2d");
  const std::size_t n = input.dim(0);
  const Extent2 in{input.dim(2), input.dim(3)};
  const Extent2 out_size = spec.transposed_output(in);
  // The forward geometry of the conv this op is the adjoint of.
  const ConvGeometry geo{spec.out_channels, out_size, in, spec.kernel, spec.stride, spec.padding};
  const std::size_t ic = spec.in_channels;
  const std::size_t oc = spec.out_channels;
  const std::size_t in_plane = ic * in.h * in.w;
  const std::size_t out_plane = oc * out_size.h * out_size.w;

  std::vector<T> out(n * out_plane, T(0));
  std::vector<T> col(geo.col_rows() * geo.col_cols());
  ConstMatMap<T> w(weight.values().data(), ic, geo.col_rows());
  for (std::size_t b = 0; b < n; ++b) {
    MatMap<T>(col.data(), geo.col_rows(), geo.col_cols()).noalias() =
        w.transpose() * ConstMatMap<T>(input.values().data() + b * in_plane, ic, geo.col_cols());
    T* y = out.data() + b * out_plane;
    col2im_add(col.data(), geo, y);
    if (bias.defined()) {
      const std::size_t plane = out_size.h * out_size.w;
      for (std::size_t c = 0; c < oc; ++c) {
        for (std::size_t i = 0; i < plane; ++i) y[c * plane + i] += bias[c];
      }
    }
  }

  auto xi = input.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr;
  std::vector<BasicTensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result<T>(
      {n, oc, out_size.h, out_size.w}, std::move(out), "transposed_conv2d", inputs,
      [xi, wi, bi, geo, ic, oc, in_plane, out_plane, n](const TensorImpl<T>& o) {
        auto* gx = detail::grad_sink(xi);
        auto* gw = detail::grad_sink(wi);
        auto* gb = bi ? detail::grad_sink(bi) : nullptr;
        const std::size_t plane = geo.in.h * geo.in.w;
        std::vector<T> col(geo.col_rows() * geo.col_cols());
        ConstMatMap<T> w(wi->values.data(), ic, geo.col_rows());
        for (std::size_t b = 0; b < n; ++b) {
          const T* dy = o.grad.data() + b * out_plane;
          if (gb) {
            for (std::size_t c = 0; c < oc; ++c) {
              T acc = T(0);
              for (std::size_t i = 0; i < plane; ++i) acc += dy[c * plane + i];
              (*gb)[c] += acc;
            }
          }
          if (!gx && !gw) continue;
          im2col(dy, geo, col.data());
          ConstMatMap<T> dcol(col.data(), geo.col_rows(), geo.col_cols());
          if (gx) MatMap<T>(gx->data() + b * in_plane, ic, geo.col_cols()).noalias() += w * dcol;
          if (gw) {
            MatMap<T>(gw->data(), ic, geo.col_rows()).noalias() +=
                ConstMatMap<T>(xi->values.data() + b * in_plane, ic, geo.col_cols()) * dcol.transpose();
          }
        }
      });
}

template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& input, Extent2 kernel, Extent2 stride, Extent2 padding) {
  require_4d(input, "maxpool2d");
  if (padding.h >= kernel.h || padding.w >= kernel.w) {
    throw ShapeError("maxpool2d: padding must be smaller than the kernel");
  }
  ConvSpec geometry;
  geometry.kernel = kernel;
  geometry.stride = stride;
  geometry.padding = padding;
  const Extent2 in{input.dim(2), input.dim(3)};
  const Extent2 out_size = geometry.conv_output(in);
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t in_area = in.h * in.w;
  const std::size_t out_area = out_size.h * out_size.w;

  std::vector<T> out(planes * out_area);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const T* x = input.values().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < out_size.h; ++oy) {
      for (std::size_t ox = 0; ox < out_size.w; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_index = 0;
        bool found = false;
        for (std::size_t ki = 0; ki < kernel.h; ++ki) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride.h + ki) - static_cast<std::ptrdiff_t>(padding.h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
          for (std::size_t kj = 0; kj < kernel.w; ++kj) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride.w + kj) - static_cast<std::ptrdiff_t>(padding.w);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
            const std::size_t idx = p * in_area + static_cast<std::size_t>(iy) * in.w + static_cast<std::size_t>(ix);
            if (!found || x[idx] > best) {
              best = x[idx];
              best_index = idx;
              found = true;
            }
          }
        }
        const std::size_t o = p * out_area + oy * out_size.w + ox;
        out[o] = best;
        (*argmax)[o] = best_index;
      }
    }
  }
  auto xi = input.impl();
  return detail::make_result<T>({input.dim(0), input.dim(1), out_size.h, out_size.w}, std::move(out), "maxpool2d",
                                {input}, [xi, argmax](const TensorImpl<T>& o) {
                                  auto* g = detail::grad_sink(xi);
                                  if (!g) return;
                                  for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[(*argmax)[i]] += o.grad[i];
                                });
}

template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input, BatchNormState<T>& state) {
  require_4d(input, "batchnorm2d");
  const std::size_t n = input.dim(0), c = input.dim(1), area = input.dim(2) * input.dim(3);
  if (c != state.channels() || state.gamma.size() != c || state.beta.size() != c) {
    throw ShapeError("batchnorm2d: input has " + std::to_string(c) + " channels, state has " +
                     std::to_string(state.channels()));
  }
  const std::size_t count = n * area;
  const bool train = state.mode == NormMode::kTrain;
  if (train && count < 2) {
    throw ShapeError("batchnorm2d: train mode needs more than one value per channel, got input " +
                     to_string(input.shape()));
  }
  const T* x = input.values().data();
  std::vector<T> out(input.size());
  auto xhat = std::make_shared<std::vector<T>>(input.size());
  auto inv_std = std::make_shared<std::vector<T>>(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (train) {
      T acc = T(0);
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x + (b * c + ch) * area;
        for (std::size_t i = 0; i < area; ++i) acc += p[i];
      }
      mu = acc / static_cast<T>(count);
      T sq = T(0);
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x + (b * c + ch) * area;
        for (std::size_t i = 0; i < area; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      var = sq / static_cast<T>(count);
      state.running_mean[ch] = state.momentum * state.running_mean[ch] + (T(1) - state.momentum) * mu;
      state.running_var[ch] = state.momentum * state.running_var[ch] +
                              (T(1) - state.momentum) * sq / static_cast<T>(count - 1);
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const T is = T(1) / std::sqrt(var + state.epsilon);
    (*inv_std)[ch] = is;
    const T g = state.gamma[ch], be = state.beta[ch];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * c + ch) * area;
      for (std::size_t i = 0; i < area; ++i) {
        const T h = (x[base + i] - mu) * is;
        (*xhat)[base + i] = h;
        out[base + i] = g * h + be;
      }
    }
  }

  auto xi = input.impl(), gi = state.gamma.impl(), bi = state.beta.impl();
  return detail::make_result<T>(
      input.shape(), std::move(out), "batchnorm2d", {input, state.gamma, state.beta},
      [xi, gi, bi, xhat, inv_std, n, c, area, count, train](const TensorImpl<T>& o) {
        auto* gx = detail::grad_sink(xi);
        auto* gg = detail::grad_sink(gi);
        auto* gb = detail::grad_sink(bi);
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * c + ch) * area;
            for (std::size_t i = 0; i < area; ++i) {
              sum_dy += o.grad[base + i];
              sum_dy_xhat += o.grad[base + i] * (*xhat)[base + i];
            }
          }
          if (gg) (*gg)[ch] += sum_dy_xhat;
          if (gb) (*gb)[ch] += sum_dy;
          if (!gx) continue;
          const T scale = gi->values[ch] * (*inv_std)[ch];
          const T inv_count = T(1) / static_cast<T>(count);
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * c + ch) * area;
            for (std::size_t i = 0; i < area; ++i) {
              const T dy = o.grad[base + i];
              (*gx)[base + i] += train ? scale * (dy - inv_count * (sum_dy + (*xhat)[base + i] * sum_dy_xhat))
                                       : scale * dy;
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> downsample_half(const BasicTensor<T>& input) {
  require_4d(input, "downsample_half");
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  // Each output pixel averages four (possibly replicated) source indices.
  auto taps = std::make_shared<std::vector<std::size_t>>(planes * oh * ow * 4);
  std::vector<T> out(planes * oh * ow);
  const T* x = input.values().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const std::size_t o = (p * oh + y) * ow + xo;
        const std::size_t y0 = 2 * y, y1 = std::min(2 * y + 1, h - 1);
        const std::size_t x0 = 2 * xo, x1 = std::min(2 * xo + 1, w - 1);
        const std::size_t idx[4] = {(p * h + y0) * w + x0, (p * h + y0) * w + x1, (p * h + y1) * w + x0,
                                    (p * h + y1) * w + x1};
        T acc = T(0);
        for (int k = 0; k < 4; ++k) {
          (*taps)[o * 4 + k] = idx[k];
          acc += x[idx[k]];
        }
        out[o] = acc * T(0.25);
      }
    }
  }
  auto xi = input.impl();
  return detail::make_result<T>({input.dim(0), input.dim(1), oh, ow}, std::move(out), "downsample_half", {input},
                                [xi, taps](const TensorImpl<T>& o) {
                                  auto* g = detail::grad_sink(xi);
                                  if (!g) return;
                                  for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                    for (int k = 0; k < 4; ++k) (*g)[(*taps)[i * 4 + k]] += T(0.25) * o.grad[i];
                                  }
                                });
}

#define HCSEG_INSTANTIATE_NN(T)                                                                                 \
  template struct BatchNormState<T>;                                                                            \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,           \
                                 const ConvSpec&);                                                              \
  template BasicTensor<T> transposed_conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                            const ConvSpec&);                                                   \
  template BasicTensor<T> maxpool2d(const BasicTensor<T>&, Extent2, Extent2, Extent2);                          \
  template BasicTensor<T> batchnorm2d(const BasicTensor<T>&, BatchNormState<T>&);                               \
  template BasicTensor<T> downsample_half(const BasicTensor<T>&);

HCSEG_INSTANTIATE_NN(float)
HCSEG_INSTANTIATE_NN(double)

}  // namespace hcseg
