#include "hcseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "hcseg/random.hpp"

namespace hcseg {

namespace {

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

// Unary elementwise op with derivative expressed through (input, output).
template <typename T, typename Fwd, typename Deriv>
BasicTensor<T> unary(const BasicTensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  auto xi = x.impl();
  return detail::make_result<T>(x.shape(), std::move(out), name, {x}, [xi, deriv](const TensorImpl<T>& o) {
    auto* g = detail::grad_sink(xi);
    if (!g) return;
    for (std::size_t i = 0; i < o.values.size(); ++i) (*g)[i] += o.grad[i] * deriv(xi->values[i], o.values[i]);
  });
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a, b}, [ai, bi](const TensorImpl<T>& o) {
    if (auto* g = detail::grad_sink(ai)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    }
    if (auto* g = detail::grad_sink(bi)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [ai, bi](const TensorImpl<T>& o) {
    if (auto* g = detail::grad_sink(ai)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    }
    if (auto* g = detail::grad_sink(bi)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= o.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [ai, bi](const TensorImpl<T>& o) {
    if (auto* g = detail::grad_sink(ai)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * bi->values[i];
    }
    if (auto* g = detail::grad_sink(bi)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * ai->values[i];
    }
  });
}

template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "div");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (b[i] == T(0)) throw std::domain_error("div: zero denominator at index " + std::to_string(i));
    out[i] = a[i] / b[i];
  }
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "div", {a, b}, [ai, bi](const TensorImpl<T>& o) {
    if (auto* g = detail::grad_sink(ai)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] / bi->values[i];
    }
    if (auto* g = detail::grad_sink(bi)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= o.grad[i] * o.values[i] / bi->values[i];
    }
  });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s) {
  return unary(a, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& a, T s) {
  return unary(a, "mul_scalar", [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return unary(x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  constexpr T lo = std::numeric_limits<T>::min();
  const T hi = std::nextafter(T(1), T(0));
  return unary(
      x, "sigmoid",
      [lo, hi](T v) {
        const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        return std::clamp(s, lo, hi);
      },
      [](T, T s) { return s * (T(1) - s); });
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  return unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= T(0)) throw std::domain_error("log: non-positive input; clamp before taking the log");
  }
  return unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
BasicTensor<T> clamp(const BasicTensor<T>& x, T lo, T hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lower bound exceeds upper bound");
  return unary(
      x, "clamp", [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

namespace {

struct Reduction {
  Shape out_shape;
  std::vector<std::size_t> out_index;  // input flat index -> output flat index
  std::size_t count = 1;               // input elements per output element
};

Reduction plan_reduction(const Shape& shape, const std::vector<std::size_t>& axes) {
  std::vector<bool> reduce(shape.size(), axes.empty());
  for (auto a : axes) {
    if (a >= shape.size()) {
      throw ShapeError("reduce: axis " + std::to_string(a) + " out of range for shape " + to_string(shape));
    }
    if (reduce[a]) throw ShapeError("reduce: axis " + std::to_string(a) + " listed twice");
    reduce[a] = true;
  }
  Reduction r;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (reduce[d]) r.count *= shape[d];
    else r.out_shape.push_back(shape[d]);
  }
  if (r.out_shape.empty()) r.out_shape = {1};

  // Output strides laid over the input's axes (0 for reduced axes).
  std::vector<std::size_t> ostride(shape.size(), 0);
  std::size_t s = 1;
  for (std::size_t d = shape.size(); d-- > 0;) {
    if (!reduce[d]) {
      ostride[d] = s;
      s *= shape[d];
    }
  }
  const std::size_t n = numel(shape);
  r.out_index.resize(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  std::size_t o = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r.out_index[i] = o;
    for (std::size_t d = shape.size(); d-- > 0;) {
      ++idx[d];
      o += ostride[d];
      if (idx[d] < shape[d]) break;
      o -= ostride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return r;
}

template <typename T>
BasicTensor<T> reduce_sum(const BasicTensor<T>& x, const std::vector<std::size_t>& axes, bool average,
                          const char* name) {
  auto plan = std::make_shared<Reduction>(plan_reduction(x.shape(), axes));
  std::vector<T> out(numel(plan->out_shape), T(0));
  for (std::size_t i = 0; i < x.size(); ++i) out[plan->out_index[i]] += x[i];
  const T scale = average ? T(1) / static_cast<T>(plan->count) : T(1);
  if (average) {
    for (auto& v : out) v *= scale;
  }
  auto xi = x.impl();
  return detail::make_result<T>(plan->out_shape, std::move(out), name, {x}, [xi, plan, scale](const TensorImpl<T>& o) {
    auto* g = detail::grad_sink(xi);
    if (!g) return;
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[plan->out_index[i]] * scale;
  });
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.extent = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

}  // namespace

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
  return reduce_sum(x, axes, false, "sum");
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
  return reduce_sum(x, axes, true, "mean");
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  auto xi = x.impl();
  return detail::make_result<T>(shape, std::move(out), "reshape", {x}, [xi](const TensorImpl<T>& o) {
    if (auto* g = detail::grad_sink(xi)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw ShapeError("concat: incompatible shapes " + to_string(first) + " and " + to_string(s));
    out_shape[axis] += s[axis];
  }
  const auto os = split_axis(out_shape, axis);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * os.inner;
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(p.values().begin() + o * chunk, chunk, out.begin() + o * os.extent * os.inner + offset);
    }
    offset += chunk;
  }
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return detail::make_result<T>(out_shape, std::move(out), "concat", parts,
                                [impls, offsets, os](const TensorImpl<T>& o) {
                                  for (std::size_t k = 0; k < impls.size(); ++k) {
                                    auto* g = detail::grad_sink(impls[k]);
                                    if (!g) continue;
                                    const std::size_t chunk = g->size() / os.outer;
                                    for (std::size_t r = 0; r < os.outer; ++r) {
                                      const T* src = o.grad.data() + r * os.extent * os.inner + offsets[k];
                                      T* dst = g->data() + r * chunk;
                                      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                                    }
                                  }
                                });
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank()) throw ShapeError("slice: axis out of range for " + to_string(x.shape()));
  if (begin >= end || end > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis " +
                     std::to_string(axis) + " of " + to_string(x.shape()));
  }
  const auto is = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * is.inner;
  std::vector<T> out(numel(out_shape));
  for (std::size_t o = 0; o < is.outer; ++o) {
    std::copy_n(x.values().begin() + o * is.extent * is.inner + begin * is.inner, chunk, out.begin() + o * chunk);
  }
  auto xi = x.impl();
  return detail::make_result<T>(out_shape, std::move(out), "slice", {x}, [xi, is, begin, chunk](const TensorImpl<T>& o) {
    auto* g = detail::grad_sink(xi);
    if (!g) return;
    for (std::size_t r = 0; r < is.outer; ++r) {
      T* dst = g->data() + r * is.extent * is.inner + begin * is.inner;
      const T* src = o.grad.data() + r * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

namespace {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

double evaluate_scalar(const TensorD& y) {
  const double v = y.item();
  if (!std::isfinite(v)) throw std::domain_error("gradcheck: function produced a non-finite value");
  return v;
}

}  // namespace

double gradcheck(const std::function<TensorD(const TensorD&)>& fn, const TensorD& point, double step, double floor) {
  if (!(step > 0)) throw std::invalid_argument("gradcheck: step must be positive");
  TensorD x = point.detach();
  x.set_requires_grad();
  return gradcheck_leaves([&] { return fn(x); }, {x}, step, floor);
}

double gradcheck_leaves(const std::function<TensorD()>& fn, const std::vector<TensorD>& leaves, double step,
                        double floor, std::optional<std::size_t> max_coords_per_tensor, std::uint64_t seed) {
  if (!(step > 0)) throw std::invalid_argument("gradcheck: step must be positive");
  for (const auto& leaf : leaves) leaf.zero_grad();
  {
    TensorD y = fn();
    evaluate_scalar(y);
    y.backward();
  }
  Rng rng(seed);
  double worst = 0.0;
  NoGradGuard no_grad;
  for (const auto& leaf : leaves) {
    std::vector<std::size_t> coords(leaf.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords_per_tensor && coords.size() > *max_coords_per_tensor) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(*max_coords_per_tensor);
    }
    auto values = leaf.mutable_values();
    for (auto i : coords) {
      const double analytic = leaf.has_grad() ? leaf.grad()[i] : 0.0;
      const double saved = values[i];
      values[i] = saved + step;
      const double up = evaluate_scalar(fn());
      values[i] = saved - step;
      const double down = evaluate_scalar(fn());
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      worst = std::max(worst, relative_error(analytic, numeric, floor));
    }
  }
  return worst;
}

#define HCSEG_INSTANTIATE_OPS(T)                                                                       \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> div(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                        \
  template BasicTensor<T> mul_scalar(const BasicTensor<T>&, T);                                        \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                              \
  template BasicTensor<T> exp(const BasicTensor<T>&);                                                  \
  template BasicTensor<T> log(const BasicTensor<T>&);                                                  \
  template BasicTensor<T> clamp(const BasicTensor<T>&, T, T);                                          \
  template BasicTensor<T> sum(const BasicTensor<T>&, const std::vector<std::size_t>&);                 \
  template BasicTensor<T> mean(const BasicTensor<T>&, const std::vector<std::size_t>&);                \
  template BasicTensor<T> reshape(const BasicTensor<T>&, const Shape&);                                \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);                     \
  template BasicTensor<T> slice(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t);

HCSEG_INSTANTIATE_OPS(float)
HCSEG_INSTANTIATE_OPS(double)

}  // namespace hcseg
