#include <cmath>
#include <numbers>

#include "doctest.h"
#include "hcseg/loss.hpp"
#include "hcseg/ops.hpp"
#include "test_util.hpp"

using namespace hcseg;
using hcseg::testing::random_tensor;

namespace {

Mask random_blob_mask(Rng& rng, std::size_t rows, std::size_t cols) {
  Mask m(rows, cols);
  const double cy = rng.uniform(4, rows - 4.0), cx = rng.uniform(4, cols - 4.0);
  const double ry = rng.uniform(2, rows / 2.0), rx = rng.uniform(2, cols / 2.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double u = (r - cy) / ry, v = (c - cx) / rx;
      m(r, c) = (u * u + v * v <= 1.0 || rng.uniform() < 0.05) ? 1 : 0;
    }
  return m;
}

// Minimum over all boundary pixels, one pixel at a time.
Image brute_force_distance(const Mask& mask) {
  const Mask b = boundary_mask(mask);
  Image d(mask.rows, mask.cols, 1e300);
  for (std::size_t r = 0; r < mask.rows; ++r)
    for (std::size_t c = 0; c < mask.cols; ++c)
      for (std::size_t br = 0; br < mask.rows; ++br)
        for (std::size_t bc = 0; bc < mask.cols; ++bc)
          if (b(br, bc)) d(r, c) = std::min(d(r, c), std::hypot(double(r) - double(br), double(c) - double(bc)));
  return d;
}

TensorD as_tensor(const Mask& m) {
  std::vector<double> v(m.data.begin(), m.data.end());
  return TensorD({1, 1, m.rows, m.cols}, v);
}

}  // namespace

TEST_CASE("distance map: boundary pixels are at zero") {
  Rng rng(1);
  const Mask m = random_blob_mask(rng, 20, 24);
  const Mask b = boundary_mask(m);
  const Image d = distance_map(m);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (b.data[i]) CHECK(d.data[i] == 0.0);
    else CHECK(d.data[i] > 0.0);
  }
}

TEST_CASE("distance map: 3-4-5 triangle") {
  // Only (0, 0) is foreground; it is a boundary pixel.
  Mask m(6, 6);
  m(0, 0) = 1;
  const Image d = distance_map(m);
  CHECK(d(3, 4) == 5.0);
  CHECK(d(4, 3) == 5.0);
}

TEST_CASE("distance map equals brute force on random masks") {
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const Mask m = random_blob_mask(rng, 32, 32);
    const Image fast = distance_map(m), slow = brute_force_distance(m);
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(fast.data[i] == doctest::Approx(slow.data[i]).epsilon(1e-12));
  }
}

TEST_CASE("distance map rejects masks without a boundary") {
  CHECK_THROWS_AS(distance_map(Mask(4, 4, 0)), std::invalid_argument);
  CHECK_THROWS_AS(distance_map(Mask(4, 4, 1)), std::invalid_argument);
}

TEST_CASE("weight map values") {
  Mask m(40, 40);
  for (std::size_t r = 10; r < 30; ++r)
    for (std::size_t c = 10; c < 30; ++c) m(r, c) = 1;
  LossConfig cfg;
  const Image w = weight_map(m, cfg);
  const Image d = distance_map(m);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (d.data[i] == 0.0) CHECK(w.data[i] == 31.0);
    CHECK(w.data[i] >= 1.0);
    CHECK(w.data[i] <= 31.0);
  }
  // Row 10 is boundary; (10 + 10, 0 .. ) lies 10 px away from the top edge of the square's outline.
  // Pixel (20, 0): nearest boundary pixel is (20, 10), distance 10.
  CHECK(d(20, 0) == 10.0);
  CHECK(w(20, 0) == doctest::Approx(1.0 + 30.0 * std::exp(-0.5)).epsilon(1e-12));
  CHECK(w(20, 0) == doctest::Approx(19.1959).epsilon(1e-5));

  Mask big(400, 400);
  big(0, 0) = 1;
  CHECK(weight_map(big, cfg)(399, 399) == doctest::Approx(1.0).epsilon(1e-12));

  LossConfig literal = cfg;
  literal.form = WeightForm::kLiteral;
  const Image wl = weight_map(m, literal);
  CHECK(wl(20, 0) == doctest::Approx(1.0 + 30.0 * std::exp(10.0 / 200.0)));

  LossConfig bad = cfg;
  bad.sigma = 0;
  CHECK_THROWS_AS(weight_map(m, bad), std::invalid_argument);
}

TEST_CASE("weight map is non-increasing in distance") {
  Rng rng(3);
  const Mask m = random_blob_mask(rng, 48, 48);
  const Image d = distance_map(m), w = weight_map(m, {});
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); j += 7)
      if (d.data[i] <= d.data[j]) CHECK(w.data[i] >= w.data[j]);
}

TEST_CASE("soft dice") {
  LossConfig tiny;
  tiny.smooth_epsilon = 1e-12;
  Rng rng(4);
  const Mask a = random_blob_mask(rng, 16, 16);
  const auto ta = as_tensor(a);
  CHECK(soft_dice(ta, ta, tiny).item() == doctest::Approx(1.0).epsilon(1e-12));

  Mask left(8, 8), right(8, 8);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      left(r, c) = 1;
      right(r, c + 4) = 1;
    }
  CHECK(soft_dice(as_tensor(left), as_tensor(right), tiny).item() < 1e-12);
  // p = 0.5 everywhere, half the pixels positive: (2 * 0.25N) / (0.5N + 0.5N).
  CHECK(soft_dice(TensorD::full({1, 1, 8, 8}, 0.5), as_tensor(left), tiny).item() == doctest::Approx(0.5));
  CHECK_THROWS_AS(soft_dice(ta, TensorD::zeros({1, 1, 8, 8}), tiny), ShapeError);
}

TEST_CASE("soft dice on binary masks equals the confusion-count formula") {
  LossConfig tiny;
  tiny.smooth_epsilon = 1e-9;
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Mask a = random_blob_mask(rng, 16, 16), b = random_blob_mask(rng, 16, 16);
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      tp += a.data[i] && b.data[i];
      fp += a.data[i] && !b.data[i];
      fn += !a.data[i] && b.data[i];
    }
    const double dice = 2 * tp / (2 * tp + fn + fp);
    const double ab = soft_dice(as_tensor(a), as_tensor(b), tiny).item();
    const double ba = soft_dice(as_tensor(b), as_tensor(a), tiny).item();
    CHECK(std::abs(ab - dice) < 1e-9);
    CHECK(ab == ba);
  }
}

TEST_CASE("binary cross-entropy") {
  LossConfig cfg;
  const auto one = TensorD::full({1}, 1.0);
  CHECK(bce(TensorD::full({1}, 1.0 - 1e-7), one, cfg).item() < 1e-6);
  CHECK(bce(TensorD::full({1}, 1.0), one, cfg).item() < 1e-6);
  CHECK(bce(TensorD::full({1}, 0.5), one, cfg).item() == doctest::Approx(std::numbers::ln2).epsilon(1e-14));
  CHECK(std::isfinite(bce(TensorD::full({1}, 0.0), one, cfg).item()));

  Rng rng(6);
  auto p = random_tensor(rng, {2, 1, 6, 6}, 0.0, 1.0);
  std::vector<double> g(p.size());
  for (auto& v : g) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  const TensorD gt(p.shape(), g);
  const auto map = bce_map(p, gt, cfg);
  double total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], 1e-7, 1 - 1e-7);
    const double expected = -(g[i] * std::log(q) + (1 - g[i]) * std::log(1 - q));
    CHECK(std::abs(map[i] - expected) < 1e-12);
    total += expected;
  }
  CHECK(std::abs(bce(p, gt, cfg).item() - total / p.size()) < 1e-12);
}

TEST_CASE("combined loss") {
  LossConfig cfg;
  Rng rng(7);
  const Mask m = random_blob_mask(rng, 16, 16);
  const auto gt = as_tensor(m);
  CHECK(l_ln(gt, gt, cfg).item() < 1e-5);

  const auto half = TensorD::full(gt.shape(), 0.5);
  const Image w = weight_map(m, cfg);
  double mean_w = 0;
  for (auto v : w.data) mean_w += v;
  mean_w /= w.size();
  const double expected = mean_w * std::numbers::ln2 + 1.0 - soft_dice(half, gt, cfg).item();
  CHECK(l_ln(half, gt, cfg).item() == doctest::Approx(expected).epsilon(1e-12));

  // Perfect prediction beats the inverted one.
  auto inverted = add_scalar(mul_scalar(gt, -1.0), 1.0);
  CHECK(l_ln(gt, gt, cfg).item() <= l_ln(inverted, gt, cfg).item());

  CHECK_THROWS_AS(l_ln(TensorD::zeros({1, 1, 4, 4}), gt, cfg), ShapeError);
}

TEST_CASE("loss gradients match finite differences") {
  LossConfig cfg;
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const Mask m = random_blob_mask(rng, 8, 8);
    const auto gt = as_tensor(m);
    auto p = random_tensor(rng, gt.shape(), 0.05, 0.95);
    CHECK(gradcheck([&](const TensorD& t) { return bce(t, gt, cfg); }, p) < 1e-4);
    CHECK(gradcheck([&](const TensorD& t) { return soft_dice(t, gt, cfg); }, p) < 1e-4);
    CHECK(gradcheck([&](const TensorD& t) { return l_ln(t, gt, cfg); }, p) < 1e-4);
  }
  const Mask m = random_blob_mask(rng, 16, 16);
  auto p = random_tensor(rng, {1, 1, 16, 16}, 0.05, 0.95);
  CHECK(gradcheck([&](const TensorD& t) { return l_ln(t, as_tensor(m), cfg); }, p) < 1e-4);
}
