#pragma once

// Segmentation and head-circumference evaluation: pixel Dice, boundary
// Hausdorff distance, direct ellipse fitting and ellipse perimeter.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hcseg/image.hpp"

namespace hcseg {

/// x = column, y = row, in pixel units; pixel centres sit at integers.
struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

struct EllipseParams {
  double cx = 0.0;
  double cy = 0.0;
  double a = 1.0;  // semi-major
  double b = 1.0;  // semi-minor
  double rotation = 0.0;  // angle of the major axis from +x, in [0, pi)

  void validate() const;
};

/// Raised for empty segmentations and unfittable point sets.
class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 2TP / (2TP + FN + FP); 1 when both masks are empty.
double pixel_dice(const Mask& a, const Mask& b);

/// Pixel centres of foreground pixels that touch background (4-neighbourhood)
/// or the image border, row-major.
std::vector<Point2> extract_boundary(const Mask& mask);

/// Midpoints of the pixel edges separating foreground from background or
/// from outside the image, i.e. sub-pixel samples of the region's outline.
std::vector<Point2> crack_points(const Mask& mask);

/// Symmetric Hausdorff distance times `pixel_size`.
double hausdorff(std::span<const Point2> s, std::span<const Point2> r, double pixel_size = 1.0);

/// Direct least-squares conic fit constrained to ellipses (numerically
/// stable form). Needs at least 6 points not on a line.
EllipseParams fit_ellipse(std::span<const Point2> points);

/// Ramanujan's second approximation, times `pixel_size`.
double ellipse_perimeter(const EllipseParams& e, double pixel_size = 1.0);

/// Pixels whose centres lie inside or on the ellipse.
Mask rasterize_ellipse(std::size_t rows, std::size_t cols, const EllipseParams& e);

struct HcMeasurement {
  double hc_pred_mm = 0.0;
  double df_mm = 0.0;   // hc_pred - hc_gt
  double adf_mm = 0.0;  // |df|
};

HcMeasurement hc_difference(double hc_pred_mm, double hc_gt_mm);

/// Fits an ellipse to the mask's outline and compares its perimeter with
/// `hc_gt_mm`. Throws MetricError for empty or unfittable masks.
HcMeasurement measure_hc(const Mask& pred, double hc_gt_mm, double pixel_size);

struct EvalCase {
  std::string id;
  Mask pred;
  Mask gt;
  double hc_gt_mm = 0.0;
  double pixel_size = 1.0;
};

struct ImageMetrics {
  std::string id;
  double dice = 0.0;
  double df_mm = 0.0;
  double adf_mm = 0.0;
  double hd_mm = 0.0;
  double hc_pred_mm = 0.0;
  double hc_gt_mm = 0.0;
  /// Set when HD or HC could not be computed; such rows stay out of the
  /// aggregates.
  std::optional<std::string> failure;

  friend bool operator==(const ImageMetrics&, const ImageMetrics&) = default;
};

struct ColumnStats {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  friend bool operator==(const ColumnStats&, const ColumnStats&) = default;
};

struct MetricsReport {
  std::vector<ImageMetrics> rows;
  ColumnStats dice;
  ColumnStats df_mm;
  ColumnStats adf_mm;
  ColumnStats hd_mm;
  ColumnStats hc_pred_mm;
  ColumnStats hc_gt_mm;
  std::size_t evaluated = 0;
  std::size_t failed = 0;

  bool has_failures() const { return failed > 0; }
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

ColumnStats column_stats(std::span<const double> values);

/// Throws std::invalid_argument for an empty list or mismatched mask sizes.
MetricsReport evaluate_set(std::span<const EvalCase> cases);

/// id,Dice,DF(mm),ADF(mm),HD(mm),HC_pred(mm),HC_gt(mm),status
void write_report_csv(const std::filesystem::path& path, const MetricsReport& report);
/// statistic,Dice,DF(mm),ADF(mm),HD(mm) with mean and std rows.
void write_aggregate_csv(const std::filesystem::path& path, const MetricsReport& report);
void write_summary_json(const std::filesystem::path& path, const MetricsReport& report);

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

}  // namespace hcseg
