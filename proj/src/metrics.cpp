#include "hcseg/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <json.hpp>
#include <sstream>

namespace hcseg {

void EllipseParams::validate() const {
  if (!(b > 0.0) || !(a >= b) || !std::isfinite(a)) throw std::invalid_argument("ellipse semi-axes must satisfy a >= b > 0");
  if (!(rotation >= 0.0 && rotation < std::numbers::pi)) throw std::invalid_argument("ellipse rotation must lie in [0, pi)");
}

double pixel_dice(const Mask& a, const Mask& b) {
  if (!a.same_size(b)) throw std::invalid_argument("pixel_dice: mask sizes differ");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    tp += x && y;
    fp += x && !y;
    fn += !x && y;
  }
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fn + fp);
}

std::vector<Point2> extract_boundary(const Mask& mask) {
  std::vector<Point2> pts;
  const auto bg = [&](std::size_t r, std::size_t c) { return mask(r, c) == 0; };
  for (std::size_t r = 0; r < mask.rows; ++r)
    for (std::size_t c = 0; c < mask.cols; ++c) {
      if (bg(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r + 1 == mask.rows || c + 1 == mask.cols || bg(r - 1, c) ||
                        bg(r + 1, c) || bg(r, c - 1) || bg(r, c + 1);
      if (edge) pts.push_back({static_cast<double>(c), static_cast<double>(r)});
    }
  if (pts.empty()) throw MetricError("empty segmentation: mask has no foreground");
  return pts;
}

std::vector<Point2> crack_points(const Mask& mask) {
  std::vector<Point2> pts;
  for (std::size_t r = 0; r < mask.rows; ++r)
    for (std::size_t c = 0; c < mask.cols; ++c) {
      if (mask(r, c) == 0) continue;
      const double x = static_cast<double>(c), y = static_cast<double>(r);
      if (r == 0 || mask(r - 1, c) == 0) pts.push_back({x, y - 0.5});
      if (c == 0 || mask(r, c - 1) == 0) pts.push_back({x - 0.5, y});
      if (c + 1 == mask.cols || mask(r, c + 1) == 0) pts.push_back({x + 0.5, y});
      if (r + 1 == mask.rows || mask(r + 1, c) == 0) pts.push_back({x, y + 0.5});
    }
  return pts;
}

namespace {

double squared(double v) { return v * v; }

double directed_sq(std::span<const Point2> s, std::span<const Point2> r) {
  double worst = 0.0;
  for (const auto& p : s) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : r) {
      best = std::min(best, squared(p.x - q.x) + squared(p.y - q.y));
      if (best <= worst) break;  // p cannot raise the maximum
    }
    worst = std::max(worst, best);
  }
  return worst;
}

}  // namespace

double hausdorff(std::span<const Point2> s, std::span<const Point2> r, double pixel_size) {
  if (s.empty() || r.empty()) throw MetricError("hausdorff: empty segmentation");
  return std::sqrt(std::max(directed_sq(s, r), directed_sq(r, s))) * pixel_size;
}

EllipseParams fit_ellipse(std::span<const Point2> points) {
  const std::size_t n = points.size();
  if (n < 6) throw MetricError("fit_ellipse: need at least 6 points, got " + std::to_string(n));

  // Centre and scale to unit RMS radius for conditioning.
  double mx = 0, my = 0;
  for (const auto& p : points) {
    mx += p.x;
    my += p.y;
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double spread = 0;
  for (const auto& p : points) spread += squared(p.x - mx) + squared(p.y - my);
  const double scale = std::sqrt(spread / static_cast<double>(n));
  if (!(scale > 0.0)) throw MetricError("fit_ellipse: all points coincide");

  Eigen::MatrixXd d1(n, 3), d2(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = (points[i].x - mx) / scale, y = (points[i].y - my) / scale;
    d1.row(static_cast<Eigen::Index>(i)) << x * x, x * y, y * y;
    d2.row(static_cast<Eigen::Index>(i)) << x, y, 1.0;
  }
  const Eigen::Matrix3d s1 = d1.transpose() * d1;
  const Eigen::Matrix3d s2 = d1.transpose() * d2;
  const Eigen::Matrix3d s3 = d2.transpose() * d2;

  Eigen::FullPivLU<Eigen::Matrix3d> lu(s3);
  lu.setThreshold(1e-10);
  if (lu.rank() < 3) throw MetricError("fit_ellipse: points are collinear");
  const Eigen::Matrix3d t = -lu.solve(s2.transpose());
  Eigen::Matrix3d m = s1 + s2 * t;
  // Premultiply by the inverse of the constraint matrix [[0,0,2],[0,-1,0],[2,0,0]].
  Eigen::Matrix3d reduced;
  reduced.row(0) = m.row(2) / 2.0;
  reduced.row(1) = -m.row(1);
  reduced.row(2) = m.row(0) / 2.0;

  Eigen::EigenSolver<Eigen::Matrix3d> es(reduced);
  if (es.info() != Eigen::Success) throw MetricError("fit_ellipse: eigen decomposition failed");
  Eigen::Vector3d a1;
  double best = 0.0;
  for (int k = 0; k < 3; ++k) {
    const Eigen::Vector3d v = es.eigenvectors().col(k).real();
    const double cond = (4.0 * v(0) * v(2) - v(1) * v(1)) / v.squaredNorm();
    if (cond > best) {
      best = cond;
      a1 = v;
    }
  }
  if (!(best > 1e-12)) throw MetricError("fit_ellipse: no elliptical conic fits the points");
  const Eigen::Vector3d a2 = t * a1;
  const double A = a1(0), B = a1(1), C = a1(2), D = a2(0), E = a2(1), F = a2(2);

  const double det = 4.0 * A * C - B * B;
  const double x0 = (B * E - 2.0 * C * D) / det;
  const double y0 = (B * D - 2.0 * A * E) / det;
  const double f0 = F + 0.5 * (D * x0 + E * y0);

  Eigen::Matrix2d q;
  q << A, B / 2.0, B / 2.0, C;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> qs(q);
  const Eigen::Vector2d lam = qs.eigenvalues();
  const double r0 = -f0 / lam(0), r1 = -f0 / lam(1);
  if (!(r0 > 0.0) || !(r1 > 0.0)) throw MetricError("fit_ellipse: degenerate conic");
  const int major = r0 >= r1 ? 0 : 1;

  EllipseParams e;
  e.cx = mx + scale * x0;
  e.cy = my + scale * y0;
  e.a = scale * std::sqrt(std::max(r0, r1));
  e.b = scale * std::sqrt(std::min(r0, r1));
  const Eigen::Vector2d dir = qs.eigenvectors().col(major);
  double angle = std::atan2(dir(1), dir(0));
  if (angle < 0.0) angle += std::numbers::pi;
  if (angle >= std::numbers::pi) angle -= std::numbers::pi;
  e.rotation = angle;
  return e;
}

double ellipse_perimeter(const EllipseParams& e, double pixel_size) {
  const double h = squared((e.a - e.b) / (e.a + e.b));
  return std::numbers::pi * (e.a + e.b) * (1.0 + 3.0 * h / (10.0 + std::sqrt(4.0 - 3.0 * h))) * pixel_size;
}

Mask rasterize_ellipse(std::size_t rows, std::size_t cols, const EllipseParams& e) {
  Mask m(rows, cols);
  const double cs = std::cos(e.rotation), sn = std::sin(e.rotation);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double u = static_cast<double>(c) - e.cx, v = static_cast<double>(r) - e.cy;
      const double xr = u * cs + v * sn, yr = -u * sn + v * cs;
      m(r, c) = squared(xr / e.a) + squared(yr / e.b) <= 1.0 ? 1 : 0;
    }
  return m;
}

HcMeasurement hc_difference(double hc_pred_mm, double hc_gt_mm) {
  const double df = hc_pred_mm - hc_gt_mm;
  return {hc_pred_mm, df, std::abs(df)};
}

HcMeasurement measure_hc(const Mask& pred, double hc_gt_mm, double pixel_size) {
  if (!(pixel_size > 0.0)) throw std::invalid_argument("measure_hc: pixel size must be positive");
  if (count_foreground(pred) == 0) throw MetricError("empty segmentation");
  // Stray blobs and holes would pull the fit away from the head outline.
  const Mask head = fill_holes(largest_component(pred));
  const auto pts = crack_points(head);
  return hc_difference(ellipse_perimeter(fit_ellipse(pts), pixel_size), hc_gt_mm);
}

ColumnStats column_stats(std::span<const double> values) {
  if (values.empty()) return {};
  double sum = 0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double ss = 0;
  for (double v : values) ss += squared(v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size()))};
}

MetricsReport evaluate_set(std::span<const EvalCase> cases) {
  if (cases.empty()) throw std::invalid_argument("evaluate_set: no images");
  MetricsReport report;
  std::vector<double> dice, df, adf, hd, hcp, hcg;
  for (const auto& c : cases) {
    if (!c.pred.same_size(c.gt)) throw std::invalid_argument("evaluate_set: mask sizes differ for '" + c.id + "'");
    ImageMetrics row;
    row.id = c.id;
    row.hc_gt_mm = c.hc_gt_mm;
    row.dice = pixel_dice(c.pred, c.gt);
    try {
      if (count_foreground(c.gt) == 0) throw MetricError("empty ground truth");
      const auto hd_mm = hausdorff(extract_boundary(c.pred), extract_boundary(c.gt), c.pixel_size);
      const auto hc = measure_hc(c.pred, c.hc_gt_mm, c.pixel_size);
      row.hd_mm = hd_mm;
      row.hc_pred_mm = hc.hc_pred_mm;
      row.df_mm = hc.df_mm;
      row.adf_mm = hc.adf_mm;
    } catch (const MetricError& e) {
      row.failure = e.what();
    }
    if (row.failure) {
      ++report.failed;
    } else {
      ++report.evaluated;
      dice.push_back(row.dice);
      df.push_back(row.df_mm);
      adf.push_back(row.adf_mm);
      hd.push_back(row.hd_mm);
      hcp.push_back(row.hc_pred_mm);
      hcg.push_back(row.hc_gt_mm);
    }
    report.rows.push_back(std::move(row));
  }
  report.dice = column_stats(dice);
  report.df_mm = column_stats(df);
  report.adf_mm = column_stats(adf);
  report.hd_mm = column_stats(hd);
  report.hc_pred_mm = column_stats(hcp);
  report.hc_gt_mm = column_stats(hcg);
  return report;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::string csv_field(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

nlohmann::ordered_json stats_json(const ColumnStats& s) { return {{"mean", s.mean}, {"std", s.std}}; }

}  // namespace

void write_report_csv(const std::filesystem::path& path, const MetricsReport& report) {
  auto out = open_output(path);
  out << "id,Dice,DF(mm),ADF(mm),HD(mm),HC_pred(mm),HC_gt(mm),status\n";
  for (const auto& r : report.rows) {
    out << csv_field(r.id) << ',' << format_double(r.dice) << ',';
    if (r.failure) {
      out << ",,,," << format_double(r.hc_gt_mm) << ",failed: " << csv_field(*r.failure) << '\n';
      continue;
    }
    out << format_double(r.df_mm) << ',' << format_double(r.adf_mm) << ',' << format_double(r.hd_mm) << ','
        << format_double(r.hc_pred_mm) << ',' << format_double(r.hc_gt_mm) << ",ok\n";
  }
}

void write_aggregate_csv(const std::filesystem::path& path, const MetricsReport& report) {
  auto out = open_output(path);
  out << "statistic,Dice,DF(mm),ADF(mm),HD(mm)\n";
  out << "mean," << format_double(report.dice.mean) << ',' << format_double(report.df_mm.mean) << ','
      << format_double(report.adf_mm.mean) << ',' << format_double(report.hd_mm.mean) << '\n';
  out << "std," << format_double(report.dice.std) << ',' << format_double(report.df_mm.std) << ','
      << format_double(report.adf_mm.std) << ',' << format_double(report.hd_mm.std) << '\n';
}

void write_summary_json(const std::filesystem::path& path, const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["images"] = report.rows.size();
  j["evaluated"] = report.evaluated;
  j["failed"] = report.failed;
  j["warning"] = report.has_failures() ? "some images failed and are excluded from the aggregates" : "";
  j["Dice"] = stats_json(report.dice);
  j["DF(mm)"] = stats_json(report.df_mm);
  j["ADF(mm)"] = stats_json(report.adf_mm);
  j["HD(mm)"] = stats_json(report.hd_mm);
  j["HC_pred(mm)"] = stats_json(report.hc_pred_mm);
  j["HC_gt(mm)"] = stats_json(report.hc_gt_mm);
  auto failures = nlohmann::ordered_json::array();
  for (const auto& r : report.rows)
    if (r.failure) failures.push_back({{"id", r.id}, {"reason", *r.failure}});
  j["failures"] = failures;
  auto out = open_output(path);
  out << j.dump(2) << '\n';
}

}  // namespace hcseg
