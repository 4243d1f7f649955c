#pragma once

// 2-D rasters (grayscale images, binary masks), their right-angle
// isometries, resampling and a minimal PGM codec.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace hcseg {

template <typename P>
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<P> data;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, P fill = P{}) : rows(r), cols(c), data(r * c, fill) {}

  P& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const P& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }
  bool same_size(const auto& other) const { return rows == other.rows && cols == other.cols; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Intensities in [0, 1].
using Image = Grid<double>;
/// 0 = background, 1 = foreground.
using Mask = Grid<std::uint8_t>;

std::size_t count_foreground(const Mask& mask);
Mask threshold(const Image& probabilities, double level = 0.5);

/// Foreground plus every background pixel not 4-connected to the border.
Mask fill_holes(const Mask& mask);
/// The largest 4-connected foreground component (first in row-major order
/// on ties); empty mask in, empty mask out.
Mask largest_component(const Mask& mask);

enum class Flip { kNone, kHorizontal, kVertical };

/// Exact pixel-grid isometry: optional flip (horizontal mirrors columns,
/// vertical mirrors rows) applied first, then `quarter_turns` clockwise
/// 90-degree rotations.
struct GridTransform {
  Flip flip = Flip::kNone;
  int quarter_turns = 0;  // 0..3

  bool is_identity() const { return flip == Flip::kNone && quarter_turns == 0; }
  GridTransform inverse() const;
  /// e.g. "rot90", "hflip+rot270", "identity".
  std::string tag() const;
  friend bool operator==(const GridTransform&, const GridTransform&) = default;
};

template <typename P>
Grid<P> apply_transform(const Grid<P>& g, const GridTransform& t);

/// Area-weighted resampling (each output pixel averages the exact input area
/// it covers).
Image resize_area(const Image& image, std::size_t rows, std::size_t cols);
/// Nearest-neighbour resampling by pixel centres.
Mask resize_nearest(const Mask& mask, std::size_t rows, std::size_t cols);

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary PGM (P5), 8- or 16-bit; values scaled to [0, 1] by maxval.
Image read_pgm(const std::filesystem::path& path);
/// 8-bit P5; values clamped to [0, 1] and rounded to the nearest of 256 levels.
void write_pgm(const std::filesystem::path& path, const Image& image);
/// Nonzero pixels are foreground.
Mask read_mask_pgm(const std::filesystem::path& path);
/// Foreground written as 255.
void write_mask_pgm(const std::filesystem::path& path, const Mask& mask);

Image mask_to_image(const Mask& mask);

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Binary PPM (P6), 8-bit.
void write_ppm(const std::filesystem::path& path, const Grid<Rgb>& image);

}  // namespace hcseg
