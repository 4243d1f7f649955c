#pragma once

// Datasets of (ultrasound image, head mask) records: loading the HC18
// directory layout, outline filling, isometric augmentation, source-aware
// splitting and a synthetic generator that writes the same layout.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hcseg/image.hpp"
#include "hcseg/nn.hpp"
#include "hcseg/tensor.hpp"

namespace hcseg {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Origin { kReal, kSynthetic, kAugmented };

struct Provenance {
  Origin origin = Origin::kReal;
  std::string source_id;    // augmented records only
  GridTransform transform;  // augmented records only
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct DatasetRecord {
  std::string id;
  Image image;
  Mask mask;
  double pixel_size = 0.1;  // mm per pixel
  double hc_gt_mm = 0.0;
  Provenance provenance;

  /// Id of the record this one was derived from (itself if not augmented).
  const std::string& source_id() const;
  std::string transform_tag() const;
  /// Throws DataError naming the record.
  void validate() const;
};

/// Typical HC18 pixel sizes; values outside only produce a warning.
inline constexpr double kPixelSizeWarnLow = 0.052;
inline constexpr double kPixelSizeWarnHigh = 0.326;

/// Fills a closed outline: everything not 4-connected to the image border
/// through background, outline pixels included. Throws DataError when the
/// outline is empty or leaks (nothing enclosed by a non-solid curve).
Mask fill_outline(const Mask& outline);

/// Foreground pixels that touch background or the image border; the form in
/// which annotations are stored.
Mask outline_of(const Mask& mask);

struct LoadResult {
  std::vector<DatasetRecord> records;  // sorted by id
  std::vector<std::string> warnings;
};

/// Directory with `<stem>.pgm`, `<stem>_Annotation.pgm` and one
/// `*pixel_size_and_HC.csv` (header: filename,pixel size(mm),head
/// circumference (mm)).
LoadResult load_hc18(const std::filesystem::path& dir);

/// Writes records in the layout load_hc18 reads; annotations are stored as
/// outlines.
void write_dataset(const std::filesystem::path& dir, std::span<const DatasetRecord> records);

/// The nine non-identity transforms used for augmentation, in output order.
std::vector<GridTransform> augmentation_transforms();

/// The record itself followed by its nine transformed copies.
std::vector<DatasetRecord> augment(const DatasetRecord& record);
std::vector<DatasetRecord> augment_all(std::span<const DatasetRecord> records);

struct SplitResult {
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> validation;
};

/// Shuffles source images with `seed`, sends the first floor(n * fraction)
/// to train; augmented copies follow their source.
SplitResult split(std::span<const DatasetRecord> records, double train_fraction, std::uint64_t seed);

struct SynthSpec {
  std::size_t count = 16;
  std::size_t rows = 64;
  std::size_t cols = 64;
  /// Semi-axis ranges in pixels; b is additionally capped by a.
  std::pair<double, double> semi_major{19.0, 27.0};
  std::pair<double, double> semi_minor{15.0, 23.0};
  std::pair<double, double> rotation{0.0, 3.141592653589793};
  double speckle = 0.2;  // in [0, 1)
  double background_level = 0.25;
  double background_amplitude = 0.1;
  double interior_offset = -0.1;
  double rim_intensity = 0.9;
  std::pair<double, double> pixel_size{0.1, 0.2};
  std::uint64_t seed = 0;

  /// Semi-axis ranges scaled to the image size.
  static SynthSpec for_size(std::size_t rows, std::size_t cols, std::size_t count, std::uint64_t seed);
  void validate() const;
};

std::vector<DatasetRecord> synth_generate(const SynthSpec& spec);

/// Record resampled to `size` (area for the image, nearest for the mask);
/// pixel size scaled by the geometric mean of the two scale factors.
DatasetRecord resize_record(const DatasetRecord& record, Extent2 size);

template <typename T>
struct Batch {
  BasicTensor<T> images;  // (n, 1, h, w)
  BasicTensor<T> masks;   // (n, 1, h, w), values 0 / 1
};

template <typename T>
Batch<T> assemble_batch(std::span<const DatasetRecord> records, std::span<const std::size_t> indices, Extent2 size);

template <typename T>
BasicTensor<T> image_tensor(std::span<const Image> images);

}  // namespace hcseg
