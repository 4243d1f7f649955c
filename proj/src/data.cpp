#include "hcseg/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "hcseg/loss.hpp"
#include "hcseg/metrics.hpp"
#include "hcseg/random.hpp"

namespace hcseg {

namespace fs = std::filesystem;

const std::string& DatasetRecord::source_id() const {
  return provenance.origin == Origin::kAugmented ? provenance.source_id : id;
}

std::string DatasetRecord::transform_tag() const {
  return provenance.origin == Origin::kAugmented ? provenance.transform.tag() : "identity";
}

void DatasetRecord::validate() const {
  const std::string where = "record '" + id + "': ";
  if (id.empty()) throw DataError("record with empty id");
  if (!image.same_size(mask)) throw DataError(where + "image and mask sizes differ");
  if (image.size() == 0) throw DataError(where + "empty image");
  if (!(pixel_size > 0.0 && pixel_size < 1.0)) throw DataError(where + "pixel size outside (0, 1) mm");
  if (!(hc_gt_mm > 0.0) || !std::isfinite(hc_gt_mm)) throw DataError(where + "head circumference must be positive");
  for (double v : image.data)
    if (!(v >= 0.0 && v <= 1.0)) throw DataError(where + "image values outside [0, 1]");
  for (auto v : mask.data)
    if (v > 1) throw DataError(where + "mask is not binary");
}

Mask outline_of(const Mask& mask) { return boundary_mask(mask); }

Mask fill_outline(const Mask& outline) {
  Mask bin(outline.rows, outline.cols);
  for (std::size_t i = 0; i < bin.size(); ++i) bin.data[i] = outline.data[i] != 0;
  const std::size_t drawn = count_foreground(bin);
  if (drawn == 0) throw DataError("annotation outline is empty");
  Mask filled = fill_holes(bin);
  if (count_foreground(filled) == drawn) {
    // Nothing enclosed. Only acceptable when the outline is itself a solid
    // block (a dot or a tiny fully-drawn region).
    std::size_t r0 = bin.rows, r1 = 0, c0 = bin.cols, c1 = 0;
    for (std::size_t r = 0; r < bin.rows; ++r)
      for (std::size_t c = 0; c < bin.cols; ++c)
        if (bin(r, c)) {
          r0 = std::min(r0, r);
          r1 = std::max(r1, r);
          c0 = std::min(c0, c);
          c1 = std::max(c1, c);
        }
    if ((r1 - r0 + 1) * (c1 - c0 + 1) > drawn) throw DataError("annotation outline is not closed (fill leaked)");
  }
  return filled;
}

namespace {

std::string trim(std::string s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(trim(f));
  return out;
}

double parse_number(const std::string& s, const std::string& context) {
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DataError(context + ": bad number '" + s + "'");
  return v;
}

fs::path find_metadata(const fs::path& dir) {
  std::vector<fs::path> found;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name.ends_with("pixel_size_and_HC.csv")) found.push_back(e.path());
  }
  if (found.empty()) throw DataError(dir.string() + ": no *pixel_size_and_HC.csv metadata file");
  if (found.size() > 1) throw DataError(dir.string() + ": more than one metadata file");
  return found.front();
}

constexpr const char* kMetadataName = "pixel_size_and_HC.csv";
constexpr const char* kMetadataHeader = "filename,pixel size(mm),head circumference (mm)";

}  // namespace

LoadResult load_hc18(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(dir.string() + ": not a directory");
  const fs::path meta = find_metadata(dir);
  std::ifstream in(meta);
  if (!in) throw DataError("cannot open " + meta.string());

  std::string line;
  if (!std::getline(in, line)) throw DataError(meta.string() + ": empty metadata file");
  const auto header = split_csv(line);
  if (header.size() < 3) throw DataError(meta.string() + ": expected 3 columns in header");

  struct Row {
    double pixel_size;
    double hc;
  };
  std::map<std::string, Row> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split_csv(line);
    const std::string ctx = meta.filename().string() + ":" + std::to_string(lineno);
    if (f.size() < 3) throw DataError(ctx + ": expected 3 columns");
    const std::string stem = fs::path(f[0]).stem().string();
    if (!rows.emplace(stem, Row{parse_number(f[1], ctx), parse_number(f[2], ctx)}).second)
      throw DataError(ctx + ": duplicate entry '" + stem + "'");
  }

  // Every image on disk must have metadata.
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".pgm") continue;
    std::string stem = e.path().stem().string();
    if (stem.ends_with("_Annotation")) stem.resize(stem.size() - std::string("_Annotation").size());
    if (!rows.contains(stem)) throw DataError("'" + stem + "': image without a metadata row");
  }

  LoadResult result;
  for (const auto& [stem, row] : rows) {
    const fs::path img = dir / (stem + ".pgm"), ann = dir / (stem + "_Annotation.pgm");
    if (!fs::exists(img)) throw DataError("'" + stem + "': image file missing");
    if (!fs::exists(ann)) throw DataError("'" + stem + "': annotation file missing");
    DatasetRecord r;
    r.id = stem;
    r.image = read_pgm(img);
    const Mask outline = read_mask_pgm(ann);
    if (!outline.same_size(r.image)) throw DataError("'" + stem + "': image and annotation sizes differ");
    try {
      r.mask = fill_outline(outline);
    } catch (const DataError& e) {
      result.warnings.push_back("'" + stem + "' skipped: " + e.what());
      continue;
    }
    r.pixel_size = row.pixel_size;
    r.hc_gt_mm = row.hc;
    try {
      r.validate();
    } catch (const DataError& e) {
      result.warnings.push_back(std::string("skipped ") + e.what());
      continue;
    }
    if (r.pixel_size < kPixelSizeWarnLow || r.pixel_size > kPixelSizeWarnHigh)
      result.warnings.push_back("'" + stem + "': pixel size " + format_double(r.pixel_size) +
                                " mm outside the usual range");
    result.records.push_back(std::move(r));
  }
  return result;
}

void write_dataset(const fs::path& dir, std::span<const DatasetRecord> records) {
  fs::create_directories(dir);
  std::ofstream meta(dir / kMetadataName, std::ios::binary);
  if (!meta) throw DataError("cannot write " + (dir / kMetadataName).string());
  meta << kMetadataHeader << '\n';
  for (const auto& r : records) {
    r.validate();
    write_pgm(dir / (r.id + ".pgm"), r.image);
    write_mask_pgm(dir / (r.id + "_Annotation.pgm"), outline_of(r.mask));
    meta << r.id << ".pgm," << format_double(r.pixel_size) << ',' << format_double(r.hc_gt_mm) << '\n';
  }
  if (!meta) throw DataError("write failed: " + (dir / kMetadataName).string());
}

std::vector<GridTransform> augmentation_transforms() {
  return {{Flip::kNone, 1},       {Flip::kNone, 2},       {Flip::kNone, 3},
          {Flip::kHorizontal, 0}, {Flip::kVertical, 0},   {Flip::kHorizontal, 1},
          {Flip::kHorizontal, 3}, {Flip::kVertical, 1},   {Flip::kVertical, 3}};
}

std::vector<DatasetRecord> augment(const DatasetRecord& record) {
  std::vector<DatasetRecord> out{record};
  for (const auto& t : augmentation_transforms()) {
    DatasetRecord r;
    r.id = record.id + "_" + t.tag();
    r.image = apply_transform(record.image, t);
    r.mask = apply_transform(record.mask, t);
    r.pixel_size = record.pixel_size;
    r.hc_gt_mm = record.hc_gt_mm;
    r.provenance = {Origin::kAugmented, record.id, t};
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<DatasetRecord> augment_all(std::span<const DatasetRecord> records) {
  std::vector<DatasetRecord> out;
  out.reserve(records.size() * 10);
  for (const auto& r : records)
    for (auto& a : augment(r)) out.push_back(std::move(a));
  return out;
}

SplitResult split(std::span<const DatasetRecord> records, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("train fraction must lie in (0, 1)");
  if (records.empty()) throw std::invalid_argument("split: no records");
  std::set<std::string> unique;
  for (const auto& r : records) unique.insert(r.source_id());
  std::vector<std::string> sources(unique.begin(), unique.end());
  Rng rng(seed);
  rng.shuffle(std::span<std::string>(sources));
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(sources.size()) * train_fraction));
  std::map<std::string, std::size_t> rank;
  for (std::size_t i = 0; i < sources.size(); ++i) rank[sources[i]] = i;

  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return rank[records[x].source_id()] < rank[records[y].source_id()];
  });
  SplitResult out;
  for (auto i : order) (rank[records[i].source_id()] < n_train ? out.train : out.validation).push_back(records[i]);
  return out;
}

SynthSpec SynthSpec::for_size(std::size_t rows, std::size_t cols, std::size_t count, std::uint64_t seed) {
  SynthSpec s;
  s.rows = rows;
  s.cols = cols;
  s.count = count;
  s.seed = seed;
  const double m = static_cast<double>(std::min(rows, cols));
  s.semi_major = {0.30 * m, std::min(0.42 * m, m / 2.0 - 2.0)};
  s.semi_minor = {0.24 * m, 0.36 * m};
  return s;
}

void SynthSpec::validate() const {
  if (count == 0) throw std::invalid_argument("synth: count must be positive");
  if (rows < 8 || cols < 8) throw std::invalid_argument("synth: image must be at least 8x8");
  if (!(semi_minor.first > 0.0) || semi_minor.first > semi_minor.second || semi_major.first > semi_major.second)
    throw std::invalid_argument("synth: semi-axis ranges must be positive and ordered");
  if (semi_minor.first > semi_major.second) throw std::invalid_argument("synth: semi-minor range exceeds semi-major");
  if (semi_major.second + 2.0 > static_cast<double>(std::min(rows, cols)) / 2.0)
    throw std::invalid_argument("synth: ellipse does not fit inside the image with a 2 px margin");
  if (!(speckle >= 0.0 && speckle < 1.0)) throw std::invalid_argument("synth: speckle must lie in [0, 1)");
  if (rotation.first > rotation.second) throw std::invalid_argument("synth: rotation range must be ordered");
  const double darkest = background_level - background_amplitude + std::min(0.0, interior_offset);
  const double brightest = background_level + background_amplitude + std::max(0.0, interior_offset);
  if (darkest < 0.0 || !(brightest < rim_intensity) || rim_intensity > 1.0)
    throw std::invalid_argument("synth: intensities must satisfy 0 <= background < rim <= 1");
  if (!(pixel_size.first > 0.0) || pixel_size.first > pixel_size.second || pixel_size.second >= 1.0)
    throw std::invalid_argument("synth: pixel size range must lie in (0, 1)");
}

namespace {

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

std::string synth_id(std::size_t i, std::size_t count) {
  std::string digits = std::to_string(i);
  const std::size_t width = std::max<std::size_t>(3, std::to_string(count - 1).size());
  return "synth_" + std::string(width - std::min(width, digits.size()), '0') + digits;
}

}  // namespace

std::vector<DatasetRecord> synth_generate(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<DatasetRecord> out;
  const double rows = static_cast<double>(spec.rows), cols = static_cast<double>(spec.cols);
  for (std::size_t i = 0; i < spec.count; ++i) {
    EllipseParams e;
    e.a = rng.uniform(spec.semi_major.first, spec.semi_major.second);
    e.b = rng.uniform(spec.semi_minor.first, std::min(spec.semi_minor.second, e.a));
    e.rotation = std::fmod(rng.uniform(spec.rotation.first, spec.rotation.second), std::numbers::pi);
    if (e.rotation < 0) e.rotation += std::numbers::pi;
    const double slack_x = cols / 2.0 - e.a - 2.0, slack_y = rows / 2.0 - e.a - 2.0;
    e.cx = (cols - 1.0) / 2.0 + rng.uniform(-slack_x, slack_x);
    e.cy = (rows - 1.0) / 2.0 + rng.uniform(-slack_y, slack_y);

    DatasetRecord r;
    r.id = synth_id(i, spec.count);
    r.mask = rasterize_ellipse(spec.rows, spec.cols, e);
    r.pixel_size = rng.uniform(spec.pixel_size.first, spec.pixel_size.second);
    r.hc_gt_mm = ellipse_perimeter(e, r.pixel_size);
    r.provenance.origin = Origin::kSynthetic;

    // Smooth texture: a few random low-frequency plane waves.
    struct Wave {
      double kx, ky, phase;
    };
    std::vector<Wave> waves;
    for (int k = 0; k < 3; ++k)
      waves.push_back({rng.uniform(-3, 3) * 2 * std::numbers::pi / cols, rng.uniform(-3, 3) * 2 * std::numbers::pi / rows,
                       rng.uniform(0, 2 * std::numbers::pi)});
    const Mask rim = boundary_mask(r.mask);
    r.image = Image(spec.rows, spec.cols);
    for (std::size_t y = 0; y < spec.rows; ++y)
      for (std::size_t x = 0; x < spec.cols; ++x) {
        double texture = 0;
        for (const auto& w : waves) texture += std::sin(w.kx * x + w.ky * y + w.phase);
        double v = spec.background_level + spec.background_amplitude * texture / 3.0;
        if (r.mask(y, x)) v += spec.interior_offset;
        if (rim(y, x)) v = spec.rim_intensity;
        // Multiplicative speckle with unit-mean Rayleigh amplitude.
        const double u = 1.0 - rng.uniform();
        const double rayleigh = std::sqrt(-2.0 * std::log(u)) / std::sqrt(std::numbers::pi / 2.0);
        v *= (1.0 - spec.speckle) + spec.speckle * rayleigh;
        r.image(y, x) = quantize(v);
      }
    out.push_back(std::move(r));
  }
  return out;
}

DatasetRecord resize_record(const DatasetRecord& record, Extent2 size) {
  DatasetRecord r = record;
  if (record.image.rows == size.h && record.image.cols == size.w) return r;
  r.image = resize_area(record.image, size.h, size.w);
  r.mask = resize_nearest(record.mask, size.h, size.w);
  const double sy = static_cast<double>(record.image.rows) / static_cast<double>(size.h);
  const double sx = static_cast<double>(record.image.cols) / static_cast<double>(size.w);
  r.pixel_size = record.pixel_size * std::sqrt(sx * sy);
  return r;
}

template <typename T>
Batch<T> assemble_batch(std::span<const DatasetRecord> records, std::span<const std::size_t> indices, Extent2 size) {
  if (indices.empty()) throw std::invalid_argument("assemble_batch: empty batch");
  const std::size_t plane = size.h * size.w;
  std::vector<T> img(indices.size() * plane), msk(indices.size() * plane);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& rec = records[indices[k]];
    const bool native = rec.image.rows == size.h && rec.image.cols == size.w;
    const Image im = native ? rec.image : resize_area(rec.image, size.h, size.w);
    const Mask mk = native ? rec.mask : resize_nearest(rec.mask, size.h, size.w);
    for (std::size_t i = 0; i < plane; ++i) {
      img[k * plane + i] = static_cast<T>(im.data[i]);
      msk[k * plane + i] = static_cast<T>(mk.data[i]);
    }
  }
  const Shape shape{indices.size(), 1, size.h, size.w};
  return {BasicTensor<T>(shape, std::move(img)), BasicTensor<T>(shape, std::move(msk))};
}

template <typename T>
BasicTensor<T> image_tensor(std::span<const Image> images) {
  if (images.empty()) throw std::invalid_argument("image_tensor: no images");
  const std::size_t rows = images[0].rows, cols = images[0].cols;
  std::vector<T> v;
  v.reserve(images.size() * rows * cols);
  for (const auto& im : images) {
    if (im.rows != rows || im.cols != cols) throw ShapeError("image_tensor: images differ in size");
    for (double x : im.data) v.push_back(static_cast<T>(x));
  }
  return BasicTensor<T>({images.size(), 1, rows, cols}, std::move(v));
}

template Batch<float> assemble_batch(std::span<const DatasetRecord>, std::span<const std::size_t>, Extent2);
template Batch<double> assemble_batch(std::span<const DatasetRecord>, std::span<const std::size_t>, Extent2);
template BasicTensor<float> image_tensor(std::span<const Image>);
template BasicTensor<double> image_tensor(std::span<const Image>);

}  // namespace hcseg
