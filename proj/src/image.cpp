#include "hcseg/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace hcseg {

std::size_t count_foreground(const Mask& mask) {
  return static_cast<std::size_t>(std::count_if(mask.data.begin(), mask.data.end(), [](auto v) { return v != 0; }));
}

Mask threshold(const Image& probabilities, double level) {
  Mask m(probabilities.rows, probabilities.cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = probabilities.data[i] >= level ? 1 : 0;
  return m;
}

namespace {

// 4-connected flood fill from `seeds` over pixels where mask == value; returns
// the visited set.
std::vector<std::uint8_t> flood(const Mask& mask, std::uint8_t value, std::vector<std::size_t> stack) {
  std::vector<std::uint8_t> seen(mask.size(), 0);
  for (auto i : stack) seen[i] = 1;
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const std::size_t r = i / mask.cols, c = i % mask.cols;
    auto visit = [&](std::size_t j) {
      if (!seen[j] && mask.data[j] == value) {
        seen[j] = 1;
        stack.push_back(j);
      }
    };
    if (r > 0) visit(i - mask.cols);
    if (r + 1 < mask.rows) visit(i + mask.cols);
    if (c > 0) visit(i - 1);
    if (c + 1 < mask.cols) visit(i + 1);
  }
  return seen;
}

}  // namespace

Mask fill_holes(const Mask& mask) {
  std::vector<std::size_t> seeds;
  for (std::size_t r = 0; r < mask.rows; ++r)
    for (std::size_t c = 0; c < mask.cols; ++c)
      if ((r == 0 || c == 0 || r + 1 == mask.rows || c + 1 == mask.cols) && mask(r, c) == 0)
        seeds.push_back(r * mask.cols + c);
  const auto outside = flood(mask, 0, std::move(seeds));
  Mask out(mask.rows, mask.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = outside[i] ? 0 : 1;
  return out;
}

Mask largest_component(const Mask& mask) {
  std::vector<std::uint8_t> claimed(mask.size(), 0);
  std::vector<std::uint8_t> best;
  std::size_t best_size = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.data[i] == 0 || claimed[i]) continue;
    auto comp = flood(mask, mask.data[i], {i});
    std::size_t n = 0;
    for (std::size_t j = 0; j < comp.size(); ++j)
      if (comp[j]) {
        claimed[j] = 1;
        ++n;
      }
    if (n > best_size) {
      best_size = n;
      best = std::move(comp);
    }
  }
  Mask out(mask.rows, mask.cols);
  if (best_size > 0) out.data = std::move(best);
  return out;
}

GridTransform GridTransform::inverse() const {
  // A reflection followed by a rotation is again a reflection, hence its own
  // inverse.
  if (flip != Flip::kNone) return *this;
  return {Flip::kNone, (4 - quarter_turns) % 4};
}

std::string GridTransform::tag() const {
  if (is_identity()) return "identity";
  std::string t = flip == Flip::kHorizontal ? "hflip" : flip == Flip::kVertical ? "vflip" : "";
  if (quarter_turns != 0) {
    if (!t.empty()) t += "+";
    t += "rot" + std::to_string(90 * quarter_turns);
  }
  return t;
}

template <typename P>
Grid<P> apply_transform(const Grid<P>& g, const GridTransform& t) {
  Grid<P> cur = g;
  if (t.flip == Flip::kHorizontal) {
    for (std::size_t r = 0; r < cur.rows; ++r) {
      std::reverse(cur.data.begin() + r * cur.cols, cur.data.begin() + (r + 1) * cur.cols);
    }
  } else if (t.flip == Flip::kVertical) {
    for (std::size_t r = 0; r < cur.rows / 2; ++r) {
      std::swap_ranges(cur.data.begin() + r * cur.cols, cur.data.begin() + (r + 1) * cur.cols,
                       cur.data.begin() + (cur.rows - 1 - r) * cur.cols);
    }
  }
  for (int k = 0; k < ((t.quarter_turns % 4) + 4) % 4; ++k) {
    Grid<P> rot(cur.cols, cur.rows);
    // Clockwise: (r, c) -> (c, rows - 1 - r).
    for (std::size_t r = 0; r < cur.rows; ++r) {
      for (std::size_t c = 0; c < cur.cols; ++c) rot(c, cur.rows - 1 - r) = cur(r, c);
    }
    cur = std::move(rot);
  }
  return cur;
}

template Grid<double> apply_transform(const Grid<double>&, const GridTransform&);
template Grid<std::uint8_t> apply_transform(const Grid<std::uint8_t>&, const GridTransform&);

namespace {

// Overlap weights of output cells [i*scale, (i+1)*scale) with input cells.
std::vector<std::vector<std::pair<std::size_t, double>>> area_weights(std::size_t in, std::size_t out) {
  std::vector<std::vector<std::pair<std::size_t, double>>> w(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double lo = static_cast<double>(o) * scale, hi = static_cast<double>(o + 1) * scale;
    for (auto i = static_cast<std::size_t>(std::floor(lo)); i < in && static_cast<double>(i) < hi; ++i) {
      const double overlap = std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i));
      if (overlap > 0) w[o].emplace_back(i, overlap / scale);
    }
  }
  return w;
}

}  // namespace

Image resize_area(const Image& image, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("resize_area: target size must be positive");
  if (rows == image.rows && cols == image.cols) return image;
  const auto wr = area_weights(image.rows, rows), wc = area_weights(image.cols, cols);
  Image out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (auto [ir, a] : wr[r]) {
        for (auto [ic, b] : wc[c]) acc += a * b * image(ir, ic);
      }
      out(r, c) = acc;
    }
  }
  return out;
}

Mask resize_nearest(const Mask& mask, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("resize_nearest: target size must be positive");
  Mask out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto sr = std::min(mask.rows - 1, static_cast<std::size_t>((static_cast<double>(r) + 0.5) *
                                                                       static_cast<double>(mask.rows) / static_cast<double>(rows)));
    for (std::size_t c = 0; c < cols; ++c) {
      const auto sc = std::min(mask.cols - 1, static_cast<std::size_t>((static_cast<double>(c) + 0.5) *
                                                                         static_cast<double>(mask.cols) / static_cast<double>(cols)));
      out(r, c) = mask(sr, sc);
    }
  }
  return out;
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& is, const std::filesystem::path& path) {
  std::string tok;
  char ch;
  while (is.get(ch)) {
    if (ch == '#') {
      std::string discard;
      std::getline(is, discard);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok += ch;
  }
  if (tok.empty()) throw ImageIoError(path.string() + ": truncated PGM header");
  return tok;
}

std::size_t parse_positive(const std::string& tok, const std::filesystem::path& path) {
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(tok, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != tok.size() || v == 0) throw ImageIoError(path.string() + ": bad PGM header field '" + tok + "'");
  return v;
}

}  // namespace

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageIoError("cannot open " + path.string());
  if (next_token(is, path) != "P5") throw ImageIoError(path.string() + ": not a binary PGM (P5) file");
  const auto cols = parse_positive(next_token(is, path), path);
  const auto rows = parse_positive(next_token(is, path), path);
  const auto maxval = parse_positive(next_token(is, path), path);
  if (maxval > 65535) throw ImageIoError(path.string() + ": PGM maxval out of range");
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(rows * cols * bpp);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw ImageIoError(path.string() + ": truncated PGM pixel data");
  }
  Image img(rows, cols);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const unsigned v = bpp == 1 ? raw[i] : (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1];
    img.data[i] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const Image& image) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ImageIoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << image.cols << ' ' << image.rows << "\n255\n";
  std::vector<unsigned char> raw(image.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(image.data[i], 0.0, 1.0) * 255.0));
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw ImageIoError("failed writing " + path.string());
}

Mask read_mask_pgm(const std::filesystem::path& path) {
  const Image img = read_pgm(path);
  Mask m(img.rows, img.cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = img.data[i] > 0.0 ? 1 : 0;
  return m;
}

void write_mask_pgm(const std::filesystem::path& path, const Mask& mask) { write_pgm(path, mask_to_image(mask)); }

Image mask_to_image(const Mask& mask) {
  Image img(mask.rows, mask.cols);
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = mask.data[i] ? 1.0 : 0.0;
  return img;
}

void write_ppm(const std::filesystem::path& path, const Grid<Rgb>& image) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ImageIoError("cannot open " + path.string() + " for writing");
  os << "P6\n" << image.cols << ' ' << image.rows << "\n255\n";
  for (const auto& px : image.data) os.put(static_cast<char>(px.r)).put(static_cast<char>(px.g)).put(static_cast<char>(px.b));
  if (!os) throw ImageIoError("failed writing " + path.string());
}

}  // namespace hcseg
