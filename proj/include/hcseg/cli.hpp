#pragma once

// Command-line front end: synth, import, train, eval, predict.

#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "hcseg/image.hpp"
#include "hcseg/nn.hpp"

namespace hcseg::cli {

inline constexpr std::string_view kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

/// "HxW", e.g. "256x384".
Extent2 parse_size(std::string_view text);

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Image with the predicted outline in red, the reference outline in green
/// and their overlap in yellow.
Grid<Rgb> boundary_overlay(const Image& image, const Mask& pred, const Mask& gt);

/// Reads an 8-bit or 16-bit PNG as grayscale.
Image read_png_gray(const std::string& path);

}  // namespace hcseg::cli
