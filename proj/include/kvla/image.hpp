#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace kvla {

/// Pixel grid with values in [0,1], row-major (y, x, channel).
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> pixels;

  void validate() const;
  double at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
};

/// Snap to the 8-bit grid used by the portable graymap files, so in-memory
/// datasets equal their on-disk round trip bit for bit.
double quantize_unit(double v);

/// Binary portable graymap (P5, maxval 255); single-channel images only.
void write_pgm(const std::string& path, const Image& image);
Image read_pgm(const std::string& path);

}  // namespace kvla
