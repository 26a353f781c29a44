#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <stdexcept>

#include "kvla/image.hpp"

namespace kvla {

void Image::validate() const {
  if (height == 0 || width == 0 || channels == 0) {
    throw std::invalid_argument("image dimensions must be positive");
  }
  if (pixels.size() != height * width * channels) {
    throw std::invalid_argument("image pixel count mismatch");
  }
  for (double v : pixels) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw std::invalid_argument("image pixels must lie in [0,1]");
    }
  }
}

double quantize_unit(double v) {
  if (v < 0.0) v = 0.0;
  if (v > 1.0) v = 1.0;
  return std::round(v * 255.0) / 255.0;
}

void write_pgm(const std::string& path, const Image& image) {
  if (image.channels != 1) {
    throw std::invalid_argument("write_pgm: single-channel images only");
  }
  image.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "P5\n" << image.width << " " << image.height << "\n255\n";
  for (double v : image.pixels) {
    const int byte = static_cast<int>(std::round(v * 255.0));
    out.put(static_cast<char>(byte < 0 ? 0 : (byte > 255 ? 255 : byte)));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

namespace {

int next_pgm_token(std::istream& in) {
  // skips whitespace and '#' comments, returns a non-negative integer
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  if (c == EOF || !std::isdigit(c)) {
    throw std::runtime_error("malformed graymap header");
  }
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = in.get();
  }
  return value;
}

}  // namespace

Image read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || magic[1] != '5') {
    throw std::runtime_error("not a P5 graymap: " + path);
  }
  const int width = next_pgm_token(in);
  const int height = next_pgm_token(in);
  const int maxval = next_pgm_token(in);
  if (width <= 0 || height <= 0 || maxval != 255) {
    throw std::runtime_error("unsupported graymap header: " + path);
  }
  Image image;
  image.width = static_cast<std::size_t>(width);
  image.height = static_cast<std::size_t>(height);
  image.channels = 1;
  image.pixels.resize(image.width * image.height);
  for (double& v : image.pixels) {
    const int byte = in.get();
    if (byte == EOF) throw std::runtime_error("truncated graymap: " + path);
    v = static_cast<double>(byte) / 255.0;
  }
  return image;
}

}  // namespace kvla
