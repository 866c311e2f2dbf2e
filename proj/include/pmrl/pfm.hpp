#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace pmrl::io {

// Raster held top-to-bottom in memory; PFM files store rows bottom-to-top.
struct FloatImage {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 ("Pf") or 3 ("PF")
  std::vector<float> data;

  FloatImage() = default;
  FloatImage(int w, int h, int c)
      : width(w), height(h), channels(c), data(w * h * c, 0.0f) {}
  float& at(int x, int y, int c = 0) {
    return data[(y * width + x) * channels + c];
  }
  float at(int x, int y, int c = 0) const {
    return data[(y * width + x) * channels + c];
  }
};

struct PfmParseError : std::runtime_error {
  PfmParseError(const std::string& path, std::size_t offset,
                const std::string& what);
  std::size_t offset;
};

// Little-endian (negative scale) PFM.
void write_pfm(const std::string& path, const FloatImage& img);
FloatImage read_pfm(const std::string& path);

}  // namespace pmrl::io
