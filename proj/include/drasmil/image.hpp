#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace drasmil {

// Interleaved 8-bit RGB raster, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // 3 * width * height bytes

  Image() = default;
  Image(int w, int h) : width(w), height(h), pixels(3u * w * h, 0) {}

  std::uint8_t* at(int x, int y) { return pixels.data() + 3 * (static_cast<std::size_t>(y) * width + x); }
  const std::uint8_t* at(int x, int y) const {
    return pixels.data() + 3 * (static_cast<std::size_t>(y) * width + x);
  }
  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    auto* p = at(x, y);
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }
};

// HSV hexcone saturation on a [0,1] scale; 0 when the pixel is black.
double pixel_saturation(std::uint8_t r, std::uint8_t g, std::uint8_t b);

// Binary PPM (P6) with 8-bit channels. Throws std::runtime_error on IO or
// format problems.
Image read_ppm(const std::string& path);
void write_ppm(const Image& img, const std::string& path);

// Binary PGM (P5), one byte per value.
void write_pgm(const std::vector<std::uint8_t>& gray, int width, int height,
               const std::string& path);

}  // namespace drasmil
