#include "drasmil/image.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>

namespace drasmil {

double pixel_saturation(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const int mx = std::max({int(r), int(g), int(b)});
  const int mn = std::min({int(r), int(g), int(b)});
  if (mx == 0) return 0.0;
  return static_cast<double>(mx - mn) / static_cast<double>(mx);
}

namespace {

// Next whitespace-delimited token, skipping '#' comment lines.
std::string next_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (!std::isspace(c)) {
      tok.push_back(static_cast<char>(c));
      break;
    }
  }
  while ((c = in.get()) != EOF && !std::isspace(c)) tok.push_back(static_cast<char>(c));
  if (tok.empty()) throw std::runtime_error("truncated PPM header");
  return tok;
}

}  // namespace

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  if (next_token(in) != "P6") throw std::runtime_error(path + ": not a binary PPM (P6)");
  Image img;
  img.width = std::stoi(next_token(in));
  img.height = std::stoi(next_token(in));
  const int maxval = std::stoi(next_token(in));
  if (img.width <= 0 || img.height <= 0) throw std::runtime_error(path + ": bad dimensions");
  if (maxval != 255) throw std::runtime_error(path + ": only 8-bit PPM supported");
  img.pixels.resize(3u * img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw std::runtime_error(path + ": truncated pixel data");
  return img;
}

void write_ppm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_pgm(const std::vector<std::uint8_t>& gray, int width, int height,
               const std::string& path) {
  if (static_cast<std::size_t>(width) * height != gray.size())
    throw std::invalid_argument("PGM buffer does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()),
            static_cast<std::streamsize>(gray.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace drasmil
