#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mmkn/common.hpp"

namespace mmkn {

using Rgb = std::array<std::uint8_t, 3>;

namespace detail {
inline std::uint8_t clamp_u8(int v) {
  return static_cast<std::uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v));
}
}  // namespace detail

// 8-bit RGB raster, row-major, interleaved channels.
struct RasterImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  RasterImage() = default;
  RasterImage(int w, int h, Rgb fill = {0, 0, 0}) : width(w), height(h) {
    require_shape(w > 0 && h > 0, "raster dims must be positive");
    rgb.resize(static_cast<std::size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) set(x, y, fill);
  }

  std::uint8_t& at(int x, int y, int c) {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  Rgb get(int x, int y) const { return {at(x, y, 0), at(x, y, 1), at(x, y, 2)}; }
  void set(int x, int y, Rgb v) {
    at(x, y, 0) = v[0];
    at(x, y, 1) = v[1];
    at(x, y, 2) = v[2];
  }

  bool in_bounds(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

  bool operator==(const RasterImage& o) const {
    return width == o.width && height == o.height && rgb == o.rgb;
  }
};

// Binary PPM (P6, maxval 255). Bit-exact round trip.
inline void write_ppm(const RasterImage& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw IoError("short write: " + path);
}

inline RasterImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for read: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw IoError("not a P6 ppm: " + path);
  auto next_int = [&in, &path]() {
    // Skip whitespace and # comments between header fields.
    for (;;) {
      int ch = in.peek();
      if (ch == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(ch)) {
        in.get();
      } else {
        break;
      }
    }
    long v = -1;
    in >> v;
    if (!in || v < 0) throw IoError("bad ppm header: " + path);
    return static_cast<int>(v);
  };
  int w = next_int();
  int h = next_int();
  int maxval = next_int();
  if (maxval != 255) throw IoError("unsupported ppm maxval: " + path);
  in.get();  // single whitespace after maxval
  RasterImage img(w, h);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size()))
    throw IoError("truncated ppm payload: " + path);
  return img;
}

}  // namespace mmkn
