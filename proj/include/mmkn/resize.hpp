#pragma once

#include <algorithm>
#include <cmath>

#include "mmkn/image.hpp"
#include "mmkn/tensor.hpp"

namespace mmkn {

// Standard bilinear interpolation without corner alignment: output pixel
// centers map to (i + 0.5) * scale - 0.5 in source coordinates, with
// edge clamping. Output values stay inside [min(grid), max(grid)].
inline Tensor bilinear_resize(const Tensor& grid, int out_h, int out_w) {
  require_shape(grid.rank() == 2 && grid.dim(0) >= 1 && grid.dim(1) >= 1,
                "bilinear_resize expects a non-empty matrix");
  require_shape(out_h > 0 && out_w > 0, "bilinear_resize output dims must be positive");
  const int r = grid.dim(0), c = grid.dim(1);
  Tensor out = Tensor::zeros({out_h, out_w});
  const double sy = static_cast<double>(r) / out_h;
  const double sx = static_cast<double>(c) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    double fy = (oy + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int y0c = std::clamp(y0, 0, r - 1);
    int y1c = std::clamp(y0 + 1, 0, r - 1);
    for (int ox = 0; ox < out_w; ++ox) {
      double fx = (ox + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int x0c = std::clamp(x0, 0, c - 1);
      int x1c = std::clamp(x0 + 1, 0, c - 1);
      double top = grid.at(y0c, x0c) * (1.0 - wx) + grid.at(y0c, x1c) * wx;
      double bot = grid.at(y1c, x0c) * (1.0 - wx) + grid.at(y1c, x1c) * wx;
      out.at(oy, ox) = top * (1.0 - wy) + bot * wy;
    }
  }
  return out;
}

struct HeatmapOptions {
  Rgb hue{255, 32, 32};
  double alpha = 0.6;
};

// Per-patch values normalized to [0, 1], reshaped onto the patch layout,
// upscaled to the raster size and blended as a single-hue tint. A flat
// input tints the whole image at half strength.
inline RasterImage heatmap_overlay(const std::vector<double>& patch_values, int rows, int cols,
                                   const RasterImage& image, const HeatmapOptions& opt = {}) {
  require_shape(rows > 0 && cols > 0 &&
                    patch_values.size() == static_cast<std::size_t>(rows) * cols,
                "heatmap layout does not match value count");
  double lo = *std::min_element(patch_values.begin(), patch_values.end());
  double hi = *std::max_element(patch_values.begin(), patch_values.end());
  Tensor grid = Tensor::zeros({rows, cols});
  for (std::size_t i = 0; i < patch_values.size(); ++i)
    grid.data[i] = (hi > lo) ? (patch_values[i] - lo) / (hi - lo) : 0.5;
  Tensor up = bilinear_resize(grid, image.height, image.width);

  RasterImage out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      double a = opt.alpha * up.at(y, x);
      for (int c = 0; c < 3; ++c) {
        double v = (1.0 - a) * image.at(x, y, c) + a * opt.hue[c];
        out.at(x, y, c) = detail::clamp_u8(static_cast<int>(std::lround(v)));
      }
    }
  return out;
}

}  // namespace mmkn
