#pragma once

#include <cmath>
#include <limits>
#include <queue>
#include <vector>

#include "mmkn/image.hpp"
#include "mmkn/scene.hpp"

namespace mmkn {

// Binary mask over a raster; nonzero entries are the region to rebuild.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> cells;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), cells(static_cast<std::size_t>(w) * h, 0) {}

  static Mask from_bbox(int w, int h, const BBox& b) {
    require_shape(b.inside(w, h), "mask bbox outside raster");
    Mask m(w, h);
    for (int y = b.y; y < b.y + b.h; ++y)
      for (int x = b.x; x < b.x + b.w; ++x) m.at(x, y) = 1;
    return m;
  }

  std::uint8_t& at(int x, int y) { return cells[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return cells[static_cast<std::size_t>(y) * width + x]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : cells) n += v ? 1 : 0;
    return n;
  }
};

enum class InpaintMethod { BackgroundFill, Telea };

// Replaces masked pixels with a flat color. Used for the synthetic
// corpus where the true background is known, which guarantees the
// removal touches nothing but the target object.
inline RasterImage inpaint_background_fill(const RasterImage& img, const Mask& mask, Rgb background) {
  require_shape(img.width == mask.width && img.height == mask.height, "mask/raster size mismatch");
  require(mask.count() > 0, "inpaint called with an empty mask");
  RasterImage out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (mask.at(x, y)) out.set(x, y, background);
  return out;
}

namespace detail {

// Eikonal update used by the fast-marching front.
inline double fmm_solve(double t1, double t2) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  double lo = std::min(t1, t2), hi = std::max(t1, t2);
  if (lo == inf) return inf;
  if (hi == inf || hi - lo >= 1.0) return lo + 1.0;
  double d = hi - lo;
  return 0.5 * (lo + hi + std::sqrt(2.0 - d * d));
}

}  // namespace detail

// Fast-marching inpainting. Unknown pixels are visited in increasing
// distance from the mask boundary; each is estimated as a weighted
// average of already-colored pixels within `radius`, with inverse
// square distance and frontier-normal direction weights. Pixels outside
// the mask are never modified.
inline RasterImage inpaint_telea(const RasterImage& img, const Mask& mask, int radius = 5) {
  require_shape(img.width == mask.width && img.height == mask.height, "mask/raster size mismatch");
  require(mask.count() > 0, "inpaint called with an empty mask");
  require(radius >= 1, "telea radius must be >= 1");

  const int w = img.width, h = img.height;
  constexpr double inf = std::numeric_limits<double>::infinity();
  enum : std::uint8_t { Known = 0, Band = 1, Inside = 2 };

  RasterImage out = img;
  std::vector<std::uint8_t> state(static_cast<std::size_t>(w) * h, Known);
  std::vector<std::uint8_t> colored(static_cast<std::size_t>(w) * h, 1);
  std::vector<double> dist(static_cast<std::size_t>(w) * h, 0.0);
  auto idx = [w](int x, int y) { return static_cast<std::size_t>(y) * w + x; };

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask.at(x, y)) {
        state[idx(x, y)] = Inside;
        colored[idx(x, y)] = 0;
        dist[idx(x, y)] = inf;
      }

  using HeapItem = std::pair<double, std::pair<int, int>>;
  std::priority_queue<HeapItem, std::vector<HeapItem>, std::greater<>> heap;
  const int dx4[] = {1, -1, 0, 0};
  const int dy4[] = {0, 0, 1, -1};

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (mask.at(x, y)) continue;
      for (int k = 0; k < 4; ++k) {
        int nx = x + dx4[k], ny = y + dy4[k];
        if (nx >= 0 && ny >= 0 && nx < w && ny < h && mask.at(nx, ny)) {
          state[idx(x, y)] = Band;
          heap.push({0.0, {x, y}});
          break;
        }
      }
    }

  auto paint = [&](int x, int y) {
    // Frontier normal from the one-sided gradient of the distance map.
    auto grad_component = [&](int ax, int ay, int bx, int by, double center) {
      double fw = (ax >= 0 && ay >= 0 && ax < w && ay < h && dist[idx(ax, ay)] != inf)
                      ? dist[idx(ax, ay)] - center
                      : inf;
      double bw = (bx >= 0 && by >= 0 && bx < w && by < h && dist[idx(bx, by)] != inf)
                      ? center - dist[idx(bx, by)]
                      : inf;
      if (fw != inf && bw != inf) return 0.5 * (fw + bw);
      if (fw != inf) return fw;
      if (bw != inf) return bw;
      return 0.0;
    };
    const double center = dist[idx(x, y)] == inf ? 0.0 : dist[idx(x, y)];
    double nx_ = grad_component(x + 1, y, x - 1, y, center);
    double ny_ = grad_component(x, y + 1, x, y - 1, center);
    double nlen = std::sqrt(nx_ * nx_ + ny_ * ny_);

    double wsum = 0.0;
    double acc[3] = {0.0, 0.0, 0.0};
    for (int qy = std::max(0, y - radius); qy <= std::min(h - 1, y + radius); ++qy)
      for (int qx = std::max(0, x - radius); qx <= std::min(w - 1, x + radius); ++qx) {
        if (!colored[idx(qx, qy)]) continue;
        double vx = x - qx, vy = y - qy;
        double d2 = vx * vx + vy * vy;
        if (d2 == 0.0 || d2 > static_cast<double>(radius) * radius) continue;
        double d = std::sqrt(d2);
        double wt = 1.0 / d2;
        if (nlen > 0.0) {
          double dir = std::abs((vx * nx_ + vy * ny_) / (d * nlen));
          wt *= std::max(dir, 1e-6);
        }
        for (int c = 0; c < 3; ++c) acc[c] += wt * out.at(qx, qy, c);
        wsum += wt;
      }
    if (wsum > 0.0) {
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) = detail::clamp_u8(static_cast<int>(std::lround(acc[c] / wsum)));
    }
    colored[idx(x, y)] = 1;
  };

  while (!heap.empty()) {
    auto [x, y] = heap.top().second;
    heap.pop();
    state[idx(x, y)] = Known;
    for (int k = 0; k < 4; ++k) {
      int nx = x + dx4[k], ny = y + dy4[k];
      if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
      if (state[idx(nx, ny)] != Inside) continue;
      double tx = inf, ty = inf;
      if (nx > 0 && state[idx(nx - 1, ny)] != Inside) tx = dist[idx(nx - 1, ny)];
      if (nx < w - 1 && state[idx(nx + 1, ny)] != Inside) tx = std::min(tx, dist[idx(nx + 1, ny)]);
      if (ny > 0 && state[idx(nx, ny - 1)] != Inside) ty = dist[idx(nx, ny - 1)];
      if (ny < h - 1 && state[idx(nx, ny + 1)] != Inside) ty = std::min(ty, dist[idx(nx, ny + 1)]);
      double nt = detail::fmm_solve(tx, ty);
      if (nt == inf) nt = dist[idx(x, y)] + 1.0;
      dist[idx(nx, ny)] = nt;
      paint(nx, ny);
      state[idx(nx, ny)] = Band;
      heap.push({nt, {nx, ny}});
    }
  }
  return out;
}

inline RasterImage inpaint(const RasterImage& img, const Mask& mask, InpaintMethod method,
                           int radius = 5, Rgb background = {0, 0, 0}) {
  switch (method) {
    case InpaintMethod::BackgroundFill: return inpaint_background_fill(img, mask, background);
    case InpaintMethod::Telea: return inpaint_telea(img, mask, radius);
  }
  throw ConfigError("unknown inpaint method");
}

}  // namespace mmkn
