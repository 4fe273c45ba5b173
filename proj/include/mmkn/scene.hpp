#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmkn/image.hpp"
#include "mmkn/rng.hpp"

namespace mmkn {

struct BBox {
  int x = 0, y = 0, w = 0, h = 0;

  bool intersects(const BBox& o) const {
    return x < o.x + o.w && o.x < x + w && y < o.y + o.h && o.y < y + h;
  }
  bool inside(int canvas_w, int canvas_h) const {
    return x >= 0 && y >= 0 && w > 0 && h > 0 && x + w <= canvas_w && y + h <= canvas_h;
  }
  bool contains(int px, int py) const { return px >= x && px < x + w && py >= y && py < y + h; }
};

enum class ShapeKind { Disc, Box, Wedge };

inline std::string shape_kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::Disc: return "disc";
    case ShapeKind::Box: return "box";
    case ShapeKind::Wedge: return "wedge";
  }
  return "disc";
}

inline ShapeKind shape_kind_from(const std::string& s) {
  if (s == "disc") return ShapeKind::Disc;
  if (s == "box") return ShapeKind::Box;
  if (s == "wedge") return ShapeKind::Wedge;
  throw ConfigError("unknown shape kind: " + s);
}

struct SceneObject {
  std::string label;
  ShapeKind kind = ShapeKind::Disc;
  Rgb color{255, 0, 0};
  BBox bbox;
};

struct Scene {
  int width = 64;
  int height = 64;
  Rgb background{32, 32, 40};
  std::vector<SceneObject> objects;
};

namespace detail {

inline void put_pixel(RasterImage& img, int x, int y, Rgb color, Pcg32& rng, int jitter) {
  Rgb v = color;
  if (jitter > 0) {
    for (int c = 0; c < 3; ++c) {
      int delta = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(2 * jitter + 1))) - jitter;
      v[c] = clamp_u8(static_cast<int>(v[c]) + delta);
    }
  }
  img.set(x, y, v);
}

}  // namespace detail

// Deterministic rasterization: background first, then each object drawn
// strictly inside its bbox. The seed drives only the per-pixel speckle.
inline RasterImage render_scene(const Scene& scene, std::uint64_t seed) {
  RasterImage img(scene.width, scene.height, scene.background);
  int index = 0;
  for (const SceneObject& obj : scene.objects) {
    require_shape(obj.bbox.inside(scene.width, scene.height), "object bbox outside canvas");
    Pcg32 rng(splitmix64(seed ^ (0x51ce5ea7ULL + static_cast<std::uint64_t>(index) * 0x9e3779b9ULL)));
    const BBox& b = obj.bbox;
    const int jitter = 6;
    switch (obj.kind) {
      case ShapeKind::Disc: {
        const double cx = b.x + b.w / 2.0, cy = b.y + b.h / 2.0;
        const double rx = b.w / 2.0, ry = b.h / 2.0;
        for (int y = b.y; y < b.y + b.h; ++y)
          for (int x = b.x; x < b.x + b.w; ++x) {
            double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
            if (dx * dx + dy * dy <= 1.0) detail::put_pixel(img, x, y, obj.color, rng, jitter);
          }
        break;
      }
      case ShapeKind::Box: {
        for (int y = b.y; y < b.y + b.h; ++y)
          for (int x = b.x; x < b.x + b.w; ++x) detail::put_pixel(img, x, y, obj.color, rng, jitter);
        break;
      }
      case ShapeKind::Wedge: {
        // Apex at the top-center, base along the bottom edge.
        const double cx = b.x + b.w / 2.0;
        for (int y = b.y; y < b.y + b.h; ++y) {
          double t = b.h > 1 ? (y - b.y + 0.5) / b.h : 1.0;
          double half = 0.5 * b.w * t;
          for (int x = b.x; x < b.x + b.w; ++x) {
            if (std::abs(x + 0.5 - cx) <= half) detail::put_pixel(img, x, y, obj.color, rng, jitter);
          }
        }
        break;
      }
    }
    ++index;
  }
  return img;
}

inline void to_json(nlohmann::json& j, const BBox& b) { j = nlohmann::json{b.x, b.y, b.w, b.h}; }
inline void from_json(const nlohmann::json& j, BBox& b) {
  b.x = j.at(0);
  b.y = j.at(1);
  b.w = j.at(2);
  b.h = j.at(3);
}

inline void to_json(nlohmann::json& j, const SceneObject& o) {
  j = nlohmann::json{{"label", o.label},
                     {"kind", shape_kind_name(o.kind)},
                     {"color", {o.color[0], o.color[1], o.color[2]}},
                     {"bbox", o.bbox}};
}

inline void from_json(const nlohmann::json& j, SceneObject& o) {
  o.label = j.at("label");
  o.kind = shape_kind_from(j.at("kind"));
  auto c = j.at("color");
  o.color = {c.at(0).get<std::uint8_t>(), c.at(1).get<std::uint8_t>(), c.at(2).get<std::uint8_t>()};
  o.bbox = j.at("bbox");
}

inline void to_json(nlohmann::json& j, const Scene& s) {
  j = nlohmann::json{{"width", s.width},
                     {"height", s.height},
                     {"background", {s.background[0], s.background[1], s.background[2]}},
                     {"objects", s.objects}};
}

inline void from_json(const nlohmann::json& j, Scene& s) {
  s.width = j.at("width");
  s.height = j.at("height");
  auto b = j.at("background");
  s.background = {b.at(0).get<std::uint8_t>(), b.at(1).get<std::uint8_t>(),
                  b.at(2).get<std::uint8_t>()};
  s.objects = j.at("objects").get<std::vector<SceneObject>>();
}

}  // namespace mmkn
