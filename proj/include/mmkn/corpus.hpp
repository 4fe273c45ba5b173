#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "mmkn/inpaint.hpp"
#include "mmkn/scene.hpp"
#include "mmkn/tokenizer.hpp"

namespace mmkn {

// Object catalog: three shape categories, and within each category the
// three colors are the distinct objects. Every object name is a single
// vocabulary token.
struct ObjectType {
  std::string name;
  ShapeKind kind;
  Rgb color;
};

inline const std::vector<ObjectType>& object_catalog() {
  static const std::vector<ObjectType> catalog = {
      {"bear", ShapeKind::Disc, {214, 40, 40}},
      {"horse", ShapeKind::Disc, {60, 190, 60}},
      {"dog", ShapeKind::Disc, {60, 90, 220}},
      {"bus", ShapeKind::Box, {214, 40, 40}},
      {"car", ShapeKind::Box, {60, 190, 60}},
      {"train", ShapeKind::Box, {60, 90, 220}},
      {"banana", ShapeKind::Wedge, {214, 40, 40}},
      {"pizza", ShapeKind::Wedge, {60, 190, 60}},
      {"cake", ShapeKind::Wedge, {60, 90, 220}},
  };
  return catalog;
}

inline const ObjectType& object_by_name(const std::string& name) {
  for (const ObjectType& t : object_catalog())
    if (t.name == name) return t;
  throw ConfigError("unknown object type: " + name);
}

struct CorpusParams {
  int canvas = 64;
  Rgb background{32, 32, 40};
  int min_objects = 1;
  int max_objects = 3;
  double min_size_frac = 0.26;  // object bbox edge relative to canvas
  double max_size_frac = 0.42;
  int placement_margin = 3;  // gap kept between bboxes
};

namespace detail {

inline BBox place_bbox(Pcg32& rng, const CorpusParams& p, const std::vector<BBox>& taken) {
  const int lo = std::max(4, static_cast<int>(p.min_size_frac * p.canvas));
  const int hi = std::max(lo + 1, static_cast<int>(p.max_size_frac * p.canvas));
  for (int attempt = 0; attempt < 200; ++attempt) {
    int w = lo + static_cast<int>(rng.next_below(static_cast<std::uint32_t>(hi - lo + 1)));
    int h = lo + static_cast<int>(rng.next_below(static_cast<std::uint32_t>(hi - lo + 1)));
    int x = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(p.canvas - w)));
    int y = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(p.canvas - h)));
    BBox b{x, y, w, h};
    BBox padded{x - p.placement_margin, y - p.placement_margin, w + 2 * p.placement_margin,
                h + 2 * p.placement_margin};
    bool clear = true;
    for (const BBox& other : taken) clear = clear && !padded.intersects(other);
    if (clear) return b;
  }
  throw ContractError("could not place a bbox without overlap");
}

}  // namespace detail

// Canonical caption: objects listed left to right by bbox center.
inline std::string caption_for_scene(const Scene& scene) {
  std::vector<const SceneObject*> order;
  for (const SceneObject& o : scene.objects) order.push_back(&o);
  std::sort(order.begin(), order.end(), [](const SceneObject* a, const SceneObject* b) {
    const int ax = 2 * a->bbox.x + a->bbox.w, bx = 2 * b->bbox.x + b->bbox.w;
    if (ax != bx) return ax < bx;
    const int ay = 2 * a->bbox.y + a->bbox.h, by = 2 * b->bbox.y + b->bbox.h;
    if (ay != by) return ay < by;
    return a->label < b->label;
  });
  std::string caption = "the image shows a";
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i > 0) caption += " and a";
    caption += " " + order[i]->label;
  }
  return caption;
}

inline Scene random_scene(Pcg32& rng, const CorpusParams& params,
                          const std::vector<int>& allowed_types, int n_objects) {
  Scene s;
  s.width = params.canvas;
  s.height = params.canvas;
  s.background = params.background;
  std::vector<BBox> taken;
  for (int i = 0; i < n_objects; ++i) {
    const ObjectType& t =
        object_catalog()[static_cast<std::size_t>(allowed_types[rng.next_below(
            static_cast<std::uint32_t>(allowed_types.size()))])];
    BBox b = detail::place_bbox(rng, params, taken);
    taken.push_back(b);
    s.objects.push_back({t.name, t.kind, t.color, b});
  }
  return s;
}

// One identification sample: the target object plus one distractor of a
// different type, far enough apart that the target bbox mask cannot
// touch the distractor.
inline Scene knowledge_scene(Pcg32& rng, const CorpusParams& params, int target_type,
                             int distractor_type) {
  require(target_type != distractor_type, "distractor must differ from the target");
  Scene s;
  s.width = params.canvas;
  s.height = params.canvas;
  s.background = params.background;
  std::vector<BBox> taken;
  const ObjectType& target = object_catalog()[static_cast<std::size_t>(target_type)];
  const ObjectType& distractor = object_catalog()[static_cast<std::size_t>(distractor_type)];
  BBox tb = detail::place_bbox(rng, params, taken);
  taken.push_back(tb);
  BBox db = detail::place_bbox(rng, params, taken);
  s.objects.push_back({target.name, target.kind, target.color, tb});
  s.objects.push_back({distractor.name, distractor.kind, distractor.color, db});
  return s;
}

}  // namespace mmkn
