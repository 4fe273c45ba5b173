#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmkn/scene.hpp"

namespace mmkn {

// One object region joined from an annotation file:
//   { "images":      [{"id", "file_name", "width", "height"}],
//     "annotations": [{"image_id", "category_id", "bbox": [x, y, w, h]}],
//     "categories":  [{"id", "name"}] }
// Bboxes are pixel units with the origin at the top-left corner.
struct AnnotationRecord {
  std::string image_path;
  std::string label;
  BBox bbox;
};

struct AnnotationReject {
  int image_id = -1;
  std::string reason;
};

struct AnnotationSet {
  std::vector<AnnotationRecord> records;
  std::vector<AnnotationReject> rejected;
};

inline AnnotationSet load_annotations(
    const std::string& dir,
    const std::function<bool(const std::string&)>& label_known = nullptr) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  const fs::path ann_path = root / "annotations.json";
  std::ifstream in(ann_path);
  if (!in) throw IoError("missing annotation file: " + ann_path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed annotation json: " + std::string(e.what()));
  }

  struct ImageInfo {
    std::string file;
    int width = 0, height = 0;
  };
  std::map<int, ImageInfo> images;
  std::map<int, std::string> categories;
  try {
    for (const auto& img : doc.at("images"))
      images[img.at("id").get<int>()] = {img.at("file_name").get<std::string>(),
                                         img.at("width").get<int>(), img.at("height").get<int>()};
    for (const auto& cat : doc.at("categories"))
      categories[cat.at("id").get<int>()] = cat.at("name").get<std::string>();

    AnnotationSet out;
    for (const auto& ann : doc.at("annotations")) {
      const int image_id = ann.at("image_id").get<int>();
      auto img_it = images.find(image_id);
      if (img_it == images.end()) {
        out.rejected.push_back({image_id, "unknown image id"});
        continue;
      }
      const auto& bj = ann.at("bbox");
      BBox box{bj.at(0).get<int>(), bj.at(1).get<int>(), bj.at(2).get<int>(), bj.at(3).get<int>()};
      if (!box.inside(img_it->second.width, img_it->second.height)) {
        out.rejected.push_back({image_id, "bbox outside image bounds"});
        continue;
      }
      const fs::path img_path = root / img_it->second.file;
      if (!fs::exists(img_path)) throw IoError("missing image file: " + img_path.string());
      std::string label = "<unk>";
      auto cat_it = categories.find(ann.at("category_id").get<int>());
      if (cat_it != categories.end()) {
        label = cat_it->second;
        if (label_known && !label_known(label)) label = "<unk>";
      }
      out.records.push_back({img_path.string(), label, box});
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed annotation json: " + std::string(e.what()));
  }
}

}  // namespace mmkn
