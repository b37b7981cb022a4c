#pragma once

#include <filesystem>
#include <vector>

#include "ctxdet/geometry.hpp"

namespace ctxdet {

inline constexpr int kMaxDetectionsPerImage = 100;
inline constexpr double kNmsIou = 0.3;

struct Detection {
  int image_id = 0;
  int category_id = 0;
  BoundingBox box;
  double score = 0.0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

using DetectionSet = std::vector<Detection>;

// Greedy per-category suppression of boxes overlapping a higher-scored box
// by more than `iou_threshold`. Ties in score keep input order.
DetectionSet nms(const DetectionSet& dets, double iou_threshold);

// Keeps the `cap` highest-scored detections of every image, across
// categories. Output is grouped by image (ascending id), each group sorted
// by score descending.
DetectionSet cap_per_image(const DetectionSet& dets, int cap = kMaxDetectionsPerImage);

// CSV with header image_id,category_id,x,y,w,h,score.
void save_detections(const DetectionSet& dets, const std::filesystem::path& path);
DetectionSet load_detections(const std::filesystem::path& path);

}  // namespace ctxdet
