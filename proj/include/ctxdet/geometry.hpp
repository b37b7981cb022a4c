#pragma once

#include <array>
#include <vector>

namespace ctxdet {

struct ImageSize {
  int width = 0;
  int height = 0;
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

// Axis-aligned box, origin top-left, continuous pixel coordinates.
struct BoundingBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  static BoundingBox from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, w, h};
  }

  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double x2() const { return x + w; }
  double y2() const { return y + h; }
  double area() const { return w * h; }
  // w > 0, h > 0, all coordinates finite.
  bool valid() const;
  bool inside(const ImageSize& image) const;

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct PixelPoint {
  int x = 0;
  int y = 0;
  friend bool operator==(const PixelPoint&, const PixelPoint&) = default;
};

// Segmentation stored as an explicit point set.
struct BinaryMask {
  std::vector<PixelPoint> points;
  ImageSize bounds;

  bool empty() const { return points.empty(); }
  bool within_bounds() const;
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

// Location of an add-on relative to a person:
// (dx / w_p, dy / h_p, log(w / w_p), log(h / h_p)), center displacement.
struct AddOnOffset {
  double dx_norm = 0.0;
  double dy_norm = 0.0;
  double log_w_ratio = 0.0;
  double log_h_ratio = 0.0;

  std::array<double, 4> as_array() const { return {dx_norm, dy_norm, log_w_ratio, log_h_ratio}; }
  static AddOnOffset from_array(const std::array<double, 4>& a) { return {a[0], a[1], a[2], a[3]}; }
};

// Spatial relation of box b to context box c: log-compressed center
// displacement in units of c's size, then log size ratios of b over c.
struct RelationDescriptor {
  double dx_log = 0.0;
  double dy_log = 0.0;
  double log_w_ratio = 0.0;
  double log_h_ratio = 0.0;

  std::array<double, 4> as_array() const { return {dx_log, dy_log, log_w_ratio, log_h_ratio}; }
  static RelationDescriptor from_array(const std::array<double, 4>& a) { return {a[0], a[1], a[2], a[3]}; }
};

double intersection_area(const BoundingBox& a, const BoundingBox& b);
double iou(const BoundingBox& a, const BoundingBox& b);

// max over x in m of min over y in m_ref of |x - y|. Directed: from `m`
// (the add-on) to `m_ref` (the person). Throws MissingSegmentation on an
// empty mask.
double directed_hausdorff(const BinaryMask& m, const BinaryMask& m_ref);

AddOnOffset encode_addon(const BoundingBox& person, const BoundingBox& addon);
BoundingBox decode_addon(const BoundingBox& person, const AddOnOffset& off);

// Box centered on the add-on, 0.6x the person's width and height.
inline constexpr double kIntermediateScale = 0.6;
BoundingBox intermediate_target(const BoundingBox& person, const BoundingBox& addon);

RelationDescriptor relation_descriptor(const BoundingBox& c, const BoundingBox& b);

// Same center, dims scaled by `factor`, then clipped to the image. Clipping
// never produces a non-positive dimension: a box pushed fully outside keeps
// a one-pixel sliver on the nearest edge.
BoundingBox expand_box(const BoundingBox& b, double factor, const ImageSize& bounds);

BoundingBox clip_box(const BoundingBox& b, const ImageSize& bounds);

}  // namespace ctxdet
