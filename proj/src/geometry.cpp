#include "ctxdet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ctxdet/error.hpp"

namespace ctxdet {

bool BoundingBox::valid() const {
  return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h) && w > 0.0 &&
         h > 0.0;
}

bool BoundingBox::inside(const ImageSize& image) const {
  constexpr double kSlack = 1e-9;
  return x >= -kSlack && y >= -kSlack && x2() <= image.width + kSlack &&
         y2() <= image.height + kSlack;
}

bool BinaryMask::within_bounds() const {
  return std::all_of(points.begin(), points.end(), [this](const PixelPoint& p) {
    return p.x >= 0 && p.y >= 0 && p.x < bounds.width && p.y < bounds.height;
  });
}

double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x, b.x);
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double directed_hausdorff(const BinaryMask& m, const BinaryMask& m_ref) {
  if (m.empty() || m_ref.empty()) {
    throw MissingSegmentation("directed_hausdorff: empty segmentation mask");
  }
  // Integer squared distances keep the result exact; the inner scan stops as
  // soon as a point is closer than the running maximum.
  long long worst = 0;
  for (const PixelPoint& p : m.points) {
    long long nearest = std::numeric_limits<long long>::max();
    for (const PixelPoint& q : m_ref.points) {
      const long long dx = p.x - q.x;
      const long long dy = p.y - q.y;
      const long long d2 = dx * dx + dy * dy;
      if (d2 < nearest) {
        nearest = d2;
        if (nearest <= worst) break;
      }
    }
    worst = std::max(worst, nearest);
  }
  return std::sqrt(static_cast<double>(worst));
}

AddOnOffset encode_addon(const BoundingBox& person, const BoundingBox& addon) {
  return {(addon.cx() - person.cx()) / person.w, (addon.cy() - person.cy()) / person.h,
          std::log(addon.w / person.w), std::log(addon.h / person.h)};
}

BoundingBox decode_addon(const BoundingBox& person, const AddOnOffset& off) {
  return BoundingBox::from_center(person.cx() + off.dx_norm * person.w,
                                  person.cy() + off.dy_norm * person.h,
                                  person.w * std::exp(off.log_w_ratio),
                                  person.h * std::exp(off.log_h_ratio));
}

BoundingBox intermediate_target(const BoundingBox& person, const BoundingBox& addon) {
  return BoundingBox::from_center(addon.cx(), addon.cy(), kIntermediateScale * person.w,
                                  kIntermediateScale * person.h);
}

namespace {
double signed_log1p(double v) { return std::copysign(std::log1p(std::abs(v)), v); }
}  // namespace

RelationDescriptor relation_descriptor(const BoundingBox& c, const BoundingBox& b) {
  const double dx = (b.cx() - c.cx()) / c.w;
  const double dy = (b.cy() - c.cy()) / c.h;
  return {signed_log1p(dx), signed_log1p(dy), std::log(b.w / c.w), std::log(b.h / c.h)};
}

BoundingBox clip_box(const BoundingBox& b, const ImageSize& bounds) {
  const double W = bounds.width;
  const double H = bounds.height;
  double x0 = std::clamp(b.x, 0.0, W);
  double y0 = std::clamp(b.y, 0.0, H);
  double x1 = std::clamp(b.x2(), 0.0, W);
  double y1 = std::clamp(b.y2(), 0.0, H);
  if (x1 - x0 <= 0.0) {
    x0 = std::min(x0, W - 1.0);
    x1 = x0 + 1.0;
  }
  if (y1 - y0 <= 0.0) {
    y0 = std::min(y0, H - 1.0);
    y1 = y0 + 1.0;
  }
  return {x0, y0, x1 - x0, y1 - y0};
}

BoundingBox expand_box(const BoundingBox& b, double factor, const ImageSize& bounds) {
  return clip_box(BoundingBox::from_center(b.cx(), b.cy(), b.w * factor, b.h * factor), bounds);
}

}  // namespace ctxdet
