#pragma once

#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "ctxdet/geometry.hpp"

namespace ctxdet {

// C x H x W grid of scalars; cell (y, x) covers image pixels
// [x * stride, (x + 1) * stride) horizontally.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  double stride = 1.0;
  std::vector<float> data;  // row-major C, H, W

  FeatureMap() = default;
  FeatureMap(int c, int h, int w, double s)
      : channels(c), height(h), width(w), stride(s), data(static_cast<size_t>(c) * h * w, 0.0f) {}

  size_t index(int c, int y, int x) const {
    return (static_cast<size_t>(c) * height + y) * width + x;
  }
  float& at(int c, int y, int x) { return data[index(c, y, x)]; }
  float at(int c, int y, int x) const { return data[index(c, y, x)]; }

  // Throws ShapeMismatch when data.size() != C*H*W or stride <= 0.
  void validate() const;

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

inline constexpr int kDefaultRoiGrid = 6;

struct RoiPoolResult {
  // Length C*G*G, index c*G*G + gy*G + gx.
  Eigen::VectorXd values;
  // Flat index into FeatureMap::data of each selected maximum, -1 for an
  // empty cell (value 0).
  std::vector<long> argmax;
};

// Integer cell span [begin, end) of a box projected onto the map.
struct CellSpan {
  int x0, y0, x1, y1;
};

// Projects by stride, rounds outward, clips. Throws Error when the box lies
// fully outside the map.
CellSpan project_box(const FeatureMap& fm, const BoundingBox& box);

// Max pooling over a G x G grid laid on the box. Grid cell i spans
// [floor(i*L/G), ceil((i+1)*L/G)) feature cells from the projected origin.
RoiPoolResult roi_pool(const FeatureMap& fm, const BoundingBox& box, int grid = kDefaultRoiGrid);

// Binary file: little-endian int32 C, H, W, stride, then C*H*W float32.
// The stride is stored as an integer number of pixels.
void save_feature_map(const FeatureMap& fm, const std::filesystem::path& path);
FeatureMap load_feature_map(const std::filesystem::path& path);
std::vector<char> encode_feature_map(const FeatureMap& fm);

}  // namespace ctxdet
