#include "ctxdet/feature_map.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>

#include "ctxdet/error.hpp"
#include "ctxdet/io.hpp"

namespace ctxdet {

static_assert(std::endian::native == std::endian::little, "feature map I/O assumes little-endian");

void FeatureMap::validate() const {
  if (channels <= 0 || height <= 0 || width <= 0) throw ShapeMismatch("feature map: non-positive dims");
  if (!(stride > 0.0)) throw ShapeMismatch("feature map: stride must be positive");
  if (data.size() != static_cast<size_t>(channels) * height * width) {
    throw ShapeMismatch("feature map: data length != C*H*W");
  }
}

CellSpan project_box(const FeatureMap& fm, const BoundingBox& box) {
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x / fm.stride)));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y / fm.stride)));
  const int x1 = std::min(fm.width, static_cast<int>(std::ceil(box.x2() / fm.stride)));
  const int y1 = std::min(fm.height, static_cast<int>(std::ceil(box.y2() / fm.stride)));
  if (x1 <= x0 || y1 <= y0) throw Error("roi_pool: box lies outside the feature map");
  return {x0, y0, x1, y1};
}

RoiPoolResult roi_pool(const FeatureMap& fm, const BoundingBox& box, int grid) {
  if (grid <= 0) throw ShapeMismatch("roi_pool: grid must be positive");
  const CellSpan span = project_box(fm, box);
  const int lw = span.x1 - span.x0;
  const int lh = span.y1 - span.y0;
  const int cells = grid * grid;

  RoiPoolResult out;
  out.values = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(fm.channels) * cells);
  out.argmax.assign(static_cast<size_t>(fm.channels) * cells, -1);

  for (int gy = 0; gy < grid; ++gy) {
    const int ys = span.y0 + (gy * lh) / grid;
    const int ye = span.y0 + ((gy + 1) * lh + grid - 1) / grid;
    for (int gx = 0; gx < grid; ++gx) {
      const int xs = span.x0 + (gx * lw) / grid;
      const int xe = span.x0 + ((gx + 1) * lw + grid - 1) / grid;
      if (xe <= xs || ye <= ys) continue;
      for (int c = 0; c < fm.channels; ++c) {
        float best = -std::numeric_limits<float>::infinity();
        long best_idx = -1;
        for (int y = ys; y < ye; ++y) {
          for (int x = xs; x < xe; ++x) {
            const size_t idx = fm.index(c, y, x);
            if (fm.data[idx] > best) {
              best = fm.data[idx];
              best_idx = static_cast<long>(idx);
            }
          }
        }
        const size_t o = static_cast<size_t>(c) * cells + gy * grid + gx;
        out.values[static_cast<Eigen::Index>(o)] = best;
        out.argmax[o] = best_idx;
      }
    }
  }
  return out;
}

namespace {

void put_i32(std::vector<char>& buf, std::int32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf.insert(buf.end(), b, b + 4);
}

std::int32_t get_i32(const std::string& s, size_t off) {
  std::int32_t v;
  std::memcpy(&v, s.data() + off, 4);
  return v;
}

}  // namespace

std::vector<char> encode_feature_map(const FeatureMap& fm) {
  fm.validate();
  const double rounded = std::round(fm.stride);
  if (rounded != fm.stride) throw Error("feature map file: stride must be an integer");
  std::vector<char> buf;
  buf.reserve(16 + fm.data.size() * 4);
  put_i32(buf, fm.channels);
  put_i32(buf, fm.height);
  put_i32(buf, fm.width);
  put_i32(buf, static_cast<std::int32_t>(rounded));
  const char* raw = reinterpret_cast<const char*>(fm.data.data());
  buf.insert(buf.end(), raw, raw + fm.data.size() * sizeof(float));
  return buf;
}

void save_feature_map(const FeatureMap& fm, const std::filesystem::path& path) {
  const std::vector<char> buf = encode_feature_map(fm);
  write_file_atomic(path, std::string_view(buf.data(), buf.size()));
}

FeatureMap load_feature_map(const std::filesystem::path& path) {
  const std::string s = read_file(path);
  if (s.size() < 16) throw Error("feature map file truncated: " + path.string());
  FeatureMap fm;
  fm.channels = get_i32(s, 0);
  fm.height = get_i32(s, 4);
  fm.width = get_i32(s, 8);
  const std::int32_t stride = get_i32(s, 12);
  if (fm.channels <= 0 || fm.height <= 0 || fm.width <= 0 || stride <= 0) {
    throw Error("feature map file has invalid header: " + path.string());
  }
  fm.stride = stride;
  const size_t n = static_cast<size_t>(fm.channels) * fm.height * fm.width;
  if (s.size() != 16 + n * sizeof(float)) throw Error("feature map file size mismatch: " + path.string());
  fm.data.resize(n);
  std::memcpy(fm.data.data(), s.data() + 16, n * sizeof(float));
  return fm;
}

}  // namespace ctxdet
