#include "ctxdet/detection.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <sstream>

#include "ctxdet/error.hpp"
#include "ctxdet/io.hpp"

namespace ctxdet {

namespace {

std::vector<size_t> order_by_score(const DetectionSet& dets, const std::vector<size_t>& idx) {
  std::vector<size_t> order = idx;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

}  // namespace

DetectionSet nms(const DetectionSet& dets, double iou_threshold) {
  std::map<std::pair<int, int>, std::vector<size_t>> groups;
  for (size_t i = 0; i < dets.size(); ++i) groups[{dets[i].image_id, dets[i].category_id}].push_back(i);
  std::vector<char> keep(dets.size(), 0);
  for (const auto& [key, idx] : groups) {
    std::vector<size_t> kept;
    for (size_t i : order_by_score(dets, idx)) {
      const bool suppressed = std::any_of(kept.begin(), kept.end(),
                                          [&](size_t k) { return iou(dets[i].box, dets[k].box) > iou_threshold; });
      if (!suppressed) {
        kept.push_back(i);
        keep[i] = 1;
      }
    }
  }
  DetectionSet out;
  for (size_t i = 0; i < dets.size(); ++i)
    if (keep[i]) out.push_back(dets[i]);
  return out;
}

DetectionSet cap_per_image(const DetectionSet& dets, int cap) {
  std::map<int, std::vector<size_t>> by_image;
  for (size_t i = 0; i < dets.size(); ++i) by_image[dets[i].image_id].push_back(i);
  DetectionSet out;
  for (const auto& [image, idx] : by_image) {
    const auto order = order_by_score(dets, idx);
    const size_t n = std::min(order.size(), static_cast<size_t>(std::max(cap, 0)));
    for (size_t k = 0; k < n; ++k) out.push_back(dets[order[k]]);
  }
  return out;
}

void save_detections(const DetectionSet& dets, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "image_id,category_id,x,y,w,h,score\n";
  for (const auto& d : dets) {
    os << d.image_id << ',' << d.category_id << ',' << format_double(d.box.x) << ',' << format_double(d.box.y) << ','
       << format_double(d.box.w) << ',' << format_double(d.box.h) << ',' << format_double(d.score) << '\n';
  }
  write_file_atomic(path, os.str());
}

DetectionSet load_detections(const std::filesystem::path& path) {
  const auto rows = parse_csv(read_file(path));
  DetectionSet out;
  for (size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (r == 0 && !row.empty() && row[0] == "image_id") continue;
    if (row.size() != 7) throw SchemaError(path.string() + ":" + std::to_string(r + 1), "expected 7 columns");
    try {
      Detection d;
      d.image_id = std::stoi(row[0]);
      d.category_id = std::stoi(row[1]);
      d.box = {std::stod(row[2]), std::stod(row[3]), std::stod(row[4]), std::stod(row[5])};
      d.score = std::stod(row[6]);
      out.push_back(d);
    } catch (const std::logic_error&) {
      throw SchemaError(path.string() + ":" + std::to_string(r + 1), "unparseable number");
    }
  }
  return out;
}

}  // namespace ctxdet
