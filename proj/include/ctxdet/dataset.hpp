#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxdet/feature_map.hpp"
#include "ctxdet/geometry.hpp"

namespace ctxdet {

struct CategoryDef {
  int id = 0;
  std::string name;
  std::string supercategory;
  bool is_person = false;
  bool is_addon = false;
  friend bool operator==(const CategoryDef&, const CategoryDef&) = default;
};

// The fifteen person add-on categories (COCO names).
const std::vector<std::string>& coco_addon_names();

struct ImageInfo {
  int id = 0;
  int width = 0;
  int height = 0;
  ImageSize size() const { return {width, height}; }
  friend bool operator==(const ImageInfo&, const ImageInfo&) = default;
};

struct Annotation {
  int id = 0;
  int image_id = 0;
  int category_id = 0;
  BoundingBox bbox;
  BinaryMask mask;
  bool ignore = false;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

// COCO-like collection of images, categories and annotations.
class SceneSet {
 public:
  std::vector<ImageInfo> images;
  std::vector<CategoryDef> categories;
  std::vector<Annotation> annotations;

  // Rebuilds lookup tables; call after mutating the vectors.
  void reindex();
  // Throws SchemaError with the offending field path.
  void validate() const;

  const CategoryDef& category(int id) const;
  const ImageInfo& image(int id) const;
  std::optional<int> person_category() const;
  // Annotations of one image, in file order.
  const std::vector<size_t>& annotation_indices(int image_id) const;
  size_t image_index(int image_id) const;

  friend bool operator==(const SceneSet& a, const SceneSet& b) {
    return a.images == b.images && a.categories == b.categories && a.annotations == b.annotations;
  }

 private:
  std::map<int, size_t> category_index_;
  std::map<int, size_t> image_index_;
  std::map<int, std::vector<size_t>> per_image_;
};

nlohmann::json scene_set_to_json(const SceneSet& set);
// Validates; SchemaError carries the field path of the first violation.
SceneSet scene_set_from_json(const nlohmann::json& j);
SceneSet load_annotations(const std::filesystem::path& path);
void save_annotations(const SceneSet& set, const std::filesystem::path& path);

// Person -> (add-on category -> add-on annotation id).
struct AttachmentMap {
  std::map<int, std::map<int, int>> by_person;
  std::map<int, int> person_of_addon;
  // Add-on annotations dropped because their image had no person.
  std::vector<int> discarded;

  bool attached(int addon_id) const { return person_of_addon.count(addon_id) > 0; }
};

// Every add-on goes to the person with the smallest directed Hausdorff
// distance (add-on mask to person mask), ties to the lower person id. A
// person keeps at most one add-on per category: the closest, ties to the
// lower add-on id. Throws MissingSegmentation when a mask is empty.
AttachmentMap build_attachments(const SceneSet& set);

inline constexpr int kBackground = 0;
inline constexpr double kPositiveIou = 0.5;

struct ProposalLabel {
  int category_id = kBackground;  // 0 = background
  int gt_index = -1;              // index into the gts argument
  double max_iou = 0.0;
};

// IoU >= 0.5 with some non-ignored GT -> that GT's category (highest IoU,
// ties to lower annotation id); otherwise background. All proposals are
// kept, including those under 0.1 IoU.
std::vector<ProposalLabel> label_proposals(const std::vector<BoundingBox>& proposals,
                                           const std::vector<const Annotation*>& gts);

// Indices into `labels`. At most floor(size * positive_fraction) positives,
// the rest background, all drawn without replacement. Throws Error when
// size < 4 or labels is empty.
std::vector<int> sample_minibatch(const std::vector<ProposalLabel>& labels, int size,
                                  double positive_fraction, std::uint64_t seed);

// Scenes plus per-image features and proposals, aligned with scenes.images.
struct Dataset {
  SceneSet scenes;
  std::vector<FeatureMap> features;
  std::vector<std::vector<BoundingBox>> proposals;
  // Planted add-on -> anchor annotation ids (synthetic data only).
  std::map<int, int> planted_anchor;
};

// <dir>/annotations.json, <dir>/proposals.json, <dir>/features/<id>.bin.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Exact GT boxes appended to each image's proposal pool.
void inject_gt_proposals(Dataset& data);

}  // namespace ctxdet
