#include "ctxdet/dataset.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>

#include "ctxdet/error.hpp"
#include "ctxdet/io.hpp"
#include "ctxdet/rng.hpp"

namespace ctxdet {

const std::vector<std::string>& coco_addon_names() {
  static const std::vector<std::string> names = {
      "backpack",     "umbrella",       "handbag",    "tie",        "suitcase",
      "skis",         "snowboard",      "sports ball", "baseball bat", "baseball glove",
      "skateboard",   "surfboard",      "tennis racket", "wine glass", "cell phone"};
  return names;
}

void SceneSet::reindex() {
  category_index_.clear();
  image_index_.clear();
  per_image_.clear();
  for (size_t i = 0; i < categories.size(); ++i) category_index_[categories[i].id] = i;
  for (size_t i = 0; i < images.size(); ++i) {
    image_index_[images[i].id] = i;
    per_image_[images[i].id];
  }
  for (size_t i = 0; i < annotations.size(); ++i) per_image_[annotations[i].image_id].push_back(i);
}

const CategoryDef& SceneSet::category(int id) const {
  auto it = category_index_.find(id);
  if (it == category_index_.end()) throw Error("unknown category id " + std::to_string(id));
  return categories[it->second];
}

const ImageInfo& SceneSet::image(int id) const { return images[image_index(id)]; }

size_t SceneSet::image_index(int id) const {
  auto it = image_index_.find(id);
  if (it == image_index_.end()) throw Error("unknown image id " + std::to_string(id));
  return it->second;
}

std::optional<int> SceneSet::person_category() const {
  for (const auto& c : categories) {
    if (c.is_person) return c.id;
  }
  return std::nullopt;
}

const std::vector<size_t>& SceneSet::annotation_indices(int image_id) const {
  static const std::vector<size_t> kEmpty;
  auto it = per_image_.find(image_id);
  return it == per_image_.end() ? kEmpty : it->second;
}

void SceneSet::validate() const {
  std::set<int> cat_ids;
  int persons = 0;
  for (size_t i = 0; i < categories.size(); ++i) {
    const std::string where = "categories[" + std::to_string(i) + "]";
    if (!cat_ids.insert(categories[i].id).second) throw SchemaError(where + ".id", "duplicate category id");
    if (categories[i].is_person) ++persons;
    if (categories[i].is_person && categories[i].is_addon) {
      throw SchemaError(where, "a category cannot be both person and add-on");
    }
  }
  if (!categories.empty() && persons != 1) {
    throw SchemaError("categories", "expected exactly one person category, found " + std::to_string(persons));
  }
  std::map<int, ImageSize> sizes;
  for (size_t i = 0; i < images.size(); ++i) {
    const std::string where = "images[" + std::to_string(i) + "]";
    if (images[i].width <= 0 || images[i].height <= 0) throw SchemaError(where, "non-positive image size");
    if (!sizes.emplace(images[i].id, images[i].size()).second) throw SchemaError(where + ".id", "duplicate image id");
  }
  std::set<int> ann_ids;
  for (size_t i = 0; i < annotations.size(); ++i) {
    const std::string where = "annotations[" + std::to_string(i) + "]";
    const Annotation& a = annotations[i];
    if (!ann_ids.insert(a.id).second) throw SchemaError(where + ".id", "duplicate annotation id");
    auto img = sizes.find(a.image_id);
    if (img == sizes.end()) throw SchemaError(where + ".image_id", "unknown image");
    if (!cat_ids.count(a.category_id)) throw SchemaError(where + ".category_id", "unknown category");
    if (!a.bbox.valid()) throw SchemaError(where + ".bbox", "box must have positive finite size");
    if (!a.bbox.inside(img->second)) throw SchemaError(where + ".bbox", "box outside image");
    if (!a.mask.within_bounds()) throw SchemaError(where + ".mask", "mask point outside image");
  }
}

nlohmann::json scene_set_to_json(const SceneSet& set) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& im : set.images) images.push_back({{"id", im.id}, {"width", im.width}, {"height", im.height}});
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& c : set.categories) {
    cats.push_back({{"id", c.id},
                    {"name", c.name},
                    {"supercategory", c.supercategory},
                    {"is_person", c.is_person},
                    {"is_addon", c.is_addon}});
  }
  nlohmann::json anns = nlohmann::json::array();
  for (const auto& a : set.annotations) {
    nlohmann::json mask = nlohmann::json::array();
    for (const auto& p : a.mask.points) mask.push_back({p.x, p.y});
    anns.push_back({{"id", a.id},
                    {"image_id", a.image_id},
                    {"category_id", a.category_id},
                    {"bbox", {a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h}},
                    {"mask", std::move(mask)},
                    {"ignore", a.ignore}});
  }
  return {{"images", std::move(images)}, {"categories", std::move(cats)}, {"annotations", std::move(anns)}};
}

namespace {

const nlohmann::json& field(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) throw SchemaError(where, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw SchemaError(where + "." + key, "missing field");
  return *it;
}

int int_field(const nlohmann::json& obj, const char* key, const std::string& where) {
  const auto& v = field(obj, key, where);
  if (!v.is_number_integer()) throw SchemaError(where + "." + key, "expected an integer");
  return v.get<int>();
}

bool bool_field(const nlohmann::json& obj, const char* key, const std::string& where, bool fallback) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_boolean()) throw SchemaError(where + "." + key, "expected a boolean");
  return v.get<bool>();
}

std::string string_field(const nlohmann::json& obj, const char* key, const std::string& where) {
  const auto& v = field(obj, key, where);
  if (!v.is_string()) throw SchemaError(where + "." + key, "expected a string");
  return v.get<std::string>();
}

const nlohmann::json& array_field(const nlohmann::json& obj, const char* key, const std::string& where) {
  const auto& v = field(obj, key, where);
  if (!v.is_array()) throw SchemaError(where.empty() ? key : where + "." + key, "expected an array");
  return v;
}

}  // namespace

SceneSet scene_set_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("", "top level must be an object");
  SceneSet set;
  const auto& images = array_field(j, "images", "");
  for (size_t i = 0; i < images.size(); ++i) {
    const std::string where = "images[" + std::to_string(i) + "]";
    set.images.push_back({int_field(images[i], "id", where), int_field(images[i], "width", where),
                          int_field(images[i], "height", where)});
  }
  const auto& cats = array_field(j, "categories", "");
  for (size_t i = 0; i < cats.size(); ++i) {
    const std::string where = "categories[" + std::to_string(i) + "]";
    CategoryDef c;
    c.id = int_field(cats[i], "id", where);
    c.name = string_field(cats[i], "name", where);
    c.supercategory = string_field(cats[i], "supercategory", where);
    c.is_person = bool_field(cats[i], "is_person", where, false);
    c.is_addon = bool_field(cats[i], "is_addon", where, false);
    set.categories.push_back(std::move(c));
  }
  std::map<int, ImageSize> sizes;
  for (const auto& im : set.images) sizes[im.id] = im.size();
  const auto& anns = array_field(j, "annotations", "");
  for (size_t i = 0; i < anns.size(); ++i) {
    const std::string where = "annotations[" + std::to_string(i) + "]";
    Annotation a;
    a.id = int_field(anns[i], "id", where);
    a.image_id = int_field(anns[i], "image_id", where);
    a.category_id = int_field(anns[i], "category_id", where);
    const auto& bb = array_field(anns[i], "bbox", where);
    if (bb.size() != 4 || !std::all_of(bb.begin(), bb.end(), [](const auto& v) { return v.is_number(); })) {
      throw SchemaError(where + ".bbox", "expected [x, y, w, h]");
    }
    a.bbox = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>()};
    if (anns[i].contains("mask")) {
      const auto& mask = array_field(anns[i], "mask", where);
      for (size_t k = 0; k < mask.size(); ++k) {
        const auto& p = mask[k];
        if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() || !p[1].is_number_integer()) {
          throw SchemaError(where + ".mask[" + std::to_string(k) + "]", "expected [x, y] integers");
        }
        a.mask.points.push_back({p[0].get<int>(), p[1].get<int>()});
      }
    }
    auto sz = sizes.find(a.image_id);
    if (sz != sizes.end()) a.mask.bounds = sz->second;
    a.ignore = bool_field(anns[i], "ignore", where, false);
    set.annotations.push_back(std::move(a));
  }
  set.validate();
  set.reindex();
  return set;
}

SceneSet load_annotations(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("", std::string("invalid JSON: ") + e.what());
  }
  return scene_set_from_json(j);
}

void save_annotations(const SceneSet& set, const std::filesystem::path& path) {
  write_file_atomic(path, scene_set_to_json(set).dump() + "\n");
}

AttachmentMap build_attachments(const SceneSet& set) {
  AttachmentMap out;
  const std::optional<int> person_cat = set.person_category();
  for (const ImageInfo& im : set.images) {
    std::vector<const Annotation*> people;
    std::vector<const Annotation*> addons;
    for (size_t idx : set.annotation_indices(im.id)) {
      const Annotation& a = set.annotations[idx];
      if (person_cat && a.category_id == *person_cat) {
        people.push_back(&a);
      } else if (set.category(a.category_id).is_addon) {
        addons.push_back(&a);
      }
    }
    auto by_id = [](const Annotation* a, const Annotation* b) { return a->id < b->id; };
    std::sort(people.begin(), people.end(), by_id);
    std::sort(addons.begin(), addons.end(), by_id);
    if (people.empty()) {
      for (const Annotation* a : addons) out.discarded.push_back(a->id);
      continue;
    }
    // (person id, category) -> (distance, add-on id) of the closest add-on.
    std::map<std::pair<int, int>, std::pair<double, int>> best;
    for (const Annotation* a : addons) {
      double nearest = std::numeric_limits<double>::infinity();
      int owner = -1;
      for (const Annotation* p : people) {
        const double d = directed_hausdorff(a->mask, p->mask);
        if (d < nearest) {
          nearest = d;
          owner = p->id;
        }
      }
      const auto key = std::make_pair(owner, a->category_id);
      auto it = best.find(key);
      if (it == best.end() || nearest < it->second.first) best[key] = {nearest, a->id};
    }
    for (const auto& [key, val] : best) {
      out.by_person[key.first][key.second] = val.second;
      out.person_of_addon[val.second] = key.first;
    }
  }
  return out;
}

std::vector<ProposalLabel> label_proposals(const std::vector<BoundingBox>& proposals,
                                           const std::vector<const Annotation*>& gts) {
  std::vector<ProposalLabel> labels(proposals.size());
  for (size_t i = 0; i < proposals.size(); ++i) {
    ProposalLabel& l = labels[i];
    int best_id = std::numeric_limits<int>::max();
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gts[g]->ignore) continue;
      const double v = iou(proposals[i], gts[g]->bbox);
      if (v > l.max_iou || (v == l.max_iou && v > 0.0 && gts[g]->id < best_id)) {
        l.max_iou = v;
        l.gt_index = static_cast<int>(g);
        best_id = gts[g]->id;
      }
    }
    if (l.max_iou >= kPositiveIou) {
      l.category_id = gts[l.gt_index]->category_id;
    } else {
      l.category_id = kBackground;
    }
  }
  return labels;
}

std::vector<int> sample_minibatch(const std::vector<ProposalLabel>& labels, int size,
                                  double positive_fraction, std::uint64_t seed) {
  if (size < 4) throw Error("sample_minibatch: batch size must be at least 4");
  if (labels.empty()) throw Error("sample_minibatch: no proposals");
  std::vector<int> pos, neg;
  for (size_t i = 0; i < labels.size(); ++i) {
    (labels[i].category_id == kBackground ? neg : pos).push_back(static_cast<int>(i));
  }
  Rng rng(seed);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  const size_t max_pos = static_cast<size_t>(std::floor(size * positive_fraction));
  const size_t n_pos = std::min(pos.size(), max_pos);
  const size_t n_neg = std::min(neg.size(), static_cast<size_t>(size) - n_pos);
  std::vector<int> batch(pos.begin(), pos.begin() + static_cast<long>(n_pos));
  batch.insert(batch.end(), neg.begin(), neg.begin() + static_cast<long>(n_neg));
  std::sort(batch.begin(), batch.end());
  return batch;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "features");
  save_annotations(data.scenes, dir / "annotations.json");
  nlohmann::json props = nlohmann::json::array();
  for (size_t i = 0; i < data.scenes.images.size(); ++i) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : data.proposals[i]) boxes.push_back({b.x, b.y, b.w, b.h});
    props.push_back({{"image_id", data.scenes.images[i].id}, {"boxes", std::move(boxes)}});
  }
  nlohmann::json planted = nlohmann::json::array();
  for (const auto& [addon, anchor] : data.planted_anchor) planted.push_back({addon, anchor});
  write_file_atomic(dir / "proposals.json",
                    nlohmann::json{{"proposals", std::move(props)}, {"planted", std::move(planted)}}.dump() + "\n");
  for (size_t i = 0; i < data.scenes.images.size(); ++i) {
    save_feature_map(data.features[i], dir / "features" / (std::to_string(data.scenes.images[i].id) + ".bin"));
  }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset data;
  data.scenes = load_annotations(dir / "annotations.json");
  nlohmann::json props;
  try {
    props = nlohmann::json::parse(read_file(dir / "proposals.json"));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("proposals", e.what());
  }
  data.proposals.resize(data.scenes.images.size());
  const auto& list = array_field(props, "proposals", "");
  for (size_t i = 0; i < list.size(); ++i) {
    const std::string where = "proposals[" + std::to_string(i) + "]";
    const size_t idx = data.scenes.image_index(int_field(list[i], "image_id", where));
    for (const auto& b : array_field(list[i], "boxes", where)) {
      if (!b.is_array() || b.size() != 4) throw SchemaError(where + ".boxes", "expected [x, y, w, h]");
      data.proposals[idx].push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()});
    }
  }
  if (props.contains("planted")) {
    for (const auto& p : props.at("planted")) data.planted_anchor[p.at(0).get<int>()] = p.at(1).get<int>();
  }
  for (const auto& im : data.scenes.images) {
    data.features.push_back(load_feature_map(dir / "features" / (std::to_string(im.id) + ".bin")));
  }
  return data;
}

void inject_gt_proposals(Dataset& data) {
  for (size_t i = 0; i < data.scenes.images.size(); ++i) {
    for (size_t idx : data.scenes.annotation_indices(data.scenes.images[i].id)) {
      data.proposals[i].push_back(data.scenes.annotations[idx].bbox);
    }
  }
}

}  // namespace ctxdet
