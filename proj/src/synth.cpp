#include "ctxdet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "ctxdet/error.hpp"
#include "ctxdet/rng.hpp"

namespace ctxdet {

std::vector<PlantedCategory> SynthConfig::default_planted() {
  PlantedCategory bat;
  bat.name = "baseball bat";
  bat.supercategory = "sports";
  bat.person_anchored = true;
  bat.is_addon = true;
  bat.presence = 0.6;
  bat.offset_mean = {1.0, 0.15, std::log(0.42), std::log(0.21)};
  bat.offset_std = {0.15, 0.08, 0.1, 0.1};

  PlantedCategory backpack = bat;
  backpack.name = "backpack";
  backpack.supercategory = "accessory";
  backpack.presence = 0.5;
  backpack.offset_mean = {-1.0, -0.15, std::log(0.42), std::log(0.21)};

  PlantedCategory mouse;
  mouse.name = "mouse";
  mouse.supercategory = "electronic";
  mouse.person_anchored = false;
  mouse.is_addon = false;
  mouse.presence = 0.7;
  mouse.offset_mean = {1.0, 0.35, std::log(0.24), std::log(0.33)};
  mouse.offset_std = {0.12, 0.12, 0.1, 0.1};
  return {bat, backpack, mouse};
}

int SynthConfig::channels() const {
  const auto person_anchored =
      std::count_if(planted.begin(), planted.end(), [](const PlantedCategory& p) { return p.person_anchored; });
  return 2 + static_cast<int>(person_anchored) + 1 + static_cast<int>(planted.size());
}

nlohmann::json synth_config_to_json(const SynthConfig& c) {
  nlohmann::json planted = nlohmann::json::array();
  for (const auto& p : c.planted) {
    planted.push_back({{"name", p.name},
                       {"supercategory", p.supercategory},
                       {"person_anchored", p.person_anchored},
                       {"is_addon", p.is_addon},
                       {"presence", p.presence},
                       {"offset_mean", p.offset_mean},
                       {"offset_std", p.offset_std}});
  }
  return {{"image_width", c.image_width},
          {"image_height", c.image_height},
          {"stride", c.stride},
          {"ambiguity", c.ambiguity},
          {"scenes", c.scenes},
          {"seed", c.seed},
          {"min_people", c.min_people},
          {"max_people", c.max_people},
          {"person_width", c.person_width},
          {"person_aspect", c.person_aspect},
          {"scene_anchor_name", c.scene_anchor_name},
          {"scene_anchor_supercategory", c.scene_anchor_supercategory},
          {"scene_anchor_probability", c.scene_anchor_probability},
          {"scene_anchor_width", c.scene_anchor_width},
          {"scene_anchor_aspect", c.scene_anchor_aspect},
          {"min_distractors", c.min_distractors},
          {"max_distractors", c.max_distractors},
          {"distractor_size", c.distractor_size},
          {"noise_std", c.noise_std},
          {"imprint", c.imprint},
          {"jitters_per_object", c.jitters_per_object},
          {"jitter_sigma", c.jitter_sigma},
          {"random_proposals", c.random_proposals},
          {"planted", std::move(planted)}};
}

namespace {
template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  try {
    read_opt(j, "image_width", c.image_width);
    read_opt(j, "image_height", c.image_height);
    read_opt(j, "stride", c.stride);
    read_opt(j, "ambiguity", c.ambiguity);
    read_opt(j, "scenes", c.scenes);
    read_opt(j, "seed", c.seed);
    read_opt(j, "min_people", c.min_people);
    read_opt(j, "max_people", c.max_people);
    read_opt(j, "person_width", c.person_width);
    read_opt(j, "person_aspect", c.person_aspect);
    read_opt(j, "scene_anchor_name", c.scene_anchor_name);
    read_opt(j, "scene_anchor_supercategory", c.scene_anchor_supercategory);
    read_opt(j, "scene_anchor_probability", c.scene_anchor_probability);
    read_opt(j, "scene_anchor_width", c.scene_anchor_width);
    read_opt(j, "scene_anchor_aspect", c.scene_anchor_aspect);
    read_opt(j, "min_distractors", c.min_distractors);
    read_opt(j, "max_distractors", c.max_distractors);
    read_opt(j, "distractor_size", c.distractor_size);
    read_opt(j, "noise_std", c.noise_std);
    read_opt(j, "imprint", c.imprint);
    read_opt(j, "jitters_per_object", c.jitters_per_object);
    read_opt(j, "jitter_sigma", c.jitter_sigma);
    read_opt(j, "random_proposals", c.random_proposals);
    if (j.contains("planted")) {
      c.planted.clear();
      for (const auto& p : j.at("planted")) {
        PlantedCategory pc;
        pc.name = p.at("name").get<std::string>();
        pc.supercategory = p.at("supercategory").get<std::string>();
        pc.person_anchored = p.at("person_anchored").get<bool>();
        pc.is_addon = p.at("is_addon").get<bool>();
        pc.presence = p.at("presence").get<double>();
        pc.offset_mean = p.at("offset_mean").get<std::array<double, 4>>();
        pc.offset_std = p.at("offset_std").get<std::array<double, 4>>();
        c.planted.push_back(std::move(pc));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  if (c.ambiguity < 0.0 || c.ambiguity > 1.0) throw ConfigError("synth config: ambiguity must be in [0, 1]");
  if (c.stride <= 0 || c.image_width % c.stride || c.image_height % c.stride) {
    throw ConfigError("synth config: image dims must be positive multiples of the stride");
  }
  if (c.min_people < 0 || c.max_people < c.min_people) throw ConfigError("synth config: bad people range");
  return c;
}

std::vector<CategoryDef> synth_categories(const SynthConfig& cfg) {
  std::vector<CategoryDef> cats;
  cats.push_back({1, "person", "person", true, false});
  cats.push_back({2, cfg.scene_anchor_name, cfg.scene_anchor_supercategory, false, false});
  int id = 3;
  for (const auto& p : cfg.planted) cats.push_back({id++, p.name, p.supercategory, false, p.is_addon});
  return cats;
}

namespace {

struct SceneObject {
  int category_id = 0;  // 0 for distractors
  BoundingBox box;
  std::vector<double> pattern;
  int anchor_local = -1;  // index of the anchor object within the scene
};

double truncated_normal(Rng& rng, double mean, double sd) {
  std::normal_distribution<double> n(0.0, 1.0);
  double z;
  do {
    z = n(rng);
  } while (std::abs(z) > 3.0);
  return mean + sd * z;
}

bool overlaps_any(const BoundingBox& b, const std::vector<SceneObject>& objs, double gap) {
  const BoundingBox grown{b.x - gap, b.y - gap, b.w + 2 * gap, b.h + 2 * gap};
  return std::any_of(objs.begin(), objs.end(),
                     [&](const SceneObject& o) { return intersection_area(grown, o.box) > 0.0; });
}

BinaryMask ellipse_mask(const BoundingBox& b, const ImageSize& img) {
  BinaryMask m;
  m.bounds = img;
  const double rx = 0.5 * b.w;
  const double ry = 0.5 * b.h;
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x)));
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y)));
  const int x1 = std::min(img.width, static_cast<int>(std::ceil(b.x2())));
  const int y1 = std::min(img.height, static_cast<int>(std::ceil(b.y2())));
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const double u = (x + 0.5 - b.cx()) / rx;
      const double v = (y + 0.5 - b.cy()) / ry;
      if (u * u + v * v <= 1.0) m.points.push_back({x, y});
    }
  }
  if (m.points.empty()) {
    m.points.push_back({std::clamp(static_cast<int>(b.cx()), 0, img.width - 1),
                        std::clamp(static_cast<int>(b.cy()), 0, img.height - 1)});
  }
  return m;
}

BoundingBox jitter(const BoundingBox& b, double sigma, const ImageSize& img, Rng& rng) {
  std::normal_distribution<double> n(0.0, sigma);
  const double cx = b.cx() + n(rng) * b.w;
  const double cy = b.cy() + n(rng) * b.h;
  const double w = std::max(2.0, b.w * (1.0 + n(rng)));
  const double h = std::max(2.0, b.h * (1.0 + n(rng)));
  return clip_box(BoundingBox::from_center(cx, cy, w, h), img);
}

struct ChannelLayout {
  int person = 0;
  int anchor = 1;
  std::vector<int> pose;      // per planted category, -1 if scene-anchored
  int clutter = 0;
  std::vector<int> identity;  // per planted category
};

ChannelLayout layout_for(const SynthConfig& cfg) {
  ChannelLayout l;
  int next = 2;
  for (const auto& p : cfg.planted) l.pose.push_back(p.person_anchored ? next++ : -1);
  l.clutter = next++;
  for (size_t i = 0; i < cfg.planted.size(); ++i) l.identity.push_back(next++);
  return l;
}

// Places an anchor and its planted objects as one rigid group.
bool place_group(std::vector<SceneObject>& objs, std::vector<SceneObject> group, const ImageSize& img, Rng& rng) {
  double minx = 1e300, miny = 1e300, maxx = -1e300, maxy = -1e300;
  for (const auto& o : group) {
    minx = std::min(minx, o.box.x);
    miny = std::min(miny, o.box.y);
    maxx = std::max(maxx, o.box.x2());
    maxy = std::max(maxy, o.box.y2());
  }
  const double ew = maxx - minx;
  const double eh = maxy - miny;
  if (ew >= img.width || eh >= img.height) return false;
  std::uniform_real_distribution<double> ux(0.0, img.width - ew);
  std::uniform_real_distribution<double> uy(0.0, img.height - eh);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double sx = ux(rng) - minx;
    const double sy = uy(rng) - miny;
    bool ok = true;
    for (const auto& o : group) {
      const BoundingBox moved{o.box.x + sx, o.box.y + sy, o.box.w, o.box.h};
      if (overlaps_any(moved, objs, 2.0)) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    const int base = static_cast<int>(objs.size());
    for (auto& o : group) {
      o.box.x += sx;
      o.box.y += sy;
      if (o.anchor_local >= 0) o.anchor_local += base;
      objs.push_back(std::move(o));
    }
    return true;
  }
  return false;
}

struct GeneratedScene {
  std::vector<Annotation> annotations;
  FeatureMap features;
  std::vector<BoundingBox> proposals;
  std::vector<std::pair<int, int>> planted;  // (object ann id, anchor ann id)
};

GeneratedScene generate_scene(const SynthConfig& cfg, int index, const ChannelLayout& layout) {
  const ImageSize img{cfg.image_width, cfg.image_height};
  const int image_id = index + 1;
  const int C = cfg.channels();
  Rng rng = make_rng(cfg.seed, "synth/scene/" + std::to_string(index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<SceneObject> objs;
  auto planted_pattern = [&](size_t k) {
    std::vector<double> p(C, 0.0);
    p[layout.identity[k]] += (1.0 - cfg.ambiguity) * cfg.imprint;
    p[layout.clutter] += cfg.ambiguity * cfg.imprint;
    return p;
  };
  auto make_group = [&](bool person, int category_id, double width, double aspect, int anchor_channel) {
    std::vector<SceneObject> group;
    SceneObject anchor;
    anchor.category_id = category_id;
    anchor.box = {0.0, 0.0, width, width * aspect};
    anchor.pattern.assign(C, 0.0);
    anchor.pattern[anchor_channel] = cfg.imprint;
    group.push_back(anchor);
    for (size_t k = 0; k < cfg.planted.size(); ++k) {
      const PlantedCategory& pc = cfg.planted[k];
      if (pc.person_anchored != person) continue;
      if (unit(rng) >= pc.presence) continue;
      std::array<double, 4> off;
      for (int d = 0; d < 4; ++d) off[d] = truncated_normal(rng, pc.offset_mean[d], pc.offset_std[d]);
      SceneObject o;
      o.category_id = 3 + static_cast<int>(k);
      o.box = decode_addon(group[0].box, AddOnOffset::from_array(off));
      o.pattern = planted_pattern(k);
      o.anchor_local = 0;
      group.push_back(std::move(o));
      if (person) group[0].pattern[layout.pose[k]] += cfg.imprint;
    }
    return group;
  };

  std::uniform_int_distribution<int> n_people(cfg.min_people, cfg.max_people);
  const int people = n_people(rng);
  std::uniform_real_distribution<double> pw(cfg.person_width[0], cfg.person_width[1]);
  for (int p = 0; p < people; ++p) {
    place_group(objs, make_group(true, 1, pw(rng), cfg.person_aspect, layout.person), img, rng);
  }
  if (unit(rng) < cfg.scene_anchor_probability) {
    std::uniform_real_distribution<double> aw(cfg.scene_anchor_width[0], cfg.scene_anchor_width[1]);
    place_group(objs, make_group(false, 2, aw(rng), cfg.scene_anchor_aspect, layout.anchor), img, rng);
  }
  std::uniform_int_distribution<int> n_distr(cfg.min_distractors, cfg.max_distractors);
  const int distractors = n_distr(rng);
  std::uniform_real_distribution<double> ds(cfg.distractor_size[0], cfg.distractor_size[1]);
  for (int d = 0; d < distractors; ++d) {
    SceneObject o;
    o.box = {0.0, 0.0, ds(rng), ds(rng)};
    o.pattern.assign(C, 0.0);
    o.pattern[layout.clutter] = cfg.imprint;
    place_group(objs, {o}, img, rng);
  }

  GeneratedScene scene;
  const int fh = cfg.image_height / cfg.stride;
  const int fw = cfg.image_width / cfg.stride;
  scene.features = FeatureMap(C, fh, fw, cfg.stride);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(cfg.noise_std));
  for (float& v : scene.features.data) v = noise(rng);
  for (const auto& o : objs) {
    for (int y = 0; y < fh; ++y) {
      const double py = (y + 0.5) * cfg.stride;
      if (py < o.box.y || py >= o.box.y2()) continue;
      for (int x = 0; x < fw; ++x) {
        const double px = (x + 0.5) * cfg.stride;
        if (px < o.box.x || px >= o.box.x2()) continue;
        for (int c = 0; c < C; ++c) scene.features.at(c, y, x) += static_cast<float>(o.pattern[c]);
      }
    }
  }

  std::vector<int> ann_id(objs.size(), -1);
  int k = 0;
  for (size_t i = 0; i < objs.size(); ++i) {
    if (objs[i].category_id == 0) continue;
    Annotation a;
    a.id = image_id * 1000 + k++;
    ann_id[i] = a.id;
    a.image_id = image_id;
    a.category_id = objs[i].category_id;
    a.bbox = objs[i].box;
    a.mask = ellipse_mask(objs[i].box, img);
    scene.annotations.push_back(std::move(a));
  }
  for (size_t i = 0; i < objs.size(); ++i) {
    if (objs[i].anchor_local >= 0) scene.planted.emplace_back(ann_id[i], ann_id[objs[i].anchor_local]);
  }

  for (const auto& o : objs) {
    for (int j = 0; j < cfg.jitters_per_object; ++j) scene.proposals.push_back(jitter(o.box, cfg.jitter_sigma, img, rng));
  }
  std::uniform_real_distribution<double> log_size(std::log(8.0), std::log(64.0));
  std::uniform_real_distribution<double> log_aspect(-0.5, 0.5);
  std::uniform_real_distribution<double> cxd(0.0, cfg.image_width);
  std::uniform_real_distribution<double> cyd(0.0, cfg.image_height);
  for (int j = 0; j < cfg.random_proposals; ++j) {
    const double w = std::exp(log_size(rng));
    const double h = w * std::exp(log_aspect(rng));
    scene.proposals.push_back(clip_box(BoundingBox::from_center(cxd(rng), cyd(rng), w, h), img));
  }
  return scene;
}

}  // namespace

Dataset synth_generate(const SynthConfig& cfg) {
  if (cfg.scenes < 0) throw ConfigError("synth config: scenes must be non-negative");
  const ChannelLayout layout = layout_for(cfg);
  Dataset data;
  data.scenes.categories = synth_categories(cfg);
  data.features.reserve(cfg.scenes);
  data.proposals.reserve(cfg.scenes);
  for (int i = 0; i < cfg.scenes; ++i) {
    GeneratedScene s = generate_scene(cfg, i, layout);
    data.scenes.images.push_back({i + 1, cfg.image_width, cfg.image_height});
    for (auto& a : s.annotations) data.scenes.annotations.push_back(std::move(a));
    data.features.push_back(std::move(s.features));
    data.proposals.push_back(std::move(s.proposals));
    for (const auto& [obj, anchor] : s.planted) data.planted_anchor[obj] = anchor;
  }
  data.scenes.reindex();
  return data;
}

}  // namespace ctxdet
