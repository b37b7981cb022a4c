#include "ctxdet/pipeline.hpp"

#include <algorithm>
#include <memory>
#include <set>

#include "ctxdet/error.hpp"
#include "ctxdet/io.hpp"
#include "ctxdet/rng.hpp"

namespace ctxdet {

namespace {

SceneVariant to_scene(Variant v) {
  switch (v) {
    case Variant::Full: return SceneVariant::Full;
    case Variant::Coarse: return SceneVariant::Coarse;
    case Variant::Linear: return SceneVariant::Linear;
    case Variant::GlobalOnly: return SceneVariant::GlobalOnly;
    case Variant::Neighborhood: return SceneVariant::Neighborhood;
    case Variant::NoContext:
    case Variant::Person: break;
  }
  return SceneVariant::NoContext;
}

bool scene_branch(Variant v) { return has_scene_branch(to_scene(v)) && v != Variant::Person; }

std::vector<int> category_ids(const SceneSet& s) {
  std::vector<int> ids;
  for (const auto& c : s.categories) ids.push_back(c.id);
  return ids;
}

std::vector<int> addon_ids_of(const SceneSet& s) {
  std::vector<int> ids;
  for (const auto& c : s.categories)
    if (c.is_addon) ids.push_back(c.id);
  return ids;
}

int pooled_dim(const Dataset& d, int grid) {
  if (d.features.empty()) throw Error("dataset has no images");
  return d.features[0].channels * grid * grid;
}

// Proposals only (no GT boxes), no labels.
PreparedImage proposal_image(const Dataset& d, size_t i, int grid) {
  return prepare_image(d.scenes.images[i].id, d.features[i], d.proposals[i], {}, grid);
}

ContextSet image_contexts(const RunConfig& c, Variant v, const ParamBundle& mil, const PreparedImage& plain) {
  const int t = v == Variant::GlobalOnly ? 0 : c.scene.top_t;
  return select_context_regions(plain.boxes, mil_region_probs(mil, plain.pooled), plain.size, t);
}

struct VariantInputs {
  std::vector<PreparedImage> images;
  SceneContextMap contexts;
  const RelationCodebook* codebook = nullptr;
};

void require(const void* p, const char* what) {
  if (!p) throw Error(std::string("missing artifact: ") + what);
}

VariantInputs variant_inputs(const RunConfig& c, Variant v, const Dataset& data, const Artifacts& a, bool training) {
  require(a.baseline, "baseline detector");
  const int grid = c.detector.grid;
  VariantInputs in;
  in.images = prepare_dataset(data, grid, training && c.context.add_gt_to_training);
  if (v == Variant::Neighborhood) {
    for (size_t i = 0; i < in.images.size(); ++i) {
      in.images[i].extra = neighborhood_features(*a.baseline, data.features[i], in.images[i].boxes, in.images[i].size, grid);
    }
  } else if (v == Variant::Person) {
    require(a.addon, "add-on head");
    const auto person = data.scenes.person_category();
    if (!person) throw Error("person context needs a person category");
    const std::vector<int> ids = addon_category_ids(*a.addon);
    for (size_t i = 0; i < in.images.size(); ++i) {
      const PreparedImage plain = proposal_image(data, i, grid);
      const auto preds = predict_people(*a.baseline, *a.addon, plain, data.features[i], c.detector, c.person, *person);
      attach_heatmap_features(in.images[i], preds, ids, c.person, data.features[i]);
    }
  } else if (scene_branch(v)) {
    require(a.mil, "MIL classifier");
    in.codebook = v == Variant::Coarse ? a.coarse_codebook : a.codebook;
    require(in.codebook, v == Variant::Coarse ? "coarse codebook" : "codebook");
    for (size_t i = 0; i < in.images.size(); ++i) {
      const PreparedImage plain = proposal_image(data, i, grid);
      in.contexts[plain.image_id] =
          build_image_context(*a.baseline, data.features[i], image_contexts(c, v, *a.mil, plain), grid);
    }
  }
  return in;
}

std::unique_ptr<SceneContextBranch> make_branch(const RunConfig& c, Variant v, const VariantInputs& in) {
  if (!scene_branch(v)) return nullptr;
  return std::make_unique<SceneContextBranch>(*in.codebook, in.contexts, is_linear(to_scene(v)), c.scene.d1,
                                              c.scene.d2);
}

template <typename T, typename F>
void read_section(const nlohmann::json& j, const char* key, T& target, F&& convert) {
  if (j.contains(key)) target = convert(j.at(key), target);
}

}  // namespace

Variant parse_variant(const std::string& name) {
  if (name == "person") return Variant::Person;
  switch (parse_scene_variant(name)) {
    case SceneVariant::Full: return Variant::Full;
    case SceneVariant::Coarse: return Variant::Coarse;
    case SceneVariant::Linear: return Variant::Linear;
    case SceneVariant::GlobalOnly: return Variant::GlobalOnly;
    case SceneVariant::Neighborhood: return Variant::Neighborhood;
    case SceneVariant::NoContext: return Variant::NoContext;
  }
  throw ConfigError("unknown variant '" + name + "'");
}

std::string variant_name(Variant v) { return v == Variant::Person ? "person" : scene_variant_name(to_scene(v)); }

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::Full,         Variant::Coarse,    Variant::Linear, Variant::GlobalOnly,
                                      Variant::Neighborhood, Variant::NoContext, Variant::Person};
  return v;
}

DetectorConfig RunConfig::default_context_detector() {
  DetectorConfig d;
  d.protocol = TrainProtocol::Reweighted;
  d.train_trunk = false;
  d.epochs = 12;
  d.lr = 0.02;
  return d;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"variant", variant_name(c.variant)},
          {"inject_gt_proposals", c.inject_gt_proposals},
          {"paths",
           {{"out", c.out.string()},
            {"data_dir", c.data_dir.string()},
            {"model_dir", c.model_dir.string()},
            {"detections", c.detections.string()}}},
          {"synth", synth_config_to_json(c.synth)},
          {"test_scenes", c.test_scenes},
          {"detector", detector_config_to_json(c.detector)},
          {"context_detector", detector_config_to_json(c.context)},
          {"addon", addon_config_to_json(c.addon)},
          {"person", person_context_config_to_json(c.person)},
          {"mil", mil_config_to_json(c.mil)},
          {"scene", scene_head_config_to_json(c.scene)},
          {"attach_min_score", c.attach_min_score},
          {"trace_images", c.trace_images}};
}

RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known{"seed",    "variant", "inject_gt_proposals", "paths", "synth",
                                           "test_scenes", "detector", "context_detector", "addon", "person",
                                           "mil",     "scene",   "attach_min_score",    "trace_images"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  try {
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    if (j.contains("inject_gt_proposals")) c.inject_gt_proposals = j.at("inject_gt_proposals").get<bool>();
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      if (p.contains("out")) c.out = p.at("out").get<std::string>();
      if (p.contains("data_dir")) c.data_dir = p.at("data_dir").get<std::string>();
      if (p.contains("model_dir")) c.model_dir = p.at("model_dir").get<std::string>();
      if (p.contains("detections")) c.detections = p.at("detections").get<std::string>();
    }
    if (j.contains("synth")) {
      nlohmann::json merged = synth_config_to_json(c.synth);
      merged.update(j.at("synth"));
      c.synth = synth_config_from_json(merged);
    }
    if (j.contains("test_scenes")) c.test_scenes = j.at("test_scenes").get<int>();
    if (j.contains("attach_min_score")) c.attach_min_score = j.at("attach_min_score").get<double>();
    if (j.contains("trace_images")) c.trace_images = j.at("trace_images").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const SchemaError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  read_section(j, "detector", c.detector, detector_config_from_json);
  read_section(j, "context_detector", c.context, detector_config_from_json);
  read_section(j, "addon", c.addon, addon_config_from_json);
  read_section(j, "person", c.person, person_context_config_from_json);
  read_section(j, "mil", c.mil, mil_config_from_json);
  read_section(j, "scene", c.scene, scene_head_config_from_json);
  if (c.test_scenes < 1 || c.synth.scenes < 1) throw ConfigError("config: scene counts must be positive");
  if (c.trace_images < 0) throw ConfigError("config: trace_images must be >= 0");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::uint64_t module_seed(const RunConfig& c, const std::string& stream) { return derive_seed(c.seed, stream); }

Dataset generate_split(const RunConfig& c, bool test) {
  SynthConfig s = c.synth;
  s.seed = module_seed(c, test ? "synth/test" : "synth/train");
  if (test) s.scenes = c.test_scenes;
  return synth_generate(s);
}

ParamBundle train_baseline(const RunConfig& c, const Dataset& train) {
  DetectorConfig cfg = c.detector;
  cfg.seed = module_seed(c, "detector/train");
  const auto images = prepare_dataset(train, cfg.grid, cfg.add_gt_to_training);
  ParamBundle p = init_detector(pooled_dim(train, cfg.grid), cfg.hidden, 0, 0, category_ids(train.scenes),
                                module_seed(c, "detector/init"));
  p.variant = "baseline";
  train_detector(p, images, nullptr, cfg);
  return p;
}

ParamBundle train_mil_model(const RunConfig& c, const Dataset& train, const ParamBundle& baseline) {
  const int grid = c.detector.grid;
  if (c.mil.hidden != baseline.layer("fc7").out_dim()) throw ConfigError("mil.hidden must equal detector.hidden");
  const std::vector<int> ids = category_ids(train.scenes);
  ParamBundle mil = init_mil(pooled_dim(train, grid), c.mil.hidden, ids, module_seed(c, "mil/init"));
  transfer_weights(baseline, mil);
  std::vector<PreparedImage> plain;
  for (size_t i = 0; i < train.scenes.images.size(); ++i) plain.push_back(proposal_image(train, i, grid));
  MILTrainConfig cfg = c.mil;
  cfg.seed = module_seed(c, "mil/train");
  train_mil(mil, mil_bags(train, plain, ids), cfg);
  mil.meta["grid"] = grid;
  return mil;
}

RelationCodebook fit_codebook(const RunConfig& c, const Dataset& train, const ParamBundle& mil, bool coarse) {
  const int grid = c.detector.grid;
  const size_t n = std::min(train.scenes.images.size(), static_cast<size_t>(c.scene.codebook_scenes));
  std::vector<PreparedImage> plain;
  std::vector<ContextSet> sets;
  for (size_t i = 0; i < n; ++i) {
    plain.push_back(proposal_image(train, i, grid));
    sets.push_back(image_contexts(c, Variant::Full, mil, plain.back()));
  }
  const std::uint64_t seed = module_seed(c, coarse ? "codebook/coarse" : "codebook/full");
  const auto pairs = codebook_pairs(sets, plain, c.scene.codebook_pairs, seed);
  std::vector<double> thresholds = kOverlapThresholds;
  if (coarse && !c.scene.coarse_overlaps) thresholds.clear();
  RelationCodebook cb = fit_relation_codebook(pairs, coarse ? c.scene.coarse_clusters : c.scene.clusters, seed, thresholds);
  cb.provenance["scenes"] = n;
  cb.provenance["top_t"] = c.scene.top_t;
  cb.provenance["coarse"] = coarse;
  return cb;
}

ParamBundle train_addon_model(const RunConfig& c, const Dataset& train) {
  const std::vector<int> ids = addon_ids_of(train.scenes);
  if (ids.empty()) throw Error("training set has no add-on categories");
  AddOnTrainConfig cfg = c.addon;
  cfg.seed = module_seed(c, "addon/train");
  ParamBundle head = init_addon_head(pooled_dim(train, cfg.grid), cfg.hidden, ids, module_seed(c, "addon/init"));
  train_addon_head(head, train, addon_examples(train, ids), cfg);
  return head;
}

bool needs_mil(Variant v) { return scene_branch(v); }
bool needs_codebook(Variant v) { return scene_branch(v) && v != Variant::Coarse; }
bool needs_coarse_codebook(Variant v) { return v == Variant::Coarse; }
bool needs_addon(Variant v) { return v == Variant::Person; }

ParamBundle train_variant(const RunConfig& c, Variant v, const Dataset& train, const Artifacts& a) {
  VariantInputs in = variant_inputs(c, v, train, a, true);
  const int extra = in.images.empty() ? 0 : static_cast<int>(in.images[0].extra.cols());
  const int branch_dim = scene_branch(v) ? scene_branch_dim(to_scene(v), c.scene) : 0;
  const std::string name = variant_name(v);
  ParamBundle m = init_detector(pooled_dim(train, c.detector.grid), a.baseline->layer("fc7").out_dim(), extra,
                                branch_dim, detector_class_ids(*a.baseline), module_seed(c, "variant/init/" + name));
  if (scene_branch(v)) {
    add_scene_layers(m, in.codebook->size(), a.baseline->layer("fc7").out_dim(), is_linear(to_scene(v)), c.scene,
                     module_seed(c, "variant/scene/" + name));
    m.meta["scene"] = scene_head_config_to_json(c.scene);
  }
  if (v == Variant::Person) m.meta["person"] = person_context_config_to_json(c.person);
  transfer_weights(*a.baseline, m);
  m.variant = name;
  m.meta["variant"] = name;
  auto branch = make_branch(c, v, in);
  DetectorConfig cfg = c.context;
  cfg.seed = module_seed(c, "variant/train/" + name);
  train_detector(m, in.images, branch.get(), cfg);
  return m;
}

DetectionSet run_variant(const RunConfig& c, Variant v, const ParamBundle& model, const Dataset& test,
                         const Artifacts& a) {
  VariantInputs in = variant_inputs(c, v, test, a, false);
  auto branch = make_branch(c, v, in);
  DetectionSet out;
  for (const auto& im : in.images) {
    const DetectionSet d = detect(model, im, branch.get(), c.detector);
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

std::vector<AttachmentRecord> attach_addons(const RunConfig& c, const DetectionSet& dets, const Dataset& test,
                                            const Artifacts& a) {
  require(a.baseline, "baseline detector");
  require(a.addon, "add-on head");
  const auto person = test.scenes.person_category();
  if (!person) throw Error("attachment needs a person category");
  const std::vector<int> ids = addon_category_ids(*a.addon);
  std::vector<AttachmentRecord> out;
  for (size_t i = 0; i < test.scenes.images.size(); ++i) {
    const int image_id = test.scenes.images[i].id;
    DetectionSet addon_dets;
    for (const auto& d : dets) {
      if (d.image_id == image_id && d.score >= c.attach_min_score &&
          std::find(ids.begin(), ids.end(), d.category_id) != ids.end()) {
        addon_dets.push_back(d);
      }
    }
    if (addon_dets.empty()) continue;
    const PreparedImage plain = proposal_image(test, i, c.detector.grid);
    const auto preds = predict_people(*a.baseline, *a.addon, plain, test.features[i], c.detector, c.person, *person);
    for (const auto& pair : infer_attachments(addon_dets, preds, ids, c.person.heatmap)) {
      const Detection& d = addon_dets[pair.detection];
      out.push_back({image_id, d.category_id, d.box, preds[pair.person].person, pair.heatmap_value});
    }
  }
  return out;
}

std::vector<ScoreTrace> trace_scores(const RunConfig& c, const ParamBundle& model, const Dataset& test,
                                     const Artifacts& a) {
  if (!model.meta.value("linear", false)) throw Error("score-trace needs a linear variant model");
  VariantInputs in = variant_inputs(c, Variant::Linear, test, a, false);
  auto branch = make_branch(c, Variant::Linear, in);
  std::vector<ScoreTrace> out;
  const size_t n = std::min(in.images.size(), static_cast<size_t>(c.trace_images));
  for (size_t i = 0; i < n; ++i) {
    const PreparedImage& im = in.images[i];
    if (im.boxes.empty()) continue;
    std::vector<int> rows(im.boxes.size());
    for (size_t r = 0; r < rows.size(); ++r) rows[r] = static_cast<int>(r);
    const DetectorOutput o = detector_forward(model, im, rows, branch.get());
    Eigen::Index best_row = 0, best_col = 0;
    o.probs.rightCols(o.probs.cols() - 1).maxCoeff(&best_row, &best_col);
    out.push_back({im.image_id, im.boxes[static_cast<size_t>(best_row)],
                   score_evolution(model, *in.codebook, in.contexts.at(im.image_id), im, static_cast<int>(best_row))});
  }
  return out;
}

std::string eval_tag(const RunConfig& c, Variant v) {
  return variant_name(v) + (c.inject_gt_proposals ? "_gtprop" : "");
}

std::filesystem::path train_dir(const RunConfig& c) { return c.data_path() / "train"; }
std::filesystem::path test_dir(const RunConfig& c) { return c.data_path() / "test"; }
std::filesystem::path baseline_file(const RunConfig& c) { return c.model_path() / "detector_baseline.json"; }
std::filesystem::path mil_file(const RunConfig& c) { return c.model_path() / "mil.json"; }
std::filesystem::path addon_file(const RunConfig& c) { return c.model_path() / "addon.json"; }
std::filesystem::path codebook_file(const RunConfig& c, bool coarse) {
  return c.model_path() / (coarse ? "codebook_coarse.json" : "codebook.json");
}
std::filesystem::path detector_file(const RunConfig& c, Variant v) {
  return c.model_path() / ("detector_" + variant_name(v) + ".json");
}
std::filesystem::path detections_file(const RunConfig& c, Variant v) {
  return c.out / ("detections_" + eval_tag(c, v) + ".csv");
}
std::filesystem::path report_file(const RunConfig& c, Variant v) { return c.out / ("report_" + eval_tag(c, v) + ".csv"); }
std::filesystem::path diagnosis_file(const RunConfig& c, Variant v) {
  return c.out / ("diagnosis_" + eval_tag(c, v) + ".json");
}
std::filesystem::path attachments_file(const RunConfig& c) { return c.out / "attachments.csv"; }
std::filesystem::path score_trace_file(const RunConfig& c) { return c.out / "score_trace.csv"; }

Dataset load_test_split(const RunConfig& c) {
  Dataset d = load_dataset(test_dir(c));
  if (c.inject_gt_proposals) inject_gt_proposals(d);
  return d;
}

}  // namespace ctxdet
