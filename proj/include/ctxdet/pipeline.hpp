#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ctxdet/detector.hpp"
#include "ctxdet/eval.hpp"
#include "ctxdet/person_context.hpp"
#include "ctxdet/scene_context.hpp"
#include "ctxdet/synth.hpp"

namespace ctxdet {

enum class Variant { Full, Coarse, Linear, GlobalOnly, Neighborhood, NoContext, Person };

Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);
const std::vector<Variant>& all_variants();

// Everything a run needs. Module seeds are derived from `seed`; per-module
// "seed" keys in a config file are ignored.
struct RunConfig {
  std::filesystem::path out = ".";
  std::filesystem::path data_dir;    // empty: out
  std::filesystem::path model_dir;   // empty: out
  std::filesystem::path detections;  // eval: score this file instead of running inference
  std::uint64_t seed = 0;
  Variant variant = Variant::NoContext;
  bool inject_gt_proposals = false;

  SynthConfig synth;  // synth.scenes = training scenes
  int test_scenes = 150;
  DetectorConfig detector;
  DetectorConfig context = default_context_detector();
  AddOnTrainConfig addon;
  PersonContextConfig person;
  MILTrainConfig mil;
  SceneHeadConfig scene;
  double attach_min_score = 0.5;
  int trace_images = 5;

  std::filesystem::path data_path() const { return data_dir.empty() ? out : data_dir; }
  std::filesystem::path model_path() const { return model_dir.empty() ? out : model_dir; }

  static DetectorConfig default_context_detector();
};

nlohmann::json run_config_to_json(const RunConfig& c);
// Throws ConfigError on unknown keys or bad values.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path);

// Module seeds for a run seed.
std::uint64_t module_seed(const RunConfig& c, const std::string& stream);

Dataset generate_split(const RunConfig& c, bool test);

// The models a variant depends on; unused entries may be null.
struct Artifacts {
  const ParamBundle* baseline = nullptr;
  const ParamBundle* mil = nullptr;
  const ParamBundle* addon = nullptr;
  const RelationCodebook* codebook = nullptr;
  const RelationCodebook* coarse_codebook = nullptr;
};

ParamBundle train_baseline(const RunConfig& c, const Dataset& train);
ParamBundle train_mil_model(const RunConfig& c, const Dataset& train, const ParamBundle& baseline);
// Codebook over (context, proposal) pairs of the first training scenes.
RelationCodebook fit_codebook(const RunConfig& c, const Dataset& train, const ParamBundle& mil, bool coarse);
ParamBundle train_addon_model(const RunConfig& c, const Dataset& train);

// Which artifacts a variant needs.
bool needs_mil(Variant v);
bool needs_codebook(Variant v);
bool needs_coarse_codebook(Variant v);
bool needs_addon(Variant v);

// Context detector for a variant, fine-tuned from the baseline.
ParamBundle train_variant(const RunConfig& c, Variant v, const Dataset& train, const Artifacts& a);
DetectionSet run_variant(const RunConfig& c, Variant v, const ParamBundle& model, const Dataset& test,
                         const Artifacts& a);

// Add-on detections (score >= attach_min_score) paired with the person
// context predictions of their image.
std::vector<AttachmentRecord> attach_addons(const RunConfig& c, const DetectionSet& dets, const Dataset& test,
                                            const Artifacts& a);

// Score traces of the top-scoring proposal in each of the first
// trace_images test images; `model` must be a linear variant.
std::vector<ScoreTrace> trace_scores(const RunConfig& c, const ParamBundle& model, const Dataset& test,
                                     const Artifacts& a);

// Fixed artifact names inside the data and model directories. Eval outputs
// are tagged with the variant, plus "_gtprop" when GT proposals are injected.
std::string eval_tag(const RunConfig& c, Variant v);
std::filesystem::path train_dir(const RunConfig& c);
std::filesystem::path test_dir(const RunConfig& c);
std::filesystem::path baseline_file(const RunConfig& c);
std::filesystem::path mil_file(const RunConfig& c);
std::filesystem::path addon_file(const RunConfig& c);
std::filesystem::path codebook_file(const RunConfig& c, bool coarse);
std::filesystem::path detector_file(const RunConfig& c, Variant v);
std::filesystem::path detections_file(const RunConfig& c, Variant v);
std::filesystem::path report_file(const RunConfig& c, Variant v);
std::filesystem::path diagnosis_file(const RunConfig& c, Variant v);
std::filesystem::path attachments_file(const RunConfig& c);
std::filesystem::path score_trace_file(const RunConfig& c);

// Loads the test split, injecting GT proposals when configured.
Dataset load_test_split(const RunConfig& c);

}  // namespace ctxdet
