#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxdet/dataset.hpp"

namespace ctxdet {

// A small object placed relative to an anchor ("person" or the scene
// anchor). The offset is the encode_addon 4-tuple relative to the anchor,
// drawn from a Gaussian truncated at 3 sigma.
struct PlantedCategory {
  std::string name;
  std::string supercategory;
  bool person_anchored = true;   // otherwise anchored on the scene anchor
  bool is_addon = true;
  double presence = 0.6;         // probability per anchor
  std::array<double, 4> offset_mean{};
  std::array<double, 4> offset_std{};
};

// Desk-scale substitute for COCO: feature maps with per-category imprints,
// add-ons planted around anchors, and distractor blobs.
//
// Channel layout: 0 person body, 1 scene anchor, then one pose cue per
// person-anchored category (lit inside a person box when that person
// carries the object), then the clutter channel, then one identity channel
// per planted category. A planted object's imprint is
// (1 - ambiguity) * identity + ambiguity * clutter, so at ambiguity 1 it
// is indistinguishable from a distractor.
struct SynthConfig {
  int image_width = 128;
  int image_height = 128;
  int stride = 4;
  double ambiguity = 1.0;
  int scenes = 300;
  std::uint64_t seed = 0;

  int min_people = 1;
  int max_people = 2;
  std::array<double, 2> person_width{20.0, 28.0};
  double person_aspect = 2.0;  // h / w

  std::string scene_anchor_name = "tv";
  std::string scene_anchor_supercategory = "electronic";
  double scene_anchor_probability = 0.6;
  std::array<double, 2> scene_anchor_width{36.0, 48.0};
  double scene_anchor_aspect = 0.75;

  int min_distractors = 4;
  int max_distractors = 7;
  std::array<double, 2> distractor_size{8.0, 12.0};

  double noise_std = 0.25;
  double imprint = 1.0;

  int jitters_per_object = 4;
  double jitter_sigma = 0.1;  // fraction of box size
  int random_proposals = 30;

  std::vector<PlantedCategory> planted = default_planted();

  int channels() const;
  static std::vector<PlantedCategory> default_planted();
};

nlohmann::json synth_config_to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j);

// Category ids: 1 person, 2 scene anchor, 3.. planted in config order.
std::vector<CategoryDef> synth_categories(const SynthConfig& cfg);

// Scene i depends only on (cfg, i); image id is i + 1, annotation ids are
// image_id * 1000 + k.
Dataset synth_generate(const SynthConfig& cfg);

}  // namespace ctxdet
