#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxdet/dataset.hpp"
#include "ctxdet/detector.hpp"
#include "ctxdet/feature_map.hpp"
#include "ctxdet/nn.hpp"

namespace ctxdet {

inline constexpr double kPersonExpand = 1.2;

// Layers fc6, fc7 (tanh, shared by both steps), conf (sigmoid, one per
// add-on category), off1 (intermediate offsets from step 1) and off2
// (step-2 correction: l = l_hat + off2(trunk(pool(l_hat box)))).
ParamBundle init_addon_head(int input_dim, int hidden, const std::vector<int>& addon_ids, std::uint64_t seed);
std::vector<int> addon_category_ids(const ParamBundle& head);

struct PersonPrediction {
  BoundingBox person;
  double person_score = 1.0;
  std::vector<double> confidence;         // p_id per add-on category
  std::vector<AddOnOffset> intermediate;  // l_hat_id
  std::vector<AddOnOffset> refined;       // l_id
  std::vector<bool> fallback;             // step 2 pooled the person box instead
};

struct AddOnOptions {
  int grid = kDefaultRoiGrid;
  bool use_step2 = true;  // false: refined = intermediate
  // When non-empty, step 2 pools these boxes (one per category) instead of
  // the decoded l_hat boxes.
  std::vector<BoundingBox> step2_boxes;
};

// Boxes step 2 pools for `person`: decoded l_hat, clipped, falling back to
// the person box when degenerate.
std::vector<BoundingBox> step2_boxes(const ParamBundle& head, const FeatureMap& fm, const BoundingBox& person,
                                     const AddOnOptions& opt = {});

PersonPrediction predict_addons(const BoundingBox& person, double person_score, const FeatureMap& fm,
                                const ParamBundle& head, const AddOnOptions& opt = {});

// Training target for one person: y_id and, where y_id = 1, the add-on box.
struct AddOnTruth {
  std::vector<int> present;
  std::vector<BoundingBox> boxes;
};

struct AddOnExample {
  int image_index = 0;
  BoundingBox person;
  AddOnTruth truth;
};

// One example per non-ignored GT person, targets from build_attachments.
std::vector<AddOnExample> addon_examples(const Dataset& data, const std::vector<int>& addon_ids);

// For one person: sum over categories of nll(y, p) plus, when y = 1,
// componentwise Huber on (l* - l) and (l_hat* - l_hat).
double addon_loss(const ParamBundle& head, const FeatureMap& fm, const AddOnExample& ex, const AddOnOptions& opt,
                  ParamBundle* grads);

struct AddOnTrainConfig {
  int grid = kDefaultRoiGrid;
  int hidden = 64;
  int epochs = 30;
  double lr = 0.05;
  int batch = 8;
  std::uint64_t seed = 0;
};

nlohmann::json addon_config_to_json(const AddOnTrainConfig& c);
AddOnTrainConfig addon_config_from_json(const nlohmann::json& j, AddOnTrainConfig base = {});

struct AddOnTrainLog {
  std::vector<double> epoch_loss;
};

AddOnTrainLog train_addon_head(ParamBundle& head, const Dataset& data, const std::vector<AddOnExample>& examples,
                               const AddOnTrainConfig& cfg);

// Mean over present (person, add-on) pairs of the distance between the
// refined center and the true center, in units of person height.
double mean_center_error(const ParamBundle& head, const Dataset& data, const std::vector<AddOnExample>& examples,
                         const AddOnOptions& opt);

struct HeatmapParams {
  double a = -50.0;
  double b = 100.0;
  double sigma = 0.001;
  double theta = 0.5;
};

struct Heatmap {
  int category_id = 0;
  double stride = 1.0;
  int width = 0;   // cells
  int height = 0;  // cells
  ImageSize image;
  std::vector<double> values;  // row-major, height x width
  double at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }
};

// s_id(p) for one detection and add-on slot `k`.
double heatmap_value(const PersonPrediction& pred, size_t k, double px, double py, const HeatmapParams& hp);

// One heatmap per add-on category, evaluated at cell centers.
std::vector<Heatmap> build_heatmaps(const std::vector<PersonPrediction>& preds, const std::vector<int>& addon_ids,
                                    const HeatmapParams& hp, ImageSize image, double stride);

// Heatmaps as a feature map of (s - A) / B, one channel per category.
FeatureMap heatmap_features(const std::vector<Heatmap>& maps, const HeatmapParams& hp);

// Person detections from a detector's outputs: person category, score >= threshold.
std::vector<std::pair<BoundingBox, double>> person_detections(const DetectionSet& dets, int person_category,
                                                              double threshold = 0.5);

struct PersonContextConfig {
  HeatmapParams heatmap{-50.0, 100.0, 0.1, 0.5};
  int heatmap_grid = 3;
  double person_threshold = 0.5;
  AddOnOptions addon;
};

nlohmann::json person_context_config_to_json(const PersonContextConfig& c);
PersonContextConfig person_context_config_from_json(const nlohmann::json& j, PersonContextConfig base = {});

// Predictions for every person the baseline detects in `image`.
std::vector<PersonPrediction> predict_people(const ParamBundle& baseline, const ParamBundle& head,
                                             const PreparedImage& image, const FeatureMap& fm,
                                             const DetectorConfig& det_cfg, const PersonContextConfig& cfg,
                                             int person_category);

// Fills image.extra with pooled heatmap features for every proposal.
void attach_heatmap_features(PreparedImage& image, const std::vector<PersonPrediction>& preds,
                             const std::vector<int>& addon_ids, const PersonContextConfig& cfg,
                             const FeatureMap& fm);

int heatmap_feature_dim(size_t addon_count, const PersonContextConfig& cfg);

struct AttachmentPair {
  size_t detection = 0;  // index into the add-on detections
  size_t person = 0;     // index into the predictions
  double heatmap_value = 0.0;
};

// Each add-on detection pairs with the person whose own field s_id is
// highest at the detection center; ties go to the higher-scored person.
std::vector<AttachmentPair> infer_attachments(const DetectionSet& addon_dets, const std::vector<PersonPrediction>& preds,
                                              const std::vector<int>& addon_ids, const HeatmapParams& hp);

struct AttachmentRecord {
  int image_id = 0;
  int addon_category = 0;
  BoundingBox addon_box;
  BoundingBox person_box;
  double heatmap_value = 0.0;
};

// image_id,addon_category,addon_box,person_box,heatmap_value with boxes
// written as space-separated "x y w h" and categories by name.
std::string attachments_csv(const std::vector<AttachmentRecord>& rows, const SceneSet& scenes);

}  // namespace ctxdet
