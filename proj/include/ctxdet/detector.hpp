#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxdet/dataset.hpp"
#include "ctxdet/detection.hpp"
#include "ctxdet/feature_map.hpp"
#include "ctxdet/nn.hpp"

namespace ctxdet {

// Sampled: 64 boxes per image, a quarter positive. Reweighted: no
// foreground sampling, up to 500 boxes per image, foreground
// classification loss and box loss scaled up.
enum class TrainProtocol { Sampled, Reweighted };

TrainProtocol parse_protocol(const std::string& name);
std::string protocol_name(TrainProtocol p);

struct DetectorConfig {
  int grid = kDefaultRoiGrid;
  int hidden = 64;
  int epochs = 12;
  double lr = 0.05;
  // Learning rate is multiplied by lr_decay after this fraction of epochs.
  double decay_at = 0.75;
  double lr_decay = 0.1;
  TrainProtocol protocol = TrainProtocol::Sampled;
  int batch_boxes = 64;
  double positive_fraction = 0.25;
  int max_boxes = 500;
  double fg_weight = 10.0;
  double bbox_weight = 5.0;
  double target_scale = 10.0;
  bool train_trunk = true;
  bool add_gt_to_training = true;
  double nms_iou = kNmsIou;
  int max_detections = kMaxDetectionsPerImage;
  double min_score = 1e-3;
  std::uint64_t seed = 0;
};

nlohmann::json detector_config_to_json(const DetectorConfig& c);
// Missing keys keep defaults; bad values throw ConfigError.
DetectorConfig detector_config_from_json(const nlohmann::json& j, DetectorConfig base = {});

// Proposals of one image with everything that does not depend on the
// trainable parameters already computed.
struct PreparedImage {
  int image_id = 0;
  ImageSize size;
  std::vector<BoundingBox> boxes;
  Matrix pooled;  // N x (C * G^2)
  Matrix extra;   // N x E parameter-free context features (may be N x 0)
  std::vector<ProposalLabel> labels;
  Matrix targets;  // N x 4 encode_addon(box, gt) where positive, else 0
};

// With `gts` empty, labels are all background (inference).
PreparedImage prepare_image(int image_id, const FeatureMap& fm, std::vector<BoundingBox> boxes,
                            const std::vector<const Annotation*>& gts, int grid);

// One PreparedImage per scene image. Labels come from the (non-ignored)
// GT; `add_gt_boxes` appends the exact GT boxes to the proposals.
std::vector<PreparedImage> prepare_dataset(const Dataset& data, int grid, bool add_gt_boxes);

// Pooled features for a list of boxes, one row each.
Matrix pool_boxes(const FeatureMap& fm, const std::vector<BoundingBox>& boxes, int grid);

// A trainable context feature appended to the classifier input. forward()
// keeps whatever backward() needs; calls alternate forward, backward.
class ContextBranch {
 public:
  virtual ~ContextBranch() = default;
  virtual int dim() const = 0;
  virtual std::vector<std::string> layer_names() const = 0;
  virtual Matrix forward(const ParamBundle& params, const PreparedImage& image, const std::vector<int>& rows) = 0;
  virtual void backward(const ParamBundle& params, const Matrix& d_out, ParamBundle& grads) = 0;
};

// Layers fc6, fc7 (tanh), cls (softmax over background + classes) and bbox
// (4 per class) over [fc7 | extra | branch].
ParamBundle init_detector(int input_dim, int hidden, int extra_dim, int branch_dim,
                          const std::vector<int>& class_ids, std::uint64_t seed);

std::vector<int> detector_class_ids(const ParamBundle& params);

// fc7 activations for pooled rows.
Matrix trunk_features(const ParamBundle& params, const Matrix& pooled);

// Copies layers of `from` into `to` where names match; classifier and
// regressor weights are copied into the leading columns and the remaining
// (context) columns are zeroed, so the result starts out scoring exactly
// like `from`.
void transfer_weights(const ParamBundle& from, ParamBundle& to);

struct DetectorOutput {
  Matrix probs;   // rows x (K + 1)
  Matrix deltas;  // rows x 4K, unscaled
};

DetectorOutput detector_forward(const ParamBundle& params, const PreparedImage& image, const std::vector<int>& rows,
                                ContextBranch* branch);

// Mean loss over `rows`. Fills `grads` (same shapes as params) when given.
double detector_loss(const ParamBundle& params, const PreparedImage& image, const std::vector<int>& rows,
                     ContextBranch* branch, const DetectorConfig& cfg, ParamBundle* grads);

// Rows used for one SGD step on `image`.
std::vector<int> training_rows(const PreparedImage& image, const DetectorConfig& cfg, std::uint64_t seed);

struct TrainLog {
  std::vector<double> epoch_loss;
};

// SGD, one image per step, images visited in a seeded order each epoch.
TrainLog train_detector(ParamBundle& params, const std::vector<PreparedImage>& images, ContextBranch* branch,
                        const DetectorConfig& cfg);

// Per class scores and decoded boxes, then NMS and the per-image cap.
DetectionSet detect(const ParamBundle& params, const PreparedImage& image, ContextBranch* branch,
                    const DetectorConfig& cfg);

}  // namespace ctxdet
