#include "ctxdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "ctxdet/error.hpp"
#include "ctxdet/rng.hpp"

namespace ctxdet {

TrainProtocol parse_protocol(const std::string& name) {
  if (name == "sampled") return TrainProtocol::Sampled;
  if (name == "reweighted") return TrainProtocol::Reweighted;
  throw ConfigError("unknown training protocol: " + name);
}

std::string protocol_name(TrainProtocol p) { return p == TrainProtocol::Sampled ? "sampled" : "reweighted"; }

nlohmann::json detector_config_to_json(const DetectorConfig& c) {
  return {{"grid", c.grid},
          {"hidden", c.hidden},
          {"epochs", c.epochs},
          {"lr", c.lr},
          {"decay_at", c.decay_at},
          {"lr_decay", c.lr_decay},
          {"protocol", protocol_name(c.protocol)},
          {"batch_boxes", c.batch_boxes},
          {"positive_fraction", c.positive_fraction},
          {"max_boxes", c.max_boxes},
          {"fg_weight", c.fg_weight},
          {"bbox_weight", c.bbox_weight},
          {"target_scale", c.target_scale},
          {"train_trunk", c.train_trunk},
          {"add_gt_to_training", c.add_gt_to_training},
          {"nms_iou", c.nms_iou},
          {"max_detections", c.max_detections},
          {"min_score", c.min_score},
          {"seed", c.seed}};
}

DetectorConfig detector_config_from_json(const nlohmann::json& j, DetectorConfig c) {
  try {
    auto get = [&](const char* key, auto& out) {
      if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
    };
    get("grid", c.grid);
    get("hidden", c.hidden);
    get("epochs", c.epochs);
    get("lr", c.lr);
    get("decay_at", c.decay_at);
    get("lr_decay", c.lr_decay);
    if (j.contains("protocol")) c.protocol = parse_protocol(j.at("protocol").get<std::string>());
    get("batch_boxes", c.batch_boxes);
    get("positive_fraction", c.positive_fraction);
    get("max_boxes", c.max_boxes);
    get("fg_weight", c.fg_weight);
    get("bbox_weight", c.bbox_weight);
    get("target_scale", c.target_scale);
    get("train_trunk", c.train_trunk);
    get("add_gt_to_training", c.add_gt_to_training);
    get("nms_iou", c.nms_iou);
    get("max_detections", c.max_detections);
    get("min_score", c.min_score);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("detector config: ") + e.what());
  }
  if (c.grid < 1 || c.hidden < 1 || c.epochs < 0 || c.lr < 0 || c.batch_boxes < 4 || c.max_boxes < 1) {
    throw ConfigError("detector config: out-of-range value");
  }
  return c;
}

Matrix pool_boxes(const FeatureMap& fm, const std::vector<BoundingBox>& boxes, int grid) {
  Matrix out(static_cast<Eigen::Index>(boxes.size()), static_cast<Eigen::Index>(fm.channels) * grid * grid);
  for (size_t i = 0; i < boxes.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = roi_pool(fm, boxes[i], grid).values.transpose();
  return out;
}

PreparedImage prepare_image(int image_id, const FeatureMap& fm, std::vector<BoundingBox> boxes,
                            const std::vector<const Annotation*>& gts, int grid) {
  PreparedImage p;
  p.image_id = image_id;
  p.size = {static_cast<int>(std::lround(fm.width * fm.stride)), static_cast<int>(std::lround(fm.height * fm.stride))};
  p.boxes = std::move(boxes);
  p.pooled = pool_boxes(fm, p.boxes, grid);
  p.extra = Matrix(static_cast<Eigen::Index>(p.boxes.size()), 0);
  p.labels = label_proposals(p.boxes, gts);
  p.targets = Matrix::Zero(static_cast<Eigen::Index>(p.boxes.size()), 4);
  for (size_t i = 0; i < p.boxes.size(); ++i) {
    if (p.labels[i].category_id == kBackground) continue;
    const auto t = encode_addon(p.boxes[i], gts[p.labels[i].gt_index]->bbox).as_array();
    for (int k = 0; k < 4; ++k) p.targets(static_cast<Eigen::Index>(i), k) = t[k];
  }
  return p;
}

std::vector<PreparedImage> prepare_dataset(const Dataset& data, int grid, bool add_gt_boxes) {
  std::vector<PreparedImage> out;
  out.reserve(data.scenes.images.size());
  for (size_t i = 0; i < data.scenes.images.size(); ++i) {
    const int id = data.scenes.images[i].id;
    std::vector<const Annotation*> gts;
    for (size_t idx : data.scenes.annotation_indices(id)) gts.push_back(&data.scenes.annotations[idx]);
    std::vector<BoundingBox> boxes = data.proposals[i];
    if (add_gt_boxes)
      for (const auto* g : gts) boxes.push_back(g->bbox);
    out.push_back(prepare_image(id, data.features[i], std::move(boxes), gts, grid));
  }
  return out;
}

ParamBundle init_detector(int input_dim, int hidden, int extra_dim, int branch_dim, const std::vector<int>& class_ids,
                          std::uint64_t seed) {
  ParamBundle p;
  p.seed = seed;
  Rng rng = make_rng(seed, "detector/init");
  const int fused = hidden + extra_dim + branch_dim;
  const int k = static_cast<int>(class_ids.size());
  init_uniform(p.add(LinearLayer("fc6", hidden, input_dim)), rng);
  init_uniform(p.add(LinearLayer("fc7", hidden, hidden)), rng);
  init_uniform(p.add(LinearLayer("cls", k + 1, fused)), rng);
  init_uniform(p.add(LinearLayer("bbox", 4 * k, fused)), rng);
  p.meta["kind"] = "detector";
  p.meta["class_ids"] = class_ids;
  p.meta["input_dim"] = input_dim;
  p.meta["hidden"] = hidden;
  p.meta["extra_dim"] = extra_dim;
  p.meta["branch_dim"] = branch_dim;
  return p;
}

std::vector<int> detector_class_ids(const ParamBundle& params) {
  return params.meta.at("class_ids").get<std::vector<int>>();
}

Matrix trunk_features(const ParamBundle& params, const Matrix& pooled) {
  const Matrix h6 = tanh_forward(params.layer("fc6").forward(pooled));
  return tanh_forward(params.layer("fc7").forward(h6));
}

void transfer_weights(const ParamBundle& from, ParamBundle& to) {
  for (auto& layer : to.layers()) {
    if (!from.has(layer.name)) continue;
    const LinearLayer& src = from.layer(layer.name);
    if (src.weights.rows() != layer.weights.rows() || src.weights.cols() > layer.weights.cols() ||
        src.has_bias != layer.has_bias) {
      throw ShapeMismatch("transfer_weights: incompatible layer " + layer.name);
    }
    layer.weights.setZero();
    layer.weights.leftCols(src.weights.cols()) = src.weights;
    layer.bias = src.bias;
  }
}

namespace {

struct ForwardCache {
  Matrix x, h6, h7, fused, probs, pred;
};

ForwardCache forward_cached(const ParamBundle& params, const PreparedImage& image, const std::vector<int>& rows,
                            ContextBranch* branch) {
  ForwardCache c;
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  c.x.resize(n, image.pooled.cols());
  Matrix extra(n, image.extra.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    c.x.row(i) = image.pooled.row(rows[i]);
    extra.row(i) = image.extra.row(rows[i]);
  }
  c.h6 = tanh_forward(params.layer("fc6").forward(c.x));
  c.h7 = tanh_forward(params.layer("fc7").forward(c.h6));
  const Eigen::Index branch_dim = branch ? branch->dim() : 0;
  c.fused.resize(n, c.h7.cols() + extra.cols() + branch_dim);
  c.fused.leftCols(c.h7.cols()) = c.h7;
  c.fused.middleCols(c.h7.cols(), extra.cols()) = extra;
  if (branch) c.fused.rightCols(branch_dim) = branch->forward(params, image, rows);
  if (c.fused.cols() != params.layer("cls").in_dim()) {
    throw ShapeMismatch("detector: fused feature width does not match the classifier");
  }
  c.probs = softmax_rows(params.layer("cls").forward(c.fused));
  c.pred = params.layer("bbox").forward(c.fused);
  return c;
}

double target_scale_of(const ParamBundle& params) {
  return params.meta.contains("target_scale") ? params.meta.at("target_scale").get<double>() : 1.0;
}

}  // namespace

DetectorOutput detector_forward(const ParamBundle& params, const PreparedImage& image, const std::vector<int>& rows,
                                ContextBranch* branch) {
  ForwardCache c = forward_cached(params, image, rows, branch);
  return {std::move(c.probs), c.pred / target_scale_of(params)};
}

double detector_loss(const ParamBundle& params, const PreparedImage& image, const std::vector<int>& rows,
                     ContextBranch* branch, const DetectorConfig& cfg, ParamBundle* grads) {
  if (rows.empty()) return 0.0;
  const ForwardCache c = forward_cached(params, image, rows, branch);
  const std::vector<int> class_ids = detector_class_ids(params);
  std::map<int, int> class_index;
  for (size_t k = 0; k < class_ids.size(); ++k) class_index[class_ids[k]] = static_cast<int>(k) + 1;
  const double scale = target_scale_of(params);
  const bool reweighted = cfg.protocol == TrainProtocol::Reweighted;
  const double n = static_cast<double>(rows.size());

  Matrix d_logits = c.probs;
  Matrix d_pred = Matrix::Zero(c.pred.rows(), c.pred.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(rows.size()); ++i) {
    const ProposalLabel& label = image.labels[rows[i]];
    const int y = label.category_id == kBackground ? 0 : class_index.at(label.category_id);
    const double w = (reweighted && y > 0) ? cfg.fg_weight : 1.0;
    loss += -w * std::log(std::max(c.probs(i, y), 1e-300));
    d_logits.row(i) *= w / n;
    d_logits(i, y) -= w / n;
    if (y == 0) continue;
    const double lambda = reweighted ? cfg.bbox_weight : 1.0;
    for (int j = 0; j < 4; ++j) {
      const Eigen::Index col = 4 * (y - 1) + j;
      const LossValue h = huber(scale * image.targets(rows[i], j) - c.pred(i, col));
      loss += lambda * h.value;
      d_pred(i, col) = -lambda * h.derivative / n;
    }
  }
  loss /= n;
  if (!grads) return loss;

  const LinearLayer& cls = params.layer("cls");
  const LinearLayer& bbox = params.layer("bbox");
  Matrix d_fused = cls.backward(c.fused, d_logits, grads->layer("cls"));
  d_fused += bbox.backward(c.fused, d_pred, grads->layer("bbox"));
  const Eigen::Index hidden = c.h7.cols();
  if (branch) branch->backward(params, d_fused.rightCols(branch->dim()), *grads);
  if (cfg.train_trunk) {
    const Matrix d_h7 = tanh_backward(c.h7, d_fused.leftCols(hidden));
    const Matrix d_h6 = tanh_backward(c.h6, params.layer("fc7").backward(c.h6, d_h7, grads->layer("fc7")));
    params.layer("fc6").accumulate(c.x, d_h6, grads->layer("fc6"));
  }
  return loss;
}

std::vector<int> training_rows(const PreparedImage& image, const DetectorConfig& cfg, std::uint64_t seed) {
  if (image.boxes.empty()) return {};
  if (cfg.protocol == TrainProtocol::Sampled) {
    return sample_minibatch(image.labels, cfg.batch_boxes, cfg.positive_fraction, seed);
  }
  std::vector<int> rows(image.boxes.size());
  std::iota(rows.begin(), rows.end(), 0);
  if (rows.size() > static_cast<size_t>(cfg.max_boxes)) {
    Rng rng(seed);
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(static_cast<size_t>(cfg.max_boxes));
    std::sort(rows.begin(), rows.end());
  }
  return rows;
}

TrainLog train_detector(ParamBundle& params, const std::vector<PreparedImage>& images, ContextBranch* branch,
                        const DetectorConfig& cfg) {
  params.meta["target_scale"] = cfg.target_scale;
  params.meta["protocol"] = protocol_name(cfg.protocol);
  TrainLog log;
  ParamBundle grads = params.zeros_like();
  std::vector<size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  const int decay_epoch = static_cast<int>(std::ceil(cfg.decay_at * cfg.epochs));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, "detector/epoch/" + std::to_string(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = epoch >= decay_epoch ? cfg.lr * cfg.lr_decay : cfg.lr;
    double total = 0.0;
    for (size_t idx : order) {
      const auto rows = training_rows(images[idx], cfg, rng());
      if (rows.empty()) continue;
      grads.set_zero();
      total += detector_loss(params, images[idx], rows, branch, cfg, &grads);
      sgd_step(params, grads, lr);
    }
    log.epoch_loss.push_back(images.empty() ? 0.0 : total / static_cast<double>(images.size()));
  }
  return log;
}

DetectionSet detect(const ParamBundle& params, const PreparedImage& image, ContextBranch* branch,
                    const DetectorConfig& cfg) {
  if (image.boxes.empty()) return {};
  std::vector<int> rows(image.boxes.size());
  std::iota(rows.begin(), rows.end(), 0);
  const DetectorOutput out = detector_forward(params, image, rows, branch);
  const std::vector<int> class_ids = detector_class_ids(params);
  DetectionSet dets;
  for (size_t i = 0; i < image.boxes.size(); ++i) {
    for (size_t k = 0; k < class_ids.size(); ++k) {
      const double score = out.probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k) + 1);
      if (score < cfg.min_score) continue;
      std::array<double, 4> t;
      for (int j = 0; j < 4; ++j) t[j] = out.deltas(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(4 * k + j));
      t[2] = std::clamp(t[2], -4.0, 4.0);
      t[3] = std::clamp(t[3], -4.0, 4.0);
      const BoundingBox box = clip_box(decode_addon(image.boxes[i], AddOnOffset::from_array(t)), image.size);
      dets.push_back({image.image_id, class_ids[k], box, score});
    }
  }
  return cap_per_image(nms(dets, cfg.nms_iou), cfg.max_detections);
}

}  // namespace ctxdet
