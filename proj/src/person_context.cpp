#include "ctxdet/person_context.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <limits>
#include <numeric>
#include <sstream>

#include "ctxdet/error.hpp"
#include "ctxdet/io.hpp"
#include "ctxdet/rng.hpp"

namespace ctxdet {

namespace {

ImageSize map_extent(const FeatureMap& fm) {
  return {static_cast<int>(std::lround(fm.width * fm.stride)), static_cast<int>(std::lround(fm.height * fm.stride))};
}

Matrix as_row(const Vector& v) { return v.transpose(); }

AddOnOffset offset_block(const Matrix& m, Eigen::Index row, size_t k) {
  const Eigen::Index c = static_cast<Eigen::Index>(4 * k);
  return {m(row, c), m(row, c + 1), m(row, c + 2), m(row, c + 3)};
}

// Decoded intermediate box used for step-2 pooling.
BoundingBox step2_box(const BoundingBox& person, const AddOnOffset& lhat, ImageSize extent, bool& fallback) {
  AddOnOffset off = lhat;
  off.log_w_ratio = std::clamp(off.log_w_ratio, -4.0, 4.0);
  off.log_h_ratio = std::clamp(off.log_h_ratio, -4.0, 4.0);
  const BoundingBox decoded = decode_addon(person, off);
  const BoundingBox clipped = clip_box(decoded, extent);
  fallback = !decoded.valid() || clipped.w < 1.0 || clipped.h < 1.0 || intersection_area(decoded, clipped) <= 0.0;
  return fallback ? clip_box(person, extent) : clipped;
}

struct HeadForward {
  Matrix x1, h6a, h7a;  // step 1, one row
  Matrix x2, h6b, h7b;  // step 2, one row per category
  Matrix p;             // 1 x A
  Matrix lhat;          // 1 x 4A
  Matrix corr;          // A x 4A
  std::vector<bool> fallback;
};

HeadForward head_forward(const ParamBundle& head, const FeatureMap& fm, const BoundingBox& person,
                         const AddOnOptions& opt) {
  const ImageSize extent = map_extent(fm);
  const size_t a = head.layer("conf").out_dim();
  HeadForward f;
  f.x1 = as_row(roi_pool(fm, expand_box(person, kPersonExpand, extent), opt.grid).values);
  f.h6a = tanh_forward(head.layer("fc6").forward(f.x1));
  f.h7a = tanh_forward(head.layer("fc7").forward(f.h6a));
  f.p = sigmoid_forward(head.layer("conf").forward(f.h7a));
  f.lhat = head.layer("off1").forward(f.h7a);
  f.fallback.assign(a, false);
  if (!opt.use_step2) return f;
  f.x2.resize(static_cast<Eigen::Index>(a), f.x1.cols());
  if (!opt.step2_boxes.empty() && opt.step2_boxes.size() != a) throw ShapeMismatch("step2_boxes: wrong count");
  for (size_t k = 0; k < a; ++k) {
    bool fb = false;
    const BoundingBox box =
        opt.step2_boxes.empty() ? step2_box(person, offset_block(f.lhat, 0, k), extent, fb) : opt.step2_boxes[k];
    f.fallback[k] = fb;
    f.x2.row(static_cast<Eigen::Index>(k)) = roi_pool(fm, box, opt.grid).values.transpose();
  }
  f.h6b = tanh_forward(head.layer("fc6").forward(f.x2));
  f.h7b = tanh_forward(head.layer("fc7").forward(f.h6b));
  f.corr = head.layer("off2").forward(f.h7b);
  return f;
}

}  // namespace

ParamBundle init_addon_head(int input_dim, int hidden, const std::vector<int>& addon_ids, std::uint64_t seed) {
  ParamBundle p;
  p.seed = seed;
  Rng rng = make_rng(seed, "addon/init");
  const int a = static_cast<int>(addon_ids.size());
  init_uniform(p.add(LinearLayer("fc6", hidden, input_dim)), rng);
  init_uniform(p.add(LinearLayer("fc7", hidden, hidden)), rng);
  init_uniform(p.add(LinearLayer("conf", a, hidden)), rng);
  init_uniform(p.add(LinearLayer("off1", 4 * a, hidden)), rng);
  init_uniform(p.add(LinearLayer("off2", 4 * a, hidden)), rng);
  p.variant = "addon";
  p.meta["kind"] = "addon_head";
  p.meta["addon_ids"] = addon_ids;
  p.meta["input_dim"] = input_dim;
  p.meta["hidden"] = hidden;
  return p;
}

std::vector<BoundingBox> step2_boxes(const ParamBundle& head, const FeatureMap& fm, const BoundingBox& person,
                                     const AddOnOptions& opt) {
  AddOnOptions o = opt;
  o.use_step2 = false;
  const HeadForward f = head_forward(head, fm, person, o);
  std::vector<BoundingBox> out;
  for (size_t k = 0; k < static_cast<size_t>(f.p.cols()); ++k) {
    bool fb = false;
    out.push_back(step2_box(person, offset_block(f.lhat, 0, k), map_extent(fm), fb));
  }
  return out;
}

std::vector<int> addon_category_ids(const ParamBundle& head) { return head.meta.at("addon_ids").get<std::vector<int>>(); }

PersonPrediction predict_addons(const BoundingBox& person, double person_score, const FeatureMap& fm,
                                const ParamBundle& head, const AddOnOptions& opt) {
  const HeadForward f = head_forward(head, fm, person, opt);
  const size_t a = static_cast<size_t>(f.p.cols());
  PersonPrediction out;
  out.person = person;
  out.person_score = person_score;
  out.fallback = f.fallback;
  for (size_t k = 0; k < a; ++k) {
    out.confidence.push_back(f.p(0, static_cast<Eigen::Index>(k)));
    const AddOnOffset lhat = offset_block(f.lhat, 0, k);
    out.intermediate.push_back(lhat);
    if (!opt.use_step2) {
      out.refined.push_back(lhat);
      continue;
    }
    const AddOnOffset c = offset_block(f.corr, static_cast<Eigen::Index>(k), k);
    out.refined.push_back({lhat.dx_norm + c.dx_norm, lhat.dy_norm + c.dy_norm, lhat.log_w_ratio + c.log_w_ratio,
                           lhat.log_h_ratio + c.log_h_ratio});
  }
  return out;
}

std::vector<AddOnExample> addon_examples(const Dataset& data, const std::vector<int>& addon_ids) {
  const AttachmentMap attach = build_attachments(data.scenes);
  const auto person_cat = data.scenes.person_category();
  std::vector<AddOnExample> out;
  if (!person_cat) return out;
  std::map<int, size_t> ann_index;
  for (size_t i = 0; i < data.scenes.annotations.size(); ++i) ann_index[data.scenes.annotations[i].id] = i;
  for (size_t img = 0; img < data.scenes.images.size(); ++img) {
    for (size_t idx : data.scenes.annotation_indices(data.scenes.images[img].id)) {
      const Annotation& a = data.scenes.annotations[idx];
      if (a.category_id != *person_cat || a.ignore) continue;
      AddOnExample ex;
      ex.image_index = static_cast<int>(img);
      ex.person = a.bbox;
      ex.truth.present.assign(addon_ids.size(), 0);
      ex.truth.boxes.assign(addon_ids.size(), BoundingBox{});
      auto it = attach.by_person.find(a.id);
      for (size_t k = 0; k < addon_ids.size() && it != attach.by_person.end(); ++k) {
        auto jt = it->second.find(addon_ids[k]);
        if (jt == it->second.end()) continue;
        ex.truth.present[k] = 1;
        ex.truth.boxes[k] = data.scenes.annotations[ann_index.at(jt->second)].bbox;
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

double addon_loss(const ParamBundle& head, const FeatureMap& fm, const AddOnExample& ex, const AddOnOptions& opt,
                  ParamBundle* grads) {
  const HeadForward f = head_forward(head, fm, ex.person, opt);
  const size_t a = static_cast<size_t>(f.p.cols());
  if (ex.truth.present.size() != a) throw ShapeMismatch("addon_loss: truth does not match the head");
  double loss = 0.0;
  Matrix dz = Matrix::Zero(1, static_cast<Eigen::Index>(a));
  Matrix dlhat = Matrix::Zero(1, static_cast<Eigen::Index>(4 * a));
  Matrix dcorr = opt.use_step2 ? Matrix::Zero(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(4 * a)) : Matrix();
  for (size_t k = 0; k < a; ++k) {
    const Eigen::Index ki = static_cast<Eigen::Index>(k);
    const int y = ex.truth.present[k];
    const double p = f.p(0, ki);
    const LossValue l = nll(y, p);
    loss += l.value;
    dz(0, ki) = l.derivative * p * (1.0 - p);
    if (!y) continue;
    const auto lhat_star = encode_addon(ex.person, intermediate_target(ex.person, ex.truth.boxes[k])).as_array();
    const auto l_star = encode_addon(ex.person, ex.truth.boxes[k]).as_array();
    for (int j = 0; j < 4; ++j) {
      const Eigen::Index col = static_cast<Eigen::Index>(4 * k + j);
      const double lhat = f.lhat(0, col);
      const LossValue h1 = huber(lhat_star[j] - lhat);
      loss += h1.value;
      dlhat(0, col) -= h1.derivative;
      const double l = opt.use_step2 ? lhat + f.corr(ki, col) : lhat;
      const LossValue h2 = huber(l_star[j] - l);
      loss += h2.value;
      dlhat(0, col) -= h2.derivative;
      if (opt.use_step2) dcorr(ki, col) = -h2.derivative;
    }
  }
  if (!grads) return loss;
  Matrix dh7a = head.layer("conf").backward(f.h7a, dz, grads->layer("conf"));
  dh7a += head.layer("off1").backward(f.h7a, dlhat, grads->layer("off1"));
  const Matrix dh6a = tanh_backward(f.h6a, head.layer("fc7").backward(f.h6a, tanh_backward(f.h7a, dh7a), grads->layer("fc7")));
  head.layer("fc6").accumulate(f.x1, dh6a, grads->layer("fc6"));
  if (opt.use_step2) {
    const Matrix dh7b = head.layer("off2").backward(f.h7b, dcorr, grads->layer("off2"));
    const Matrix dh6b =
        tanh_backward(f.h6b, head.layer("fc7").backward(f.h6b, tanh_backward(f.h7b, dh7b), grads->layer("fc7")));
    head.layer("fc6").accumulate(f.x2, dh6b, grads->layer("fc6"));
  }
  return loss;
}

nlohmann::json addon_config_to_json(const AddOnTrainConfig& c) {
  return {{"grid", c.grid}, {"hidden", c.hidden}, {"epochs", c.epochs}, {"lr", c.lr}, {"batch", c.batch}, {"seed", c.seed}};
}

AddOnTrainConfig addon_config_from_json(const nlohmann::json& j, AddOnTrainConfig c) {
  try {
    if (j.contains("grid")) c.grid = j.at("grid").get<int>();
    if (j.contains("hidden")) c.hidden = j.at("hidden").get<int>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("batch")) c.batch = j.at("batch").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("addon config: ") + e.what());
  }
  if (c.grid < 1 || c.hidden < 1 || c.epochs < 0 || c.batch < 1 || c.lr < 0) throw ConfigError("addon config: out-of-range value");
  return c;
}

AddOnTrainLog train_addon_head(ParamBundle& head, const Dataset& data, const std::vector<AddOnExample>& examples,
                               const AddOnTrainConfig& cfg) {
  AddOnTrainLog log;
  AddOnOptions opt;
  opt.grid = cfg.grid;
  head.meta["grid"] = cfg.grid;
  ParamBundle grads = head.zeros_like();
  std::vector<size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, "addon/epoch/" + std::to_string(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = epoch >= (3 * cfg.epochs) / 4 ? 0.1 * cfg.lr : cfg.lr;
    double total = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
      grads.set_zero();
      for (size_t i = start; i < end; ++i) {
        const AddOnExample& ex = examples[order[i]];
        total += addon_loss(head, data.features[static_cast<size_t>(ex.image_index)], ex, opt, &grads);
      }
      sgd_step(head, grads, lr / static_cast<double>(end - start));
    }
    log.epoch_loss.push_back(examples.empty() ? 0.0 : total / static_cast<double>(examples.size()));
  }
  return log;
}

double mean_center_error(const ParamBundle& head, const Dataset& data, const std::vector<AddOnExample>& examples,
                         const AddOnOptions& opt) {
  double total = 0.0;
  int n = 0;
  for (const auto& ex : examples) {
    const PersonPrediction p = predict_addons(ex.person, 1.0, data.features[static_cast<size_t>(ex.image_index)], head, opt);
    for (size_t k = 0; k < ex.truth.present.size(); ++k) {
      if (!ex.truth.present[k]) continue;
      const BoundingBox b = decode_addon(ex.person, p.refined[k]);
      total += std::hypot(b.cx() - ex.truth.boxes[k].cx(), b.cy() - ex.truth.boxes[k].cy()) / ex.person.h;
      ++n;
    }
  }
  return n ? total / n : 0.0;
}

double heatmap_value(const PersonPrediction& pred, size_t k, double px, double py, const HeatmapParams& hp) {
  if (!(pred.confidence[k] > hp.theta)) return hp.a;
  const BoundingBox& d = pred.person;
  const double cx = d.cx() + pred.refined[k].dx_norm * d.w;
  const double cy = d.cy() + pred.refined[k].dy_norm * d.h;
  const double s = hp.sigma * d.h;
  const double r2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
  return hp.a + hp.b * std::exp(-r2 / (2.0 * s * s));
}

std::vector<Heatmap> build_heatmaps(const std::vector<PersonPrediction>& preds, const std::vector<int>& addon_ids,
                                    const HeatmapParams& hp, ImageSize image, double stride) {
  std::vector<Heatmap> maps;
  const int w = static_cast<int>(std::ceil(image.width / stride));
  const int h = static_cast<int>(std::ceil(image.height / stride));
  for (size_t k = 0; k < addon_ids.size(); ++k) {
    Heatmap m;
    m.category_id = addon_ids[k];
    m.stride = stride;
    m.width = w;
    m.height = h;
    m.image = image;
    m.values.assign(static_cast<size_t>(w) * h, hp.a);
    for (const auto& p : preds) {
      if (!(p.confidence[k] > hp.theta)) continue;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double& v = m.values[static_cast<size_t>(y) * w + x];
          v = std::max(v, heatmap_value(p, k, (x + 0.5) * stride, (y + 0.5) * stride, hp));
        }
    }
    maps.push_back(std::move(m));
  }
  return maps;
}

FeatureMap heatmap_features(const std::vector<Heatmap>& maps, const HeatmapParams& hp) {
  if (maps.empty()) throw Error("heatmap_features: no heatmaps");
  FeatureMap fm(static_cast<int>(maps.size()), maps[0].height, maps[0].width, maps[0].stride);
  for (size_t c = 0; c < maps.size(); ++c)
    for (int y = 0; y < fm.height; ++y)
      for (int x = 0; x < fm.width; ++x)
        fm.at(static_cast<int>(c), y, x) = static_cast<float>((maps[c].at(y, x) - hp.a) / hp.b);
  return fm;
}

std::vector<std::pair<BoundingBox, double>> person_detections(const DetectionSet& dets, int person_category,
                                                              double threshold) {
  std::vector<std::pair<BoundingBox, double>> out;
  for (const auto& d : dets)
    if (d.category_id == person_category && d.score >= threshold) out.emplace_back(d.box, d.score);
  return out;
}

nlohmann::json person_context_config_to_json(const PersonContextConfig& c) {
  return {{"A", c.heatmap.a},
          {"B", c.heatmap.b},
          {"sigma", c.heatmap.sigma},
          {"theta", c.heatmap.theta},
          {"heatmap_grid", c.heatmap_grid},
          {"person_threshold", c.person_threshold},
          {"use_step2", c.addon.use_step2}};
}

PersonContextConfig person_context_config_from_json(const nlohmann::json& j, PersonContextConfig c) {
  try {
    if (j.contains("A")) c.heatmap.a = j.at("A").get<double>();
    if (j.contains("B")) c.heatmap.b = j.at("B").get<double>();
    if (j.contains("sigma")) c.heatmap.sigma = j.at("sigma").get<double>();
    if (j.contains("theta")) c.heatmap.theta = j.at("theta").get<double>();
    if (j.contains("heatmap_grid")) c.heatmap_grid = j.at("heatmap_grid").get<int>();
    if (j.contains("person_threshold")) c.person_threshold = j.at("person_threshold").get<double>();
    if (j.contains("use_step2")) c.addon.use_step2 = j.at("use_step2").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("person context config: ") + e.what());
  }
  if (!(c.heatmap.sigma > 0) || !(c.heatmap.b > 0) || c.heatmap_grid < 1) {
    throw ConfigError("person context config: sigma and B must be positive");
  }
  return c;
}

std::vector<PersonPrediction> predict_people(const ParamBundle& baseline, const ParamBundle& head,
                                             const PreparedImage& image, const FeatureMap& fm,
                                             const DetectorConfig& det_cfg, const PersonContextConfig& cfg,
                                             int person_category) {
  PreparedImage plain = image;
  plain.extra = Matrix(static_cast<Eigen::Index>(image.boxes.size()), 0);
  const DetectionSet dets = detect(baseline, plain, nullptr, det_cfg);
  std::vector<PersonPrediction> preds;
  AddOnOptions opt = cfg.addon;
  opt.grid = head.meta.value("grid", opt.grid);
  for (const auto& [box, score] : person_detections(dets, person_category, cfg.person_threshold)) {
    preds.push_back(predict_addons(box, score, fm, head, opt));
  }
  return preds;
}

int heatmap_feature_dim(size_t addon_count, const PersonContextConfig& cfg) {
  return static_cast<int>(addon_count) * cfg.heatmap_grid * cfg.heatmap_grid;
}

void attach_heatmap_features(PreparedImage& image, const std::vector<PersonPrediction>& preds,
                             const std::vector<int>& addon_ids, const PersonContextConfig& cfg, const FeatureMap& fm) {
  const auto maps = build_heatmaps(preds, addon_ids, cfg.heatmap, image.size, fm.stride);
  image.extra = pool_boxes(heatmap_features(maps, cfg.heatmap), image.boxes, cfg.heatmap_grid);
}

std::vector<AttachmentPair> infer_attachments(const DetectionSet& addon_dets, const std::vector<PersonPrediction>& preds,
                                              const std::vector<int>& addon_ids, const HeatmapParams& hp) {
  std::vector<AttachmentPair> out;
  if (preds.empty()) return out;
  for (size_t i = 0; i < addon_dets.size(); ++i) {
    const auto it = std::find(addon_ids.begin(), addon_ids.end(), addon_dets[i].category_id);
    if (it == addon_ids.end()) continue;
    const size_t k = static_cast<size_t>(it - addon_ids.begin());
    size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (size_t d = 0; d < preds.size(); ++d) {
      const double v = heatmap_value(preds[d], k, addon_dets[i].box.cx(), addon_dets[i].box.cy(), hp);
      if (v > best_v || (v == best_v && preds[d].person_score > preds[best].person_score)) {
        best = d;
        best_v = v;
      }
    }
    out.push_back({i, best, best_v});
  }
  return out;
}

std::string attachments_csv(const std::vector<AttachmentRecord>& rows, const SceneSet& scenes) {
  std::ostringstream os;
  auto box = [](const BoundingBox& b) {
    return format_double(b.x) + " " + format_double(b.y) + " " + format_double(b.w) + " " + format_double(b.h);
  };
  os << "image_id,addon_category,addon_box,person_box,heatmap_value\n";
  for (const auto& r : rows) {
    os << r.image_id << ',' << scenes.category(r.addon_category).name << ',' << box(r.addon_box) << ','
       << box(r.person_box) << ',' << format_double(r.heatmap_value) << '\n';
  }
  return os.str();
}

}  // namespace ctxdet
