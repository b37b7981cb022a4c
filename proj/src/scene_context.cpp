#include "ctxdet/scene_context.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "ctxdet/error.hpp"
#include "ctxdet/eval.hpp"
#include "ctxdet/io.hpp"
#include "ctxdet/rng.hpp"

namespace ctxdet {

namespace {

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace

double noisy_or(const std::vector<double>& p) {
  double q = 1.0;
  for (double v : p) q *= 1.0 - v;
  return 1.0 - q;
}

ParamBundle init_mil(int input_dim, int hidden, const std::vector<int>& class_ids, std::uint64_t seed) {
  ParamBundle p;
  p.seed = seed;
  Rng rng = make_rng(seed, "mil/init");
  init_uniform(p.add(LinearLayer("fc6", hidden, input_dim)), rng);
  init_uniform(p.add(LinearLayer("fc7", hidden, hidden)), rng);
  init_uniform(p.add(LinearLayer("mil_cls", static_cast<int>(class_ids.size()), hidden)), rng);
  p.variant = "mil";
  p.meta["kind"] = "mil";
  p.meta["class_ids"] = class_ids;
  p.meta["input_dim"] = input_dim;
  p.meta["hidden"] = hidden;
  return p;
}

std::vector<int> mil_class_ids(const ParamBundle& mil) { return mil.meta.at("class_ids").get<std::vector<int>>(); }

Matrix mil_region_probs(const ParamBundle& mil, const Matrix& pooled) {
  return sigmoid_forward(mil.layer("mil_cls").forward(trunk_features(mil, pooled)));
}

Vector mil_image_probs(const ParamBundle& mil, const Matrix& pooled) {
  const Eigen::Index k = mil.layer("mil_cls").out_dim();
  if (pooled.rows() == 0) return Vector::Zero(k);
  const Matrix p = mil_region_probs(mil, pooled);
  Vector out(k);
  for (Eigen::Index c = 0; c < k; ++c) out[c] = 1.0 - (1.0 - p.col(c).array()).prod();
  return out;
}

std::vector<MILBag> mil_bags(const Dataset& data, const std::vector<PreparedImage>& images,
                             const std::vector<int>& class_ids) {
  std::vector<MILBag> out;
  for (const auto& im : images) {
    MILBag bag;
    bag.image_id = im.image_id;
    bag.pooled = im.pooled;
    bag.labels.assign(class_ids.size(), 0);
    for (size_t idx : data.scenes.annotation_indices(im.image_id)) {
      const Annotation& a = data.scenes.annotations[idx];
      if (a.ignore) continue;
      const auto it = std::find(class_ids.begin(), class_ids.end(), a.category_id);
      if (it != class_ids.end()) bag.labels[static_cast<size_t>(it - class_ids.begin())] = 1;
    }
    out.push_back(std::move(bag));
  }
  return out;
}

double mil_loss(const ParamBundle& mil, const MILBag& bag, bool train_trunk, ParamBundle* grads) {
  const Eigen::Index k = mil.layer("mil_cls").out_dim();
  if (static_cast<Eigen::Index>(bag.labels.size()) != k) throw ShapeMismatch("mil_loss: label count");
  if (bag.pooled.rows() == 0) {
    double loss = 0.0;
    for (int y : bag.labels) loss += y ? -std::log(kProbEpsilon) : 0.0;
    return loss;
  }
  const Matrix h6 = tanh_forward(mil.layer("fc6").forward(bag.pooled));
  const Matrix h7 = tanh_forward(mil.layer("fc7").forward(h6));
  const Matrix z = mil.layer("mil_cls").forward(h7);
  const Matrix p = sigmoid_forward(z);
  Matrix dz = Matrix::Zero(p.rows(), k);
  double loss = 0.0;
  for (Eigen::Index c = 0; c < k; ++c) {
    // log(1 - p_i) = -sum_r softplus(z_r), kept in log space so that
    // saturated bags still have a gradient.
    double log_q = 0.0;
    for (Eigen::Index r = 0; r < z.rows(); ++r) log_q -= softplus(z(r, c));
    if (bag.labels[static_cast<size_t>(c)]) {
      const double pi = -std::expm1(log_q);
      loss -= std::log(pi);
      dz.col(c) = -(std::exp(log_q) / pi) * p.col(c);
    } else {
      loss -= log_q;
      dz.col(c) = p.col(c);
    }
  }
  if (!grads) return loss;
  const Matrix dh7 = mil.layer("mil_cls").backward(h7, dz, grads->layer("mil_cls"));
  if (train_trunk) {
    const Matrix dh6 = tanh_backward(h6, mil.layer("fc7").backward(h6, tanh_backward(h7, dh7), grads->layer("fc7")));
    mil.layer("fc6").accumulate(bag.pooled, dh6, grads->layer("fc6"));
  }
  return loss;
}

nlohmann::json mil_config_to_json(const MILTrainConfig& c) {
  return {{"hidden", c.hidden}, {"epochs", c.epochs}, {"lr", c.lr}, {"train_trunk", c.train_trunk}, {"seed", c.seed}};
}

MILTrainConfig mil_config_from_json(const nlohmann::json& j, MILTrainConfig c) {
  try {
    if (j.contains("hidden")) c.hidden = j.at("hidden").get<int>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("train_trunk")) c.train_trunk = j.at("train_trunk").get<bool>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("mil config: ") + e.what());
  }
  if (c.hidden < 1 || c.epochs < 0 || c.lr < 0) throw ConfigError("mil config: out-of-range value");
  return c;
}

MILTrainLog train_mil(ParamBundle& mil, const std::vector<MILBag>& bags, const MILTrainConfig& cfg) {
  MILTrainLog log;
  ParamBundle grads = mil.zeros_like();
  std::vector<size_t> order(bags.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, "mil/epoch/" + std::to_string(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (size_t idx : order) {
      grads.set_zero();
      total += mil_loss(mil, bags[idx], cfg.train_trunk, &grads);
      sgd_step(mil, grads, cfg.lr);
    }
    log.epoch_loss.push_back(bags.empty() ? 0.0 : total / static_cast<double>(bags.size()));
  }
  return log;
}

std::vector<double> image_classification_ap(const ParamBundle& mil, const std::vector<MILBag>& bags) {
  const size_t k = static_cast<size_t>(mil.layer("mil_cls").out_dim());
  std::vector<Vector> probs;
  for (const auto& b : bags) probs.push_back(mil_image_probs(mil, b.pooled));
  std::vector<double> out;
  for (size_t c = 0; c < k; ++c) {
    std::vector<size_t> order(bags.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return probs[a][static_cast<Eigen::Index>(c)] > probs[b][static_cast<Eigen::Index>(c)];
    });
    std::vector<double> scores;
    std::vector<MatchLabel> labels;
    int positives = 0;
    for (size_t i : order) {
      scores.push_back(probs[i][static_cast<Eigen::Index>(c)]);
      labels.push_back(bags[i].labels[c] ? MatchLabel::TruePositive : MatchLabel::FalsePositive);
      positives += bags[i].labels[c];
    }
    out.push_back(average_precision(scores, labels, positives));
  }
  return out;
}

ContextSet select_context_regions(const std::vector<BoundingBox>& regions, const Matrix& region_probs, ImageSize image,
                                  int top_t) {
  if (static_cast<Eigen::Index>(regions.size()) != region_probs.rows()) {
    throw ShapeMismatch("select_context_regions: regions and probabilities differ in length");
  }
  std::vector<double> pr(regions.size());
  for (size_t r = 0; r < regions.size(); ++r) pr[r] = region_probs.row(static_cast<Eigen::Index>(r)).maxCoeff();
  std::vector<int> order(regions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return pr[a] > pr[b]; });
  ContextSet set;
  const size_t n = std::min(order.size(), static_cast<size_t>(std::max(top_t, 0)));
  for (size_t i = 0; i < n; ++i) {
    set.boxes.push_back(regions[order[i]]);
    set.p.push_back(pr[order[i]]);
    set.region_index.push_back(order[i]);
  }
  set.boxes.push_back({0.0, 0.0, static_cast<double>(image.width), static_cast<double>(image.height)});
  set.p.push_back(std::numeric_limits<double>::quiet_NaN());
  set.region_index.push_back(-1);
  return set;
}

namespace {

double dist2(const Point4& a, const Point4& b) {
  double s = 0.0;
  for (int i = 0; i < 4; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

int nearest_centroid(const std::vector<Point4>& centroids, const Point4& p) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t k = 0; k < centroids.size(); ++k) {
    const double d = dist2(centroids[k], p);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

KMeansResult kmeans(const std::vector<Point4>& points, int k, std::uint64_t seed, int max_iter, double tol) {
  if (k < 1) throw Error("kmeans: k must be positive");
  const std::set<Point4> distinct(points.begin(), points.end());
  if (static_cast<int>(distinct.size()) < k) {
    throw Error("kmeans: " + std::to_string(distinct.size()) + " distinct points for " + std::to_string(k) + " clusters");
  }
  Rng rng = make_rng(seed, "kmeans");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const size_t n = points.size();
  KMeansResult r;
  r.centroids.push_back(points[std::uniform_int_distribution<size_t>(0, n - 1)(rng)]);
  std::vector<double> d2(n);
  for (size_t i = 0; i < n; ++i) d2[i] = dist2(points[i], r.centroids[0]);
  while (static_cast<int>(r.centroids.size()) < k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    size_t pick = 0;
    double target = u(rng) * total;
    for (size_t i = 0; i < n; ++i) {
      if (d2[i] <= 0.0) continue;
      pick = i;
      target -= d2[i];
      if (target < 0.0) break;
    }
    r.centroids.push_back(points[pick]);
    for (size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], dist2(points[i], points[pick]));
  }
  r.assignment.assign(n, 0);
  for (int it = 0; it < max_iter; ++it) {
    for (size_t i = 0; i < n; ++i) r.assignment[i] = nearest_centroid(r.centroids, points[i]);
    std::vector<Point4> sums(static_cast<size_t>(k), Point4{});
    std::vector<size_t> counts(static_cast<size_t>(k), 0);
    for (size_t i = 0; i < n; ++i) {
      const auto c = static_cast<size_t>(r.assignment[i]);
      for (int j = 0; j < 4; ++j) sums[c][j] += points[i][j];
      ++counts[c];
    }
    double movement = 0.0;
    std::vector<Point4> next(static_cast<size_t>(k));
    std::vector<bool> taken(n, false);
    for (size_t c = 0; c < static_cast<size_t>(k); ++c) {
      if (counts[c] == 0) {
        size_t far = 0;
        double far_d = -1.0;
        for (size_t i = 0; i < n; ++i) {
          const double d = dist2(points[i], r.centroids[static_cast<size_t>(r.assignment[i])]);
          if (!taken[i] && d > far_d) {
            far_d = d;
            far = i;
          }
        }
        taken[far] = true;
        next[c] = points[far];
      } else {
        for (int j = 0; j < 4; ++j) next[c][j] = sums[c][j] / static_cast<double>(counts[c]);
      }
      movement = std::max(movement, std::sqrt(dist2(next[c], r.centroids[c])));
    }
    r.centroids = std::move(next);
    r.iterations = it + 1;
    for (size_t i = 0; i < n; ++i) r.assignment[i] = nearest_centroid(r.centroids, points[i]);
    double sse = 0.0;
    for (size_t i = 0; i < n; ++i) sse += dist2(points[i], r.centroids[static_cast<size_t>(r.assignment[i])]);
    r.sse.push_back(sse);
    if (movement < tol) break;
  }
  return r;
}

void RelationCodebook::validate() const {
  if (centroids.empty()) throw Error("codebook: no centroids");
  if (std::set<Point4>(centroids.begin(), centroids.end()).size() != centroids.size()) {
    throw Error("codebook: centroids are not distinct");
  }
  for (size_t i = 1; i < thresholds.size(); ++i)
    if (!(thresholds[i] > thresholds[i - 1])) throw Error("codebook: thresholds must be strictly increasing");
}

RelationCodebook fit_relation_codebook(const std::vector<Point4>& descriptors, int clusters, std::uint64_t seed,
                                       std::vector<double> thresholds) {
  const KMeansResult km = kmeans(descriptors, clusters, seed);
  RelationCodebook cb;
  cb.centroids = km.centroids;
  cb.thresholds = std::move(thresholds);
  cb.seed = seed;
  cb.provenance = {{"pairs", descriptors.size()}, {"iterations", km.iterations},
                   {"sse", km.sse.empty() ? 0.0 : km.sse.back()}};
  cb.validate();
  return cb;
}

nlohmann::json codebook_to_json(const RelationCodebook& cb) {
  nlohmann::json c = nlohmann::json::array();
  for (const auto& p : cb.centroids) c.push_back(p);
  return {{"format", "ctxdet-codebook"}, {"version", 1}, {"centroids", c}, {"thresholds", cb.thresholds},
          {"seed", cb.seed}, {"provenance", cb.provenance}};
}

RelationCodebook codebook_from_json(const nlohmann::json& j) {
  RelationCodebook cb;
  try {
    for (const auto& p : j.at("centroids")) cb.centroids.push_back(p.get<Point4>());
    cb.thresholds = j.at("thresholds").get<std::vector<double>>();
    cb.seed = j.value("seed", std::uint64_t{0});
    cb.provenance = j.value("provenance", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("codebook", e.what());
  }
  cb.validate();
  return cb;
}

void save_codebook(const RelationCodebook& cb, const std::filesystem::path& path) {
  write_file_atomic(path, codebook_to_json(cb).dump(1) + "\n");
}

RelationCodebook load_codebook(const std::filesystem::path& path) { nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string(), e.what());
  }
  return codebook_from_json(j); }

RelationFire relation_fire(const RelationCodebook& cb, const BoundingBox& c, const BoundingBox& b) {
  RelationFire f;
  f.cluster = nearest_centroid(cb.centroids, relation_descriptor(c, b).as_array());
  const double o = iou(c, b);
  for (double t : cb.thresholds) {
    if (o >= t) ++f.overlaps;
    else break;
  }
  return f;
}

std::vector<int> relation_indicator(const RelationCodebook& cb, const BoundingBox& c, const BoundingBox& b) {
  std::vector<int> out(static_cast<size_t>(cb.size()), 0);
  out[static_cast<size_t>(nearest_centroid(cb.centroids, relation_descriptor(c, b).as_array()))] = 1;
  const double o = iou(c, b);
  for (size_t t = 0; t < cb.thresholds.size(); ++t) out[cb.centroids.size() + t] = o >= cb.thresholds[t] ? 1 : 0;
  return out;
}

std::vector<Point4> codebook_pairs(const std::vector<ContextSet>& contexts, const std::vector<PreparedImage>& images,
                                   size_t max_pairs, std::uint64_t seed) {
  if (contexts.size() > images.size()) throw ShapeMismatch("codebook_pairs: more context sets than images");
  std::vector<Point4> out;
  for (size_t i = 0; i < contexts.size(); ++i)
    for (const auto& c : contexts[i].boxes)
      for (const auto& b : images[i].boxes) out.push_back(relation_descriptor(c, b).as_array());
  if (out.size() > max_pairs) {
    Rng rng = make_rng(seed, "codebook/pairs");
    std::shuffle(out.begin(), out.end(), rng);
    out.resize(max_pairs);
  }
  return out;
}

SceneVariant parse_scene_variant(const std::string& name) {
  if (name == "full") return SceneVariant::Full;
  if (name == "coarse") return SceneVariant::Coarse;
  if (name == "linear") return SceneVariant::Linear;
  if (name == "global") return SceneVariant::GlobalOnly;
  if (name == "neighborhood") return SceneVariant::Neighborhood;
  if (name == "nocontext") return SceneVariant::NoContext;
  throw ConfigError("unknown scene variant '" + name + "'");
}

std::string scene_variant_name(SceneVariant v) {
  switch (v) {
    case SceneVariant::Full: return "full";
    case SceneVariant::Coarse: return "coarse";
    case SceneVariant::Linear: return "linear";
    case SceneVariant::GlobalOnly: return "global";
    case SceneVariant::Neighborhood: return "neighborhood";
    case SceneVariant::NoContext: return "nocontext";
  }
  return "";
}

nlohmann::json scene_head_config_to_json(const SceneHeadConfig& c) {
  return {{"d1", c.d1},
          {"d2", c.d2},
          {"T", c.top_t},
          {"clusters", c.clusters},
          {"coarse_clusters", c.coarse_clusters},
          {"coarse_overlaps", c.coarse_overlaps},
          {"codebook_pairs", c.codebook_pairs},
          {"codebook_scenes", c.codebook_scenes}};
}

SceneHeadConfig scene_head_config_from_json(const nlohmann::json& j, SceneHeadConfig c) {
  try {
    if (j.contains("d1")) c.d1 = j.at("d1").get<int>();
    if (j.contains("d2")) c.d2 = j.at("d2").get<int>();
    if (j.contains("T")) c.top_t = j.at("T").get<int>();
    if (j.contains("clusters")) c.clusters = j.at("clusters").get<int>();
    if (j.contains("coarse_clusters")) c.coarse_clusters = j.at("coarse_clusters").get<int>();
    if (j.contains("coarse_overlaps")) c.coarse_overlaps = j.at("coarse_overlaps").get<bool>();
    if (j.contains("codebook_pairs")) c.codebook_pairs = j.at("codebook_pairs").get<size_t>();
    if (j.contains("codebook_scenes")) c.codebook_scenes = j.at("codebook_scenes").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scene config: ") + e.what());
  }
  if (c.d1 < 1 || c.d2 < 1 || c.top_t < 0 || c.clusters < 1 || c.coarse_clusters < 1 || c.codebook_scenes < 1) {
    throw ConfigError("scene config: out-of-range value");
  }
  return c;
}

bool has_scene_branch(SceneVariant v) {
  return v == SceneVariant::Full || v == SceneVariant::Coarse || v == SceneVariant::Linear ||
         v == SceneVariant::GlobalOnly;
}

bool is_linear(SceneVariant v) { return v == SceneVariant::Linear; }

int scene_branch_dim(SceneVariant v, const SceneHeadConfig& cfg) {
  if (!has_scene_branch(v)) return 0;
  return is_linear(v) ? cfg.d1 : cfg.d2;
}

std::string relation_layer_name(int k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "rel_%02d", k);
  return buf;
}

void add_scene_layers(ParamBundle& params, int relations, int feature_dim, bool linear, const SceneHeadConfig& cfg,
                      std::uint64_t seed) {
  Rng rng = make_rng(seed, "scene/init");
  for (int k = 0; k < relations; ++k) init_uniform(params.add(LinearLayer(relation_layer_name(k), cfg.d1, feature_dim, false)), rng);
  if (!linear) init_uniform(params.add(LinearLayer("proj2", cfg.d2, cfg.d1, false)), rng);
  params.meta["relations"] = relations;
  params.meta["linear"] = linear;
  params.meta["d1"] = cfg.d1;
  params.meta["d2"] = cfg.d2;
}

Vector context_feature(const ParamBundle& params, const RelationCodebook& cb, const Vector& fc, const BoundingBox& c,
                       const BoundingBox& b) {
  const RelationFire f = relation_fire(cb, c, b);
  Vector phi = params.layer(relation_layer_name(f.cluster)).weights * fc;
  for (int t = 0; t < f.overlaps; ++t)
    phi += params.layer(relation_layer_name(static_cast<int>(cb.centroids.size()) + t)).weights * fc;
  return phi;
}

Vector combine_context(const ParamBundle& params, const std::vector<Vector>& phis, bool linear) {
  if (phis.empty()) throw Error("combine_context: no contexts");
  if (linear) {
    Vector s = Vector::Zero(phis[0].size());
    for (const auto& p : phis) s += p;
    return s;
  }
  const Matrix& w2 = params.layer("proj2").weights;
  Vector s = Vector::Zero(w2.rows());
  for (const auto& p : phis) s += (w2 * p).array().tanh().matrix();
  return s.array().tanh().matrix();
}

SceneContextBranch::SceneContextBranch(const RelationCodebook& cb, const SceneContextMap& contexts, bool linear, int d1,
                                       int d2)
    : cb_(cb), contexts_(contexts), linear_(linear), d1_(d1), d2_(d2) {}

std::vector<std::string> SceneContextBranch::layer_names() const {
  std::vector<std::string> out;
  for (int k = 0; k < cb_.size(); ++k) out.push_back(relation_layer_name(k));
  if (!linear_) out.push_back("proj2");
  return out;
}

Matrix SceneContextBranch::forward(const ParamBundle& params, const PreparedImage& image, const std::vector<int>& rows) {
  const auto it = contexts_.find(image.image_id);
  if (it == contexts_.end()) throw Error("scene context: no contexts for image " + std::to_string(image.image_id));
  ctx_ = &it->second;
  nc_ = static_cast<Eigen::Index>(ctx_->boxes.size());
  if (limit_ >= 0) nc_ = std::min<Eigen::Index>(nc_, limit_);
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  const int relations = cb_.size();
  std::vector<Matrix> proj(static_cast<size_t>(relations));
  for (int k = 0; k < relations; ++k) {
    proj[static_cast<size_t>(k)] = ctx_->features.topRows(nc_) * params.layer(relation_layer_name(k)).weights.transpose();
  }
  const int nclusters = static_cast<int>(cb_.centroids.size());
  fires_.assign(static_cast<size_t>(n * nc_), {});
  phi_.setZero(n * nc_, d1_);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < nc_; ++c) {
      const Eigen::Index pair = i * nc_ + c;
      const RelationFire f = relation_fire(cb_, ctx_->boxes[static_cast<size_t>(c)], image.boxes[static_cast<size_t>(rows[i])]);
      fires_[static_cast<size_t>(pair)] = f;
      phi_.row(pair) = proj[static_cast<size_t>(f.cluster)].row(c);
      for (int t = 0; t < f.overlaps; ++t) phi_.row(pair) += proj[static_cast<size_t>(nclusters + t)].row(c);
    }
  }
  Matrix out;
  if (linear_) {
    out.setZero(n, d1_);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index c = 0; c < nc_; ++c) out.row(i) += phi_.row(i * nc_ + c);
  } else {
    s_ = tanh_forward(params.layer("proj2").forward(phi_));
    Matrix u = Matrix::Zero(n, d2_);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index c = 0; c < nc_; ++c) u.row(i) += s_.row(i * nc_ + c);
    psi_ = tanh_forward(u);
    out = psi_;
  }
  return scale_ * out;
}

void SceneContextBranch::backward(const ParamBundle& params, const Matrix& d_out, ParamBundle& grads) {
  if (!ctx_) throw Error("scene context: backward before forward");
  const Eigen::Index n = d_out.rows();
  const Matrix d = scale_ * d_out;
  Matrix dphi(n * nc_, d1_);
  if (linear_) {
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index c = 0; c < nc_; ++c) dphi.row(i * nc_ + c) = d.row(i);
  } else {
    const Matrix du = tanh_backward(psi_, d);
    Matrix ds(n * nc_, d2_);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index c = 0; c < nc_; ++c) ds.row(i * nc_ + c) = du.row(i);
    dphi = params.layer("proj2").backward(phi_, tanh_backward(s_, ds), grads.layer("proj2"));
  }
  const int relations = cb_.size();
  const int nclusters = static_cast<int>(cb_.centroids.size());
  std::vector<Matrix> acc(static_cast<size_t>(relations), Matrix::Zero(nc_, d1_));
  std::vector<bool> used(static_cast<size_t>(relations), false);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < nc_; ++c) {
      const Eigen::Index pair = i * nc_ + c;
      const RelationFire& f = fires_[static_cast<size_t>(pair)];
      acc[static_cast<size_t>(f.cluster)].row(c) += dphi.row(pair);
      used[static_cast<size_t>(f.cluster)] = true;
      for (int t = 0; t < f.overlaps; ++t) {
        acc[static_cast<size_t>(nclusters + t)].row(c) += dphi.row(pair);
        used[static_cast<size_t>(nclusters + t)] = true;
      }
    }
  }
  const Matrix f = ctx_->features.topRows(nc_);
  for (int k = 0; k < relations; ++k) {
    if (!used[static_cast<size_t>(k)]) continue;
    const std::string name = relation_layer_name(k);
    params.layer(name).accumulate(f, acc[static_cast<size_t>(k)], grads.layer(name));
  }
}

SceneImageContext build_image_context(const ParamBundle& trunk, const FeatureMap& fm, const ContextSet& set, int grid) {
  SceneImageContext ctx;
  ctx.boxes = set.boxes;
  ctx.features = trunk_features(trunk, pool_boxes(fm, set.boxes, grid));
  return ctx;
}

Matrix neighborhood_features(const ParamBundle& trunk, const FeatureMap& fm, const std::vector<BoundingBox>& boxes,
                             ImageSize image, int grid) {
  std::vector<BoundingBox> two, four;
  for (const auto& b : boxes) {
    two.push_back(expand_box(b, 2.0, image));
    four.push_back(expand_box(b, 4.0, image));
  }
  const Matrix a = trunk_features(trunk, pool_boxes(fm, two, grid));
  const Matrix c = trunk_features(trunk, pool_boxes(fm, four, grid));
  Matrix out(a.rows(), a.cols() + c.cols());
  out << a, c;
  return out;
}

std::vector<ScoreTraceRow> score_evolution(const ParamBundle& params, const RelationCodebook& cb,
                                           const SceneImageContext& ctx, const PreparedImage& image, int row) {
  if (!params.meta.value("linear", false)) throw Error("score_evolution: needs a linear context head");
  const int d1 = params.meta.at("d1").get<int>();
  const int d2 = params.meta.at("d2").get<int>();
  SceneContextMap map{{image.image_id, ctx}};
  SceneContextBranch branch(cb, map, true, d1, d2);
  std::vector<ScoreTraceRow> out;
  const int steps = static_cast<int>(ctx.boxes.size());
  const double scale_base = kContextTopT + 1;
  for (int t = 0; t <= steps; ++t) {
    branch.set_limit(t);
    branch.set_scale(t == 0 ? 0.0 : scale_base / t);
    const DetectorOutput o = detector_forward(params, image, {row}, &branch);
    ScoreTraceRow r;
    r.step = t;
    if (t > 0) r.context = ctx.boxes[static_cast<size_t>(t - 1)];
    for (Eigen::Index k = 1; k < o.probs.cols(); ++k) r.scores.push_back(o.probs(0, k));
    out.push_back(std::move(r));
  }
  return out;
}

std::string score_trace_csv(const std::vector<ScoreTrace>& traces, const std::vector<std::string>& class_names) {
  auto box = [](const BoundingBox& b) {
    return format_double(b.x) + " " + format_double(b.y) + " " + format_double(b.w) + " " + format_double(b.h);
  };
  std::ostringstream os;
  os << "image_id,box,step,context_box";
  for (const auto& n : class_names) os << ',' << n;
  os << '\n';
  for (const auto& tr : traces) {
    for (const auto& r : tr.rows) {
      os << tr.image_id << ',' << box(tr.box) << ',' << r.step << ',' << (r.step == 0 ? std::string() : box(r.context));
      for (double s : r.scores) os << ',' << format_double(s);
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace ctxdet
