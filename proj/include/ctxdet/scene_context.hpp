#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ctxdet/dataset.hpp"
#include "ctxdet/detector.hpp"
#include "ctxdet/feature_map.hpp"
#include "ctxdet/nn.hpp"

namespace ctxdet {

inline constexpr int kContextTopT = 15;
inline constexpr int kRelationClusters = 48;
inline constexpr int kCoarseClusters = 4;
inline const std::vector<double> kOverlapThresholds{0.5, 0.6, 0.7, 0.8, 0.9, 1.0};

// ---- Noisy-Or MIL ----------------------------------------------------------

// 1 - prod(1 - p_r); empty -> 0.
double noisy_or(const std::vector<double>& p);

// Layers fc6, fc7 (tanh) and mil_cls (sigmoid, one per category).
ParamBundle init_mil(int input_dim, int hidden, const std::vector<int>& class_ids, std::uint64_t seed);
std::vector<int> mil_class_ids(const ParamBundle& mil);

// p_ir for every region: N x K.
Matrix mil_region_probs(const ParamBundle& mil, const Matrix& pooled);
// p_i per category; an empty bag gives zeros.
Vector mil_image_probs(const ParamBundle& mil, const Matrix& pooled);

struct MILBag {
  int image_id = 0;
  Matrix pooled;          // regions x (C * G^2)
  std::vector<int> labels;  // y_i per category, in mil class order
};

// One bag per image over its proposals; labels from non-ignored GT.
std::vector<MILBag> mil_bags(const Dataset& data, const std::vector<PreparedImage>& images,
                             const std::vector<int>& class_ids);

// Sum over categories of -y log p_i - (1 - y) log(1 - p_i) for one bag,
// evaluated in log space (no probability clamp). An empty bag has p_i = 0
// and a positive label then costs -log(kProbEpsilon).
double mil_loss(const ParamBundle& mil, const MILBag& bag, bool train_trunk, ParamBundle* grads);

struct MILTrainConfig {
  int hidden = 64;
  int epochs = 20;
  double lr = 0.05;
  bool train_trunk = true;
  std::uint64_t seed = 0;
};

nlohmann::json mil_config_to_json(const MILTrainConfig& c);
MILTrainConfig mil_config_from_json(const nlohmann::json& j, MILTrainConfig base = {});

struct MILTrainLog {
  std::vector<double> epoch_loss;
};

// SGD, one bag per step, seeded order per epoch.
MILTrainLog train_mil(ParamBundle& mil, const std::vector<MILBag>& bags, const MILTrainConfig& cfg);

// Image-classification AP per category (images ranked by p_i).
std::vector<double> image_classification_ap(const ParamBundle& mil, const std::vector<MILBag>& bags);

// ---- Context regions -------------------------------------------------------

struct ContextSet {
  std::vector<BoundingBox> boxes;
  std::vector<double> p;          // max_i p_ir; NaN for the full image
  std::vector<int> region_index;  // index into the regions, -1 for the full image
};

// Top T regions by max_i p_ir (ties to the lower index), then the full image.
ContextSet select_context_regions(const std::vector<BoundingBox>& regions, const Matrix& region_probs, ImageSize image,
                                  int top_t = kContextTopT);

// ---- Relation codebook -----------------------------------------------------

using Point4 = std::array<double, 4>;

struct KMeansResult {
  std::vector<Point4> centroids;
  std::vector<int> assignment;
  std::vector<double> sse;  // within-cluster SSE after each Lloyd iteration
  int iterations = 0;
};

// k-means++ seeding, Lloyd iterations until centroid movement < tol or
// max_iter; empty clusters reseeded from the point farthest from its centroid.
// Throws Error when there are fewer distinct points than k.
KMeansResult kmeans(const std::vector<Point4>& points, int k, std::uint64_t seed, int max_iter = 100,
                    double tol = 1e-6);

// Nearest centroid by squared distance, ties to the lower index.
int nearest_centroid(const std::vector<Point4>& centroids, const Point4& p);

struct RelationCodebook {
  std::vector<Point4> centroids;
  std::vector<double> thresholds;
  std::uint64_t seed = 0;
  nlohmann::json provenance = nlohmann::json::object();

  int size() const { return static_cast<int>(centroids.size() + thresholds.size()); }
  void validate() const;
};

RelationCodebook fit_relation_codebook(const std::vector<Point4>& descriptors, int clusters, std::uint64_t seed,
                                       std::vector<double> thresholds = kOverlapThresholds);

nlohmann::json codebook_to_json(const RelationCodebook& cb);
RelationCodebook codebook_from_json(const nlohmann::json& j);
void save_codebook(const RelationCodebook& cb, const std::filesystem::path& path);
RelationCodebook load_codebook(const std::filesystem::path& path);

// Compact form of the indicator: the cluster bit plus the number of
// leading overlap bits set (the overlap block is monotone).
struct RelationFire {
  int cluster = 0;
  int overlaps = 0;
};

RelationFire relation_fire(const RelationCodebook& cb, const BoundingBox& c, const BoundingBox& b);
// Dense K-length 0/1 vector: cluster block then overlap block.
std::vector<int> relation_indicator(const RelationCodebook& cb, const BoundingBox& c, const BoundingBox& b);

// relation_descriptor(c, b) for every (context, proposal) pair, shuffled with
// `seed` and truncated to max_pairs.
std::vector<Point4> codebook_pairs(const std::vector<ContextSet>& contexts, const std::vector<PreparedImage>& images,
                                   size_t max_pairs, std::uint64_t seed);

// ---- Context head ----------------------------------------------------------

enum class SceneVariant { Full, Coarse, Linear, GlobalOnly, Neighborhood, NoContext };

SceneVariant parse_scene_variant(const std::string& name);
std::string scene_variant_name(SceneVariant v);

struct SceneHeadConfig {
  int d1 = 8;
  int d2 = 64;
  int top_t = kContextTopT;
  int clusters = kRelationClusters;
  int coarse_clusters = kCoarseClusters;
  bool coarse_overlaps = false;
  size_t codebook_pairs = 100000;
  int codebook_scenes = 200;
};

nlohmann::json scene_head_config_to_json(const SceneHeadConfig& c);
SceneHeadConfig scene_head_config_from_json(const nlohmann::json& j, SceneHeadConfig base = {});

// Whether the variant has a ContextBranch, and whether it is the linear combination.
bool has_scene_branch(SceneVariant v);
bool is_linear(SceneVariant v);
int scene_branch_dim(SceneVariant v, const SceneHeadConfig& cfg);

// Adds rel_00.. (d1 x feature_dim, one per relation) and, unless linear,
// proj2 (d2 x d1); neither has a bias.
void add_scene_layers(ParamBundle& params, int relations, int feature_dim, bool linear, const SceneHeadConfig& cfg,
                      std::uint64_t seed);

std::string relation_layer_name(int k);

// phi(c, b) = sum over fired k of W_k f(c).
Vector context_feature(const ParamBundle& params, const RelationCodebook& cb, const Vector& fc, const BoundingBox& c,
                       const BoundingBox& b);
// Full: tanh(sum_c tanh(W2 phi_c)); linear: sum_c phi_c.
Vector combine_context(const ParamBundle& params, const std::vector<Vector>& phis, bool linear);

// Context boxes of one image with their (frozen) features f(c).
struct SceneImageContext {
  std::vector<BoundingBox> boxes;
  Matrix features;  // contexts x feature_dim
};

using SceneContextMap = std::map<int, SceneImageContext>;

// Batched context_feature + combine_context over many proposals.
class SceneContextBranch : public ContextBranch {
 public:
  SceneContextBranch(const RelationCodebook& cb, const SceneContextMap& contexts, bool linear, int d1, int d2);

  int dim() const override { return linear_ ? d1_ : d2_; }
  std::vector<std::string> layer_names() const override;
  Matrix forward(const ParamBundle& params, const PreparedImage& image, const std::vector<int>& rows) override;
  void backward(const ParamBundle& params, const Matrix& d_out, ParamBundle& grads) override;

  // Uses only the first `n` contexts of each image (negative: all) and
  // multiplies the output by `scale`.
  void set_limit(int n) { limit_ = n; }
  void set_scale(double s) { scale_ = s; }

 private:
  const RelationCodebook& cb_;
  const SceneContextMap& contexts_;
  bool linear_;
  int d1_, d2_;
  int limit_ = -1;
  double scale_ = 1.0;

  // Forward cache.
  const SceneImageContext* ctx_ = nullptr;
  Eigen::Index nc_ = 0;
  std::vector<RelationFire> fires_;  // rows x nc
  Matrix phi_;                       // rows*nc x d1
  Matrix s_;                         // rows*nc x d2
  Matrix psi_;                       // rows x d2
};

// Frozen fc7 of `trunk` over the context boxes.
SceneImageContext build_image_context(const ParamBundle& trunk, const FeatureMap& fm, const ContextSet& set, int grid);

// Trunk features at the 2x and 4x enlarged (clipped) boxes, concatenated.
Matrix neighborhood_features(const ParamBundle& trunk, const FeatureMap& fm, const std::vector<BoundingBox>& boxes,
                             ImageSize image, int grid);

struct ScoreTraceRow {
  int step = 0;
  BoundingBox context;        // box added at this step (full image entry included)
  std::vector<double> scores;  // per class, detector class order
};

// Linear head only: step t uses the first t contexts scaled by 16 / t;
// step 0 is appearance only. Throws Error for a non-linear head.
std::vector<ScoreTraceRow> score_evolution(const ParamBundle& params, const RelationCodebook& cb,
                                           const SceneImageContext& ctx, const PreparedImage& image, int row);

struct ScoreTrace {
  int image_id = 0;
  BoundingBox box;
  std::vector<ScoreTraceRow> rows;
};

// image_id,box,step,context_box,<one column per class>; boxes as "x y w h".
std::string score_trace_csv(const std::vector<ScoreTrace>& traces, const std::vector<std::string>& class_names);

}  // namespace ctxdet
