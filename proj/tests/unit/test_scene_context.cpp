#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ctxdet/error.hpp"
#include "ctxdet/scene_context.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace ctxdet;

namespace {

RelationCodebook random_codebook(std::mt19937_64& rng, int clusters) {
  std::normal_distribution<double> n(0.0, 1.0);
  RelationCodebook cb;
  for (int k = 0; k < clusters; ++k) cb.centroids.push_back({n(rng), n(rng), n(rng), n(rng)});
  cb.thresholds = kOverlapThresholds;
  return cb;
}

BoundingBox random_box(std::mt19937_64& rng, double extent) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double w = 4 + 0.4 * extent * u(rng);
  const double h = 4 + 0.4 * extent * u(rng);
  return {u(rng) * (extent - w), u(rng) * (extent - h), w, h};
}

FeatureMap random_map(std::mt19937_64& rng, int c, int h, int w, double stride) {
  FeatureMap fm(c, h, w, stride);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (float& v : fm.data) v = n(rng);
  return fm;
}

ParamBundle random_scene_detector(int input_dim, int hidden, int relations, bool linear, const SceneHeadConfig& cfg,
                                  std::uint64_t seed) {
  const int bd = linear ? cfg.d1 : cfg.d2;
  ParamBundle p = init_detector(input_dim, hidden, 0, bd, {1, 2}, seed);
  add_scene_layers(p, relations, hidden, linear, cfg, seed + 1);
  p.meta["target_scale"] = 10.0;
  return p;
}

// An image with random proposals, labels and contexts.
struct Fixture {
  FeatureMap fm;
  PreparedImage image;
  SceneContextMap contexts;
};

Fixture random_fixture(std::mt19937_64& rng, int proposals, int n_contexts, int feature_dim) {
  Fixture f;
  f.fm = random_map(rng, 2, 12, 12, 4.0);
  std::vector<BoundingBox> boxes;
  for (int i = 0; i < proposals; ++i) boxes.push_back(random_box(rng, 48));
  Annotation a1{1, 7, 1, random_box(rng, 48), {}, false};
  Annotation a2{2, 7, 2, random_box(rng, 48), {}, false};
  boxes.push_back(a1.bbox);
  boxes.push_back(a2.bbox);
  f.image = prepare_image(7, f.fm, boxes, {&a1, &a2}, 2);
  SceneImageContext ctx;
  for (int c = 0; c < n_contexts; ++c) ctx.boxes.push_back(random_box(rng, 48));
  ctx.boxes.push_back(boxes[0]);
  ctx.features = Matrix::Random(static_cast<Eigen::Index>(ctx.boxes.size()), feature_dim);
  f.contexts[7] = ctx;
  return f;
}

}  // namespace

TEST_CASE("noisy-or examples and properties") {
  CHECK(noisy_or({}) == 0.0);
  CHECK(noisy_or({0.5}) == 0.5);
  CHECK(noisy_or({0.5, 0.5}) == 0.75);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> p(1 + rng() % 10);
    for (double& v : p) v = u(rng);
    const double pi = noisy_or(p);
    CHECK(pi >= *std::max_element(p.begin(), p.end()) - 1e-15);
    auto more = p;
    more.push_back(u(rng));
    CHECK(noisy_or(more) >= pi);
    auto raised = p;
    raised[0] = std::min(1.0, raised[0] + 0.1);
    CHECK(noisy_or(raised) >= pi);
  }
}

TEST_CASE("mil image probabilities are the noisy-or of region probabilities") {
  const ParamBundle mil = init_mil(6, 5, {1, 2, 3}, 2);
  const Matrix pooled = Matrix::Random(4, 6);
  const Matrix pr = mil_region_probs(mil, pooled);
  const Vector pi = mil_image_probs(mil, pooled);
  for (int c = 0; c < 3; ++c) {
    std::vector<double> col(pr.col(c).data(), pr.col(c).data() + 4);
    CHECK(pi[c] == doctest::Approx(noisy_or(col)).epsilon(1e-14));
  }
  CHECK(mil_image_probs(mil, Matrix(0, 6)).isZero());
}

TEST_CASE("mil loss gradients match finite differences") {
  std::mt19937_64 rng(3);
  int passed = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const ParamBundle mil = init_mil(6, 5, {1, 2, 3}, 10 + trial);
    MILBag bag;
    bag.pooled = Matrix::Random(1 + static_cast<int>(rng() % 8), 6) * 2.0;
    for (int c = 0; c < 3; ++c) bag.labels.push_back(static_cast<int>(rng() % 2));
    GradCheckOptions opt;
    opt.seed = static_cast<std::uint64_t>(trial);
    const auto res =
        grad_check(mil, [&](const ParamBundle& q, ParamBundle* g) { return mil_loss(q, bag, true, g); }, opt);
    if (res.max_rel_error < 1e-4) ++passed;
  }
  CHECK(passed == 20);
}

TEST_CASE("mil loss matches the clamped definition away from saturation") {
  const ParamBundle mil = init_mil(6, 5, {1, 2}, 4);
  MILBag bag{1, Matrix::Random(3, 6) * 0.1, {1, 0}};
  const Vector pi = mil_image_probs(mil, bag.pooled);
  CHECK(mil_loss(mil, bag, true, nullptr) == doctest::Approx(nll(1, pi[0]).value + nll(0, pi[1]).value));
}

TEST_CASE("mil training separates planted bags and suppresses all-negative labels") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 0.3);
  std::vector<MILBag> bags;
  for (int i = 0; i < 120; ++i) {
    MILBag bag;
    bag.image_id = i;
    bag.pooled = Matrix::Zero(6, 8);
    for (int r = 0; r < 6; ++r)
      for (int j = 0; j < 8; ++j) bag.pooled(r, j) = n(rng);
    bag.labels = {0, 0, 0};
    for (int c = 0; c < 3; ++c) {
      if (rng() % 2) continue;
      bag.labels[static_cast<size_t>(c)] = 1;
      bag.pooled(static_cast<Eigen::Index>(rng() % 6), c) += 2.0;
    }
    bags.push_back(std::move(bag));
  }
  ParamBundle mil = init_mil(8, 16, {1, 2, 3}, 6);
  MILTrainConfig cfg;
  cfg.epochs = 30;
  const MILTrainLog log = train_mil(mil, bags, cfg);
  CHECK(log.epoch_loss.back() < log.epoch_loss.front());
  for (double ap : image_classification_ap(mil, bags)) CHECK(ap > 0.95);

  for (auto& b : bags) b.labels = {0, 0, 0};
  ParamBundle neg = init_mil(8, 16, {1, 2, 3}, 7);
  cfg.epochs = 10;
  train_mil(neg, bags, cfg);
  for (const auto& b : bags) CHECK(mil_image_probs(neg, b.pooled).maxCoeff() < 0.1);
}

TEST_CASE("context selection takes the top T plus the full image") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 30);
    std::vector<BoundingBox> regions;
    Matrix probs(n, 3);
    for (int r = 0; r < n; ++r) {
      regions.push_back(random_box(rng, 64));
      for (int c = 0; c < 3; ++c) probs(r, c) = u(rng);
    }
    const ContextSet set = select_context_regions(regions, probs, {64, 48}, 15);
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return probs.row(a).maxCoeff() > probs.row(b).maxCoeff(); });
    const size_t take = std::min<size_t>(15, static_cast<size_t>(n));
    REQUIRE(set.boxes.size() == take + 1);
    for (size_t i = 0; i < take; ++i) {
      CHECK(set.region_index[i] == order[i]);
      CHECK(set.boxes[i] == regions[static_cast<size_t>(order[i])]);
    }
    CHECK(set.boxes.back() == BoundingBox{0, 0, 64, 48});
    CHECK(set.region_index.back() == -1);
  }
  Matrix tied = Matrix::Constant(3, 1, 0.5);
  const ContextSet t = select_context_regions({{0, 0, 1, 1}, {1, 1, 1, 1}, {2, 2, 1, 1}}, tied, {8, 8}, 2);
  CHECK(t.region_index == std::vector<int>{0, 1, -1});
}

TEST_CASE("k-means recovers planted clusters") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 0.05);
  std::vector<Point4> pts;
  for (int i = 0; i < 200; ++i) pts.push_back({1 + n(rng), 1 + n(rng), n(rng), n(rng)});
  for (int i = 0; i < 200; ++i) pts.push_back({-1 + n(rng), n(rng), 2 + n(rng), n(rng)});
  const KMeansResult r = kmeans(pts, 2, 3);
  std::vector<Point4> means{{1, 1, 0, 0}, {-1, 0, 2, 0}};
  for (const auto& m : means) {
    double best = 1e9;
    for (const auto& c : r.centroids) {
      double d = 0;
      for (int j = 0; j < 4; ++j) d = std::max(d, std::abs(c[j] - m[j]));
      best = std::min(best, d);
    }
    CHECK(best < 0.05);
  }
}

TEST_CASE("k-means properties") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<Point4> pts;
  for (int i = 0; i < 300; ++i) pts.push_back({n(rng), n(rng), n(rng), n(rng)});
  const KMeansResult r = kmeans(pts, 6, 11);
  for (size_t i = 1; i < r.sse.size(); ++i) CHECK(r.sse[i] <= r.sse[i - 1] + 1e-9);
  for (size_t i = 0; i < pts.size(); ++i) CHECK(nearest_centroid(r.centroids, pts[i]) == r.assignment[i]);
  const KMeansResult again = kmeans(pts, 6, 11);
  CHECK(again.centroids == r.centroids);

  const std::vector<Point4> same(5, Point4{0.5, -1, 2, 0});
  const KMeansResult one = kmeans(same, 1, 0);
  CHECK(one.centroids[0] == Point4{0.5, -1, 2, 0});
  CHECK_THROWS_AS(kmeans(same, 2, 0), Error);
  CHECK(nearest_centroid({{0, 0, 0, 0}, {2, 0, 0, 0}}, {1, 0, 0, 0}) == 0);
}

TEST_CASE("relation indicator blocks") {
  std::mt19937_64 rng(9);
  const RelationCodebook cb = random_codebook(rng, 48);
  CHECK(cb.size() == 54);
  for (int t = 0; t < 200; ++t) {
    const BoundingBox c = random_box(rng, 64);
    const BoundingBox b = random_box(rng, 64);
    const auto bits = relation_indicator(cb, c, b);
    CHECK(std::accumulate(bits.begin(), bits.begin() + 48, 0) == 1);
    for (size_t k = 49; k < 54; ++k) CHECK(bits[k] <= bits[k - 1]);
    const RelationFire f = relation_fire(cb, c, b);
    CHECK(bits[static_cast<size_t>(f.cluster)] == 1);
    CHECK(std::accumulate(bits.begin() + 48, bits.end(), 0) == f.overlaps);
  }
  const BoundingBox c{0, 0, 10, 10};
  const auto b75 = relation_indicator(cb, c, {0, 0, 10, 7.5});
  CHECK(std::vector<int>(b75.begin() + 48, b75.end()) == std::vector<int>{1, 1, 1, 0, 0, 0});
  const auto same = relation_indicator(cb, c, c);
  CHECK(std::vector<int>(same.begin() + 48, same.end()) == std::vector<int>{1, 1, 1, 1, 1, 1});
}

TEST_CASE("context feature matches the dense relation sum") {
  std::mt19937_64 rng(10);
  const RelationCodebook cb = random_codebook(rng, 48);
  SceneHeadConfig cfg;
  ParamBundle p;
  add_scene_layers(p, cb.size(), 5, false, cfg, 3);
  for (int t = 0; t < 200; ++t) {
    const BoundingBox c = random_box(rng, 64);
    const BoundingBox b = (t % 5 == 0) ? c : random_box(rng, 64);
    const Vector fc = Vector::Random(5);
    const Vector dense = oracle::dense_context_feature(p, cb, fc, c, b);
    const Vector phi = context_feature(p, cb, fc, c, b);
    CHECK((phi - dense).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK((context_feature(p, cb, 2.5 * fc, c, b) - 2.5 * phi).lpNorm<Eigen::Infinity>() < 1e-12);
    if (iou(c, b) < 0.5) {
      const int k = relation_fire(cb, c, b).cluster;
      CHECK((phi - p.layer(relation_layer_name(k)).weights * fc).lpNorm<Eigen::Infinity>() == 0.0);
    }
  }
  ParamBundle zero = p;
  zero.set_zero();
  CHECK(context_feature(zero, cb, Vector::Random(5), {0, 0, 4, 4}, {1, 1, 4, 4}).isZero());
}

TEST_CASE("combine context") {
  SceneHeadConfig cfg;
  ParamBundle p;
  add_scene_layers(p, 2, 3, false, cfg, 4);
  CHECK(combine_context(p, {Vector::Zero(cfg.d1)}, false).isZero());
  std::vector<Vector> phis;
  for (int c = 0; c < 6; ++c) phis.push_back(Vector::Random(cfg.d1) * 20.0);
  const Vector full = combine_context(p, phis, false);
  CHECK(full.cwiseAbs().maxCoeff() < 1.0);
  std::vector<Vector> rev(phis.rbegin(), phis.rend());
  CHECK((combine_context(p, rev, false) - full).lpNorm<Eigen::Infinity>() < 1e-12);
  Vector sum = Vector::Zero(cfg.d1);
  for (const auto& v : phis) sum += v;
  CHECK((combine_context(p, phis, true) - sum).lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK_THROWS_AS(combine_context(p, {}, false), Error);
}

TEST_CASE("branch forward equals per-proposal context features") {
  std::mt19937_64 rng(11);
  const RelationCodebook cb = random_codebook(rng, 6);
  SceneHeadConfig cfg;
  cfg.d1 = 4;
  cfg.d2 = 5;
  for (bool linear : {false, true}) {
    Fixture f = random_fixture(rng, 6, 3, 7);
    ParamBundle p = random_scene_detector(8, 7, cb.size(), linear, cfg, 12);
    SceneContextBranch branch(cb, f.contexts, linear, cfg.d1, cfg.d2);
    std::vector<int> rows(f.image.boxes.size());
    std::iota(rows.begin(), rows.end(), 0);
    const Matrix out = branch.forward(p, f.image, rows);
    const auto& ctx = f.contexts.at(7);
    for (size_t i = 0; i < rows.size(); ++i) {
      std::vector<Vector> phis;
      for (size_t c = 0; c < ctx.boxes.size(); ++c) {
        phis.push_back(context_feature(p, cb, ctx.features.row(static_cast<Eigen::Index>(c)).transpose(), ctx.boxes[c],
                                       f.image.boxes[i]));
      }
      const Vector want = combine_context(p, phis, linear);
      CHECK((out.row(static_cast<Eigen::Index>(i)).transpose() - want).lpNorm<Eigen::Infinity>() < 1e-12);
    }
  }
}

TEST_CASE("scene context detector gradients match finite differences") {
  std::mt19937_64 rng(12);
  SceneHeadConfig cfg;
  cfg.d1 = 3;
  cfg.d2 = 4;
  DetectorConfig dc;
  dc.protocol = TrainProtocol::Reweighted;
  for (bool linear : {false, true}) {
    int passed = 0;
    for (int trial = 0; trial < 20; ++trial) {
      const RelationCodebook cb = random_codebook(rng, 4);
      Fixture f = random_fixture(rng, 5, 2, 6);
      const ParamBundle p = random_scene_detector(8, 6, cb.size(), linear, cfg, 30 + trial);
      SceneContextBranch branch(cb, f.contexts, linear, cfg.d1, cfg.d2);
      std::vector<int> rows(f.image.boxes.size());
      std::iota(rows.begin(), rows.end(), 0);
      GradCheckOptions opt;
      opt.seed = static_cast<std::uint64_t>(trial);
      const auto res = grad_check(
          p, [&](const ParamBundle& q, ParamBundle* g) { return detector_loss(q, f.image, rows, &branch, dc, g); }, opt);
      CHECK(res.checked == p.param_count());
      if (res.max_rel_error < 1e-4) ++passed;
      else MESSAGE(linear, " ", trial, " ", res.worst_layer, " ", res.max_rel_error);
    }
    CHECK(passed == 20);
  }
}

TEST_CASE("zeroed context columns reproduce the no-context detector") {
  std::mt19937_64 rng(13);
  const RelationCodebook cb = random_codebook(rng, 6);
  SceneHeadConfig cfg;
  Fixture f = random_fixture(rng, 12, 4, 6);
  const ParamBundle base = init_detector(8, 6, 0, 0, {1, 2}, 1);
  ParamBundle ctx = random_scene_detector(8, 6, cb.size(), false, cfg, 2);
  ctx.meta.erase("target_scale");
  transfer_weights(base, ctx);
  SceneContextBranch branch(cb, f.contexts, false, cfg.d1, cfg.d2);
  DetectorConfig dc;
  const DetectionSet a = detect(base, f.image, nullptr, dc);
  const DetectionSet b = detect(ctx, f.image, &branch, dc);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].category_id == b[i].category_id);
    CHECK(std::abs(a[i].box.x - b[i].box.x) < 1e-12);
    CHECK(std::abs(a[i].box.y - b[i].box.y) < 1e-12);
    CHECK(std::abs(a[i].box.w - b[i].box.w) < 1e-12);
    CHECK(std::abs(a[i].box.h - b[i].box.h) < 1e-12);
    CHECK(std::abs(a[i].score - b[i].score) < 1e-12);
  }
}

TEST_CASE("score evolution") {
  std::mt19937_64 rng(14);
  const RelationCodebook cb = random_codebook(rng, 6);
  SceneHeadConfig cfg;
  Fixture f = random_fixture(rng, 4, 15, 6);
  ParamBundle lin = random_scene_detector(8, 6, cb.size(), true, cfg, 3);
  lin.layer("cls").weights.rightCols(cfg.d1).setRandom();
  const auto& ctx = f.contexts.at(7);
  REQUIRE(ctx.boxes.size() == 16);
  const auto trace = score_evolution(lin, cb, ctx, f.image, 2);
  REQUIRE(trace.size() == 17);

  ParamBundle plain = lin;
  plain.layer("cls").weights.rightCols(cfg.d1).setZero();
  plain.layer("bbox").weights.rightCols(cfg.d1).setZero();
  SceneContextBranch branch(cb, f.contexts, true, cfg.d1, cfg.d2);
  const DetectorOutput none = detector_forward(plain, f.image, {2}, &branch);
  for (size_t k = 0; k < 2; ++k) CHECK(trace[0].scores[k] == none.probs(0, static_cast<Eigen::Index>(k) + 1));

  const DetectorOutput all = detector_forward(lin, f.image, {2}, &branch);
  for (size_t k = 0; k < 2; ++k)
    CHECK(trace[16].scores[k] == doctest::Approx(all.probs(0, static_cast<Eigen::Index>(k) + 1)).epsilon(1e-12));
  CHECK(trace[16].context == ctx.boxes[15]);

  const auto flat = score_evolution(plain, cb, ctx, f.image, 2);
  for (const auto& r : flat)
    for (size_t k = 0; k < 2; ++k) CHECK(r.scores[k] == doctest::Approx(flat[0].scores[k]).epsilon(1e-14));

  const ParamBundle full = random_scene_detector(8, 6, cb.size(), false, cfg, 4);
  CHECK_THROWS_AS(score_evolution(full, cb, ctx, f.image, 0), Error);

  const std::string csv = score_trace_csv({{7, f.image.boxes[2], trace}}, {"a", "b"});
  CHECK(csv.substr(0, csv.find('\n')) == "image_id,box,step,context_box,a,b");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 18);
}

TEST_CASE("codebook json round trip and validation") {
  std::mt19937_64 rng(15);
  RelationCodebook cb = random_codebook(rng, 5);
  cb.seed = 9;
  const RelationCodebook r = codebook_from_json(nlohmann::json::parse(codebook_to_json(cb).dump()));
  CHECK(r.centroids == cb.centroids);
  CHECK(r.thresholds == cb.thresholds);
  CHECK(r.seed == 9);
  nlohmann::json bad = codebook_to_json(cb);
  bad["thresholds"] = {0.5, 0.5};
  CHECK_THROWS_AS(codebook_from_json(bad), Error);
  bad = codebook_to_json(cb);
  bad.erase("centroids");
  CHECK_THROWS_AS(codebook_from_json(bad), SchemaError);
}

TEST_CASE("neighborhood features and variant metadata") {
  std::mt19937_64 rng(16);
  const FeatureMap fm = random_map(rng, 2, 12, 12, 4.0);
  const ParamBundle trunk = init_detector(8, 5, 0, 0, {1}, 2);
  const Matrix nb = neighborhood_features(trunk, fm, {{10, 10, 8, 8}, {0, 0, 48, 48}}, {48, 48}, 2);
  CHECK(nb.rows() == 2);
  CHECK(nb.cols() == 10);
  // A box that already covers the image has identical 2x and 4x contexts.
  CHECK((nb.row(1).head(5) - nb.row(1).tail(5)).norm() == 0.0);
  for (const char* name : {"full", "coarse", "linear", "global", "neighborhood", "nocontext"})
    CHECK(scene_variant_name(parse_scene_variant(name)) == name);
  CHECK_THROWS_AS(parse_scene_variant("person"), ConfigError);
  SceneHeadConfig cfg;
  CHECK(scene_branch_dim(SceneVariant::Linear, cfg) == cfg.d1);
  CHECK(scene_branch_dim(SceneVariant::Full, cfg) == cfg.d2);
  CHECK(scene_branch_dim(SceneVariant::Neighborhood, cfg) == 0);
}
