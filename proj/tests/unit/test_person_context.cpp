#include <cmath>
#include <random>

#include "ctxdet/error.hpp"
#include "ctxdet/person_context.hpp"
#include "ctxdet/synth.hpp"
#include "doctest.h"

using namespace ctxdet;

namespace {

FeatureMap random_map(std::mt19937_64& rng, int c, int h, int w, double stride) {
  FeatureMap fm(c, h, w, stride);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (float& v : fm.data) v = n(rng);
  return fm;
}

ParamBundle zero_head(int input_dim, int addons) {
  std::vector<int> ids;
  for (int k = 0; k < addons; ++k) ids.push_back(10 + k);
  ParamBundle h = init_addon_head(input_dim, 8, ids, 0);
  h.set_zero();
  return h;
}

PersonPrediction manual_prediction(const BoundingBox& person, double score, double conf, AddOnOffset off) {
  PersonPrediction p;
  p.person = person;
  p.person_score = score;
  p.confidence = {conf};
  p.intermediate = {off};
  p.refined = {off};
  p.fallback = {false};
  return p;
}

}  // namespace

TEST_CASE("zero head predicts p = 0.5 and the person box") {
  std::mt19937_64 rng(1);
  const FeatureMap fm = random_map(rng, 3, 16, 16, 4.0);
  AddOnOptions opt;
  opt.grid = 2;
  const ParamBundle head = zero_head(3 * 4, 2);
  const BoundingBox person{10, 12, 20, 40};
  const PersonPrediction p = predict_addons(person, 0.9, fm, head, opt);
  REQUIRE(p.confidence.size() == 2);
  for (size_t k = 0; k < 2; ++k) {
    CHECK(p.confidence[k] == doctest::Approx(0.5));
    const BoundingBox b = decode_addon(person, p.refined[k]);
    CHECK(b.x == doctest::Approx(person.x));
    CHECK(b.y == doctest::Approx(person.y));
    CHECK(b.w == doctest::Approx(person.w));
    CHECK(b.h == doctest::Approx(person.h));
    CHECK_FALSE(p.fallback[k]);
  }
}

TEST_CASE("absent add-ons contribute no offset terms") {
  std::mt19937_64 rng(2);
  const FeatureMap fm = random_map(rng, 3, 16, 16, 4.0);
  AddOnOptions opt;
  opt.grid = 2;
  ParamBundle head = init_addon_head(12, 8, {10, 11}, 3);
  AddOnExample ex;
  ex.person = {10, 12, 20, 40};
  ex.truth.present = {0, 0};
  ex.truth.boxes = {BoundingBox{}, BoundingBox{}};
  ParamBundle g = head.zeros_like();
  const double loss = addon_loss(head, fm, ex, opt, &g);
  const PersonPrediction p = predict_addons(ex.person, 1.0, fm, head, opt);
  CHECK(loss == doctest::Approx(-std::log(1 - p.confidence[0]) - std::log(1 - p.confidence[1])));
  CHECK(g.layer("off1").weights.norm() == 0.0);
  CHECK(g.layer("off2").weights.norm() == 0.0);
  CHECK(g.layer("conf").weights.norm() > 0.0);

  ex.truth.boxes = {BoundingBox{1, 2, 3, 4}, BoundingBox{5, 6, 7, 8}};
  CHECK(addon_loss(head, fm, ex, opt, nullptr) == doctest::Approx(loss));
}

TEST_CASE("add-on loss gradients match finite differences") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int passed = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const FeatureMap fm = random_map(rng, 2, 20, 20, 4.0);
    AddOnOptions opt;
    opt.grid = 2;
    opt.use_step2 = trial % 4 != 3;
    const ParamBundle head = init_addon_head(8, 6, {10, 11, 12}, 100 + trial);
    AddOnExample ex;
    ex.person = BoundingBox::from_center(30 + 20 * u(rng), 30 + 20 * u(rng), 14 + 6 * u(rng), 28 + 10 * u(rng));
    for (int k = 0; k < 3; ++k) {
      const int y = u(rng) < 0.6;
      ex.truth.present.push_back(y);
      ex.truth.boxes.push_back(BoundingBox::from_center(ex.person.cx() + 15 * (u(rng) - 0.5),
                                                        ex.person.cy() + 15 * (u(rng) - 0.5), 6 + 6 * u(rng),
                                                        6 + 6 * u(rng)));
    }
    // The step-2 box is a stop-gradient input; pin it so finite differences
    // do not cross pooling-cell boundaries.
    if (opt.use_step2) opt.step2_boxes = step2_boxes(head, fm, ex.person, opt);
    GradCheckOptions gopt;
    gopt.seed = static_cast<std::uint64_t>(trial);
    const auto res = grad_check(
        head, [&](const ParamBundle& q, ParamBundle* g) { return addon_loss(q, fm, ex, opt, g); }, gopt);
    CHECK(res.checked == head.param_count());
    if (res.max_rel_error < 1e-4) ++passed;
  }
  CHECK(passed == 20);
}

TEST_CASE("pinned step-2 boxes equal the decoded ones") {
  std::mt19937_64 rng(5);
  const FeatureMap fm = random_map(rng, 2, 20, 20, 4.0);
  AddOnOptions opt;
  opt.grid = 2;
  const ParamBundle head = init_addon_head(8, 6, {10, 11}, 4);
  const BoundingBox person{30, 20, 16, 32};
  const PersonPrediction free = predict_addons(person, 1.0, fm, head, opt);
  opt.step2_boxes = step2_boxes(head, fm, person, opt);
  const PersonPrediction pinned = predict_addons(person, 1.0, fm, head, opt);
  for (size_t k = 0; k < 2; ++k) CHECK(free.refined[k].as_array() == pinned.refined[k].as_array());
  opt.step2_boxes.pop_back();
  CHECK_THROWS_AS(predict_addons(person, 1.0, fm, head, opt), ShapeMismatch);
}

TEST_CASE("heatmap peaks at A + B and is A where confidence is low") {
  const HeatmapParams hp{-50.0, 100.0, 0.1, 0.5};
  const BoundingBox person{20, 20, 20, 40};
  const AddOnOffset off{0.5, -0.25, 0.0, 0.0};
  const PersonPrediction on = manual_prediction(person, 0.9, 0.8, off);
  const double cx = person.cx() + 0.5 * person.w;
  const double cy = person.cy() - 0.25 * person.h;
  CHECK(heatmap_value(on, 0, cx, cy, hp) == doctest::Approx(50.0));
  CHECK(heatmap_value(on, 0, cx + 4.0, cy, hp) == doctest::Approx(-50.0 + 100.0 * std::exp(-16.0 / (2 * 16.0))));
  const PersonPrediction low = manual_prediction(person, 0.9, 0.5, off);
  CHECK(heatmap_value(low, 0, cx, cy, hp) == -50.0);

  const auto maps = build_heatmaps({low}, {10}, hp, {64, 64}, 4.0);
  REQUIRE(maps.size() == 1);
  for (double v : maps[0].values) CHECK(v == -50.0);
  const auto empty = build_heatmaps({}, {10}, hp, {64, 64}, 4.0);
  for (double v : empty[0].values) CHECK(v == -50.0);
  const FeatureMap f = heatmap_features(empty, hp);
  for (float v : f.data) CHECK(v == 0.0f);
}

TEST_CASE("heatmap is the pointwise max over people") {
  const HeatmapParams hp{-50.0, 100.0, 0.2, 0.5};
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<PersonPrediction> preds;
    for (int d = 0; d < 3; ++d) {
      preds.push_back(manual_prediction(BoundingBox::from_center(80 * u(rng), 80 * u(rng), 15, 30), u(rng), u(rng),
                                        {u(rng) - 0.5, u(rng) - 0.5, 0.0, 0.0}));
    }
    const auto maps = build_heatmaps(preds, {10}, hp, {80, 80}, 4.0);
    for (int y = 0; y < maps[0].height; ++y) {
      for (int x = 0; x < maps[0].width; ++x) {
        double m = hp.a;
        for (const auto& p : preds) m = std::max(m, heatmap_value(p, 0, (x + 0.5) * 4.0, (y + 0.5) * 4.0, hp));
        CHECK(maps[0].at(y, x) == m);
      }
    }
  }
}

TEST_CASE("heatmap is translation equivariant") {
  const HeatmapParams hp{-50.0, 100.0, 0.15, 0.5};
  const PersonPrediction a = manual_prediction({20, 16, 16, 32}, 0.9, 0.9, {0.3, 0.1, 0.0, 0.0});
  const PersonPrediction b = manual_prediction({28, 24, 16, 32}, 0.9, 0.9, {0.3, 0.1, 0.0, 0.0});
  const auto ma = build_heatmaps({a}, {10}, hp, {96, 96}, 4.0)[0];
  const auto mb = build_heatmaps({b}, {10}, hp, {96, 96}, 4.0)[0];
  for (int y = 0; y + 2 < ma.height; ++y)
    for (int x = 0; x + 2 < ma.width; ++x) CHECK(mb.at(y + 2, x + 2) == doctest::Approx(ma.at(y, x)));
}

TEST_CASE("zero heatmap weights reproduce the baseline detections") {
  SynthConfig sc;
  sc.scenes = 3;
  sc.seed = 5;
  const Dataset data = synth_generate(sc);
  DetectorConfig cfg;
  auto images = prepare_dataset(data, cfg.grid, false);
  std::vector<int> ids;
  for (const auto& c : data.scenes.categories) ids.push_back(c.id);
  const ParamBundle base = init_detector(static_cast<int>(images[0].pooled.cols()), 16, 0, 0, ids, 7);
  PersonContextConfig pc;
  std::vector<int> addon_ids;
  for (const auto& c : data.scenes.categories)
    if (c.is_addon) addon_ids.push_back(c.id);
  const ParamBundle head = init_addon_head(static_cast<int>(images[0].pooled.cols()), 8, addon_ids, 9);
  ParamBundle ctx = init_detector(static_cast<int>(images[0].pooled.cols()), 16,
                                  heatmap_feature_dim(addon_ids.size(), pc), 0, ids, 8);
  transfer_weights(base, ctx);
  for (size_t i = 0; i < images.size(); ++i) {
    const DetectionSet plain = detect(base, images[i], nullptr, cfg);
    std::vector<PersonPrediction> preds;
    for (const auto& a : data.scenes.annotations)
      if (a.image_id == images[i].image_id && a.category_id == 1) preds.push_back(predict_addons(a.bbox, 1.0, data.features[i], head));
    PreparedImage with = images[i];
    attach_heatmap_features(with, preds, addon_ids, pc, data.features[i]);
    CHECK(with.extra.cols() == heatmap_feature_dim(addon_ids.size(), pc));
    const DetectionSet ctxd = detect(ctx, with, nullptr, cfg);
    REQUIRE(ctxd.size() == plain.size());
    for (size_t d = 0; d < plain.size(); ++d) {
      CHECK(ctxd[d].category_id == plain[d].category_id);
      CHECK(ctxd[d].box == plain[d].box);
      CHECK(ctxd[d].score == plain[d].score);
    }
  }
}

TEST_CASE("attachment inference picks the strongest field, ties to the higher score") {
  const HeatmapParams hp{-50.0, 100.0, 0.1, 0.5};
  const BoundingBox person{20, 20, 20, 40};
  const PersonPrediction p1 = manual_prediction(person, 0.6, 0.9, {0.5, 0.0, 0.0, 0.0});
  const PersonPrediction p2 = manual_prediction(person, 0.8, 0.9, {0.5, 0.0, 0.0, 0.0});
  const PersonPrediction far = manual_prediction({60, 20, 20, 40}, 0.99, 0.9, {0.5, 0.0, 0.0, 0.0});
  DetectionSet dets{{1, 10, BoundingBox::from_center(40, 40, 6, 6), 0.7},
                    {1, 99, BoundingBox::from_center(40, 40, 6, 6), 0.7}};
  const auto pairs = infer_attachments(dets, {p1, p2, far}, {10}, hp);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].detection == 0);
  CHECK(pairs[0].person == 1);
  CHECK(pairs[0].heatmap_value == doctest::Approx(50.0));
  CHECK(infer_attachments(dets, {}, {10}, hp).empty());
}

TEST_CASE("person context config round trip and validation") {
  PersonContextConfig c;
  c.heatmap.sigma = 0.25;
  c.heatmap_grid = 2;
  c.addon.use_step2 = false;
  const PersonContextConfig r = person_context_config_from_json(person_context_config_to_json(c));
  CHECK(r.heatmap.sigma == 0.25);
  CHECK(r.heatmap_grid == 2);
  CHECK_FALSE(r.addon.use_step2);
  CHECK_THROWS_AS(person_context_config_from_json({{"sigma", 0.0}}), ConfigError);
  CHECK_THROWS_AS(person_context_config_from_json({{"sigma", "x"}}), ConfigError);
  AddOnTrainConfig a;
  a.epochs = 7;
  CHECK(addon_config_from_json(addon_config_to_json(a)).epochs == 7);
  CHECK_THROWS_AS(addon_config_from_json({{"batch", 0}}), ConfigError);
}

TEST_CASE("add-on examples follow the attachments") {
  SynthConfig sc;
  sc.scenes = 20;
  sc.seed = 6;
  const Dataset data = synth_generate(sc);
  std::vector<int> addon_ids;
  for (const auto& c : data.scenes.categories)
    if (c.is_addon) addon_ids.push_back(c.id);
  const auto ex = addon_examples(data, addon_ids);
  const AttachmentMap att = build_attachments(data.scenes);
  int present = 0;
  for (const auto& e : ex) present += std::count(e.truth.present.begin(), e.truth.present.end(), 1);
  CHECK(present == static_cast<int>(att.person_of_addon.size()));
  CHECK(!ex.empty());
}

TEST_CASE("person detections filter by category and score") {
  DetectionSet d{{1, 1, {0, 0, 5, 5}, 0.7}, {1, 1, {0, 0, 5, 5}, 0.4}, {1, 2, {0, 0, 5, 5}, 0.9}};
  CHECK(person_detections(d, 1).size() == 1);
  CHECK(person_detections(d, 1, 0.3).size() == 2);
}
