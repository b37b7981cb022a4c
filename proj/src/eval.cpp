#include "ctxdet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "ctxdet/error.hpp"
#include "ctxdet/io.hpp"

namespace ctxdet {

namespace {

std::vector<size_t> score_order(const DetectionSet& dets) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

struct CategoryData {
  DetectionSet dets;
  std::vector<const Annotation*> gts;
  int num_gt = 0;
};

CategoryData gather(const DetectionSet& capped, const SceneSet& scenes, int category_id) {
  CategoryData c;
  for (const auto& d : capped)
    if (d.category_id == category_id) c.dets.push_back(d);
  for (const auto& a : scenes.annotations) {
    if (a.category_id != category_id) continue;
    c.gts.push_back(&a);
    if (!a.ignore) ++c.num_gt;
  }
  return c;
}

double category_ap(const CategoryData& c, const EvalOptions& opt) {
  const auto results = match(c.dets, c.gts, opt.iou_threshold);
  std::vector<double> scores;
  std::vector<MatchLabel> labels;
  for (size_t i = 0; i < c.dets.size(); ++i) {
    scores.push_back(c.dets[i].score);
    labels.push_back(results[i].label);
  }
  return average_precision(scores, labels, c.num_gt);
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  int n = 0;
  for (double x : v) {
    if (std::isnan(x)) continue;
    s += x;
    ++n;
  }
  return n ? s / n : nan();
}

}  // namespace

std::vector<MatchResult> match(const DetectionSet& dets, const std::vector<const Annotation*>& gts,
                               double iou_threshold) {
  std::map<int, std::vector<size_t>> by_image;
  for (size_t g = 0; g < gts.size(); ++g) by_image[gts[g]->image_id].push_back(g);
  std::vector<char> taken(gts.size(), 0);
  std::vector<MatchResult> out(dets.size());
  for (size_t i : score_order(dets)) {
    MatchResult& r = out[i];
    auto it = by_image.find(dets[i].image_id);
    if (it == by_image.end()) continue;
    int best = -1;
    double best_v = 0.0;
    int ignored = -1;
    double ignored_v = 0.0;
    bool overlaps_taken = false;
    for (size_t g : it->second) {
      const double v = iou(dets[i].box, gts[g]->bbox);
      if (gts[g]->ignore) {
        if (v >= iou_threshold && v > ignored_v) {
          ignored = static_cast<int>(g);
          ignored_v = v;
        }
        continue;
      }
      r.best_iou = std::max(r.best_iou, v);
      if (v < iou_threshold) continue;
      if (taken[g]) {
        overlaps_taken = true;
        continue;
      }
      if (best < 0 || v > best_v || (v == best_v && gts[g]->id < gts[best]->id)) {
        best = static_cast<int>(g);
        best_v = v;
      }
    }
    if (best >= 0) {
      r.label = MatchLabel::TruePositive;
      r.gt = best;
      taken[best] = 1;
    } else if (ignored >= 0) {
      r.label = MatchLabel::Ignored;
      r.gt = ignored;
    } else {
      r.label = MatchLabel::FalsePositive;
      r.duplicate = overlaps_taken;
    }
  }
  return out;
}

double average_precision(const std::vector<double>& scores, const std::vector<MatchLabel>& labels, int num_gt) {
  if (scores.size() != labels.size()) throw ShapeMismatch("average_precision: scores and labels differ in length");
  if (num_gt <= 0) return nan();
  std::vector<size_t> order;
  for (size_t i = 0; i < scores.size(); ++i)
    if (labels[i] != MatchLabel::Ignored) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  const size_t n = order.size();
  std::vector<long> tp(n);
  std::vector<double> precision(n);
  long t = 0;
  for (size_t j = 0; j < n; ++j) {
    if (labels[order[j]] == MatchLabel::TruePositive) ++t;
    tp[j] = t;
    precision[j] = static_cast<double>(t) / static_cast<double>(j + 1);
  }
  for (size_t j = n; j-- > 1;) precision[j - 1] = std::max(precision[j - 1], precision[j]);
  double sum = 0.0;
  size_t j = 0;
  for (long k = 0; k <= 100; ++k) {
    while (j < n && tp[j] * 100 < k * num_gt) ++j;
    if (j == n) break;
    sum += precision[j];
  }
  return sum / 101.0;
}

std::vector<CategoryAP> evaluate(const DetectionSet& dets, const SceneSet& scenes, const EvalOptions& opt) {
  const DetectionSet capped = cap_per_image(dets, opt.max_detections);
  std::vector<CategoryAP> out;
  for (const auto& cat : scenes.categories) {
    const CategoryData c = gather(capped, scenes, cat.id);
    out.push_back({cat.id, cat.name, cat.supercategory, c.num_gt, category_ap(c, opt)});
  }
  return out;
}

double mean_ap(const std::vector<CategoryAP>& aps) {
  std::vector<double> v;
  for (const auto& a : aps)
    if (a.num_gt > 0) v.push_back(a.ap);
  return mean_of(v);
}

double mean_ap(const std::vector<CategoryAP>& aps, const std::vector<int>& category_ids) {
  std::vector<double> v;
  for (const auto& a : aps) {
    if (a.num_gt > 0 && std::find(category_ids.begin(), category_ids.end(), a.category_id) != category_ids.end()) {
      v.push_back(a.ap);
    }
  }
  return mean_of(v);
}

BreakdownAxis parse_breakdown_axis(const std::string& name) {
  if (name == "category") return BreakdownAxis::Category;
  if (name == "supercategory") return BreakdownAxis::Supercategory;
  if (name == "size") return BreakdownAxis::Size;
  if (name == "attached") return BreakdownAxis::Attached;
  throw Error("unknown breakdown axis: " + name);
}

SceneSet apply_axis(const SceneSet& scenes, BreakdownAxis axis) {
  SceneSet out = scenes;
  if (axis == BreakdownAxis::Size) {
    for (auto& a : out.annotations)
      if (a.bbox.area() >= kSmallObjectArea) a.ignore = true;
  } else if (axis == BreakdownAxis::Attached) {
    const AttachmentMap attachments = build_attachments(scenes);
    for (auto& a : out.annotations)
      if (out.category(a.category_id).is_addon && !attachments.attached(a.id)) a.ignore = true;
  }
  out.reindex();
  return out;
}

std::vector<APSlice> breakdown(const DetectionSet& dets, const SceneSet& scenes, BreakdownAxis axis,
                               const EvalOptions& opt) {
  const auto aps = evaluate(dets, apply_axis(scenes, axis), opt);
  std::vector<APSlice> out;
  if (axis != BreakdownAxis::Supercategory) {
    for (const auto& a : aps) out.push_back({a.name, a.num_gt, a.ap});
    return out;
  }
  std::vector<std::string> names;
  for (const auto& a : aps)
    if (std::find(names.begin(), names.end(), a.supercategory) == names.end()) names.push_back(a.supercategory);
  for (const auto& name : names) {
    std::vector<double> v;
    int gt = 0;
    for (const auto& a : aps) {
      if (a.supercategory != name || a.num_gt == 0) continue;
      v.push_back(a.ap);
      gt += a.num_gt;
    }
    out.push_back({name, gt, mean_of(v)});
  }
  return out;
}

APReport build_report(const DetectionSet& dets, const SceneSet& scenes, const EvalOptions& opt) {
  const auto all = evaluate(dets, scenes, opt);
  const auto small = evaluate(dets, apply_axis(scenes, BreakdownAxis::Size), opt);
  const auto attached = evaluate(dets, apply_axis(scenes, BreakdownAxis::Attached), opt);
  APReport r;
  std::map<std::string, std::array<std::vector<double>, 3>> groups;
  std::array<std::vector<double>, 3> overall;
  for (size_t i = 0; i < all.size(); ++i) {
    ReportRow row{all[i].category_id, all[i].name, all[i].supercategory,
                  all[i].num_gt ? all[i].ap : nan(), small[i].num_gt ? small[i].ap : nan(),
                  attached[i].num_gt ? attached[i].ap : nan()};
    const std::array<double, 3> vals{row.ap, row.ap_small, row.ap_attached};
    for (int k = 0; k < 3; ++k) {
      overall[k].push_back(vals[k]);
      groups[row.supercategory][k].push_back(vals[k]);
    }
    r.rows.push_back(std::move(row));
  }
  r.mean = {0, "mean", "*", mean_of(overall[0]), mean_of(overall[1]), mean_of(overall[2])};
  for (const auto& [name, g] : groups) r.supercategory_mean[name] = {0, "mean", name, mean_of(g[0]), mean_of(g[1]), mean_of(g[2])};
  return r;
}

std::string report_csv(const APReport& report) {
  std::ostringstream os;
  os << "category,supercategory,AP,AP_small,AP_attached\n";
  auto line = [&](const ReportRow& r) {
    os << r.category << ',' << r.supercategory << ',' << format_double(r.ap) << ',' << format_double(r.ap_small)
       << ',' << format_double(r.ap_attached) << '\n';
  };
  for (const auto& r : report.rows) line(r);
  line(report.mean);
  for (const auto& [name, r] : report.supercategory_mean) line(r);
  return os.str();
}

namespace {

enum class ErrorKind { None, Mislocalized, Similar, Background };

}  // namespace

DiagnosisReport diagnose(const DetectionSet& dets, const SceneSet& scenes, const EvalOptions& opt) {
  const DetectionSet capped = cap_per_image(dets, opt.max_detections);
  DiagnosisReport report;
  std::vector<std::array<double, 5>> means;
  for (const auto& cat : scenes.categories) {
    const CategoryData c = gather(capped, scenes, cat.id);
    if (c.num_gt == 0) continue;
    const auto results = match(c.dets, c.gts, opt.iou_threshold);
    std::vector<ErrorKind> kind(c.dets.size(), ErrorKind::None);
    std::vector<int> best_gt(c.dets.size(), -1);
    DiagnosisEntry e;
    for (size_t i = 0; i < c.dets.size(); ++i) {
      if (results[i].label != MatchLabel::FalsePositive) continue;
      const Detection& d = c.dets[i];
      double best = 0.0;
      for (size_t g = 0; g < c.gts.size(); ++g) {
        if (c.gts[g]->ignore || c.gts[g]->image_id != d.image_id) continue;
        const double v = iou(d.box, c.gts[g]->bbox);
        if (v > best || (v == best && v > 0.0 && best_gt[i] >= 0 && c.gts[g]->id < c.gts[best_gt[i]]->id)) {
          best = v;
          best_gt[i] = static_cast<int>(g);
        }
      }
      if (results[i].duplicate || (best > 0.1 && best < 0.5)) {
        kind[i] = ErrorKind::Mislocalized;
        ++e.mislocalized;
        continue;
      }
      bool similar = false;
      for (size_t idx : scenes.annotation_indices(d.image_id)) {
        const Annotation& a = scenes.annotations[idx];
        if (a.category_id == cat.id || scenes.category(a.category_id).supercategory != cat.supercategory) continue;
        if (iou(d.box, a.bbox) > 0.5) similar = true;
      }
      kind[i] = similar ? ErrorKind::Similar : ErrorKind::Background;
      ++(similar ? e.similar : e.background);
    }

    std::vector<double> scores;
    std::vector<MatchLabel> labels;
    for (size_t i = 0; i < c.dets.size(); ++i) {
      scores.push_back(c.dets[i].score);
      labels.push_back(results[i].label);
    }
    auto without = [&](ErrorKind k) {
      std::vector<MatchLabel> l = labels;
      for (size_t i = 0; i < l.size(); ++i)
        if (kind[i] == k) l[i] = MatchLabel::Ignored;
      return average_precision(scores, l, c.num_gt);
    };
    e.baseline = average_precision(scores, labels, c.num_gt);
    e.remove_mislocalized = without(ErrorKind::Mislocalized);
    e.remove_similar = without(ErrorKind::Similar);
    e.remove_background = without(ErrorKind::Background);

    std::vector<char> taken(c.gts.size(), 0);
    for (size_t i = 0; i < results.size(); ++i)
      if (results[i].label == MatchLabel::TruePositive) taken[results[i].gt] = 1;
    std::vector<MatchLabel> corrected = labels;
    std::vector<size_t> order(c.dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
    for (size_t i : order) {
      if (kind[i] != ErrorKind::Mislocalized || best_gt[i] < 0 || taken[best_gt[i]]) continue;
      corrected[i] = MatchLabel::TruePositive;
      taken[best_gt[i]] = 1;
    }
    e.correct_mislocalized = average_precision(scores, corrected, c.num_gt);
    means.push_back({e.baseline, e.remove_mislocalized, e.correct_mislocalized, e.remove_similar, e.remove_background});
    report.mean.mislocalized += e.mislocalized;
    report.mean.similar += e.similar;
    report.mean.background += e.background;
    report.per_category[cat.id] = e;
  }
  std::array<double, 5> m{};
  for (const auto& v : means)
    for (int k = 0; k < 5; ++k) m[k] += v[k] / static_cast<double>(means.size());
  if (means.empty()) m.fill(nan());
  report.mean.baseline = m[0];
  report.mean.remove_mislocalized = m[1];
  report.mean.correct_mislocalized = m[2];
  report.mean.remove_similar = m[3];
  report.mean.remove_background = m[4];
  return report;
}

nlohmann::json diagnosis_to_json(const DiagnosisReport& report, const SceneSet& scenes) {
  auto entry = [](const DiagnosisEntry& e) {
    return nlohmann::json{{"baseline_ap", e.baseline},
                          {"remove_mislocalized_ap", e.remove_mislocalized},
                          {"correct_mislocalized_ap", e.correct_mislocalized},
                          {"remove_similar_ap", e.remove_similar},
                          {"remove_background_ap", e.remove_background},
                          {"mislocalized_fp", e.mislocalized},
                          {"similar_fp", e.similar},
                          {"background_fp", e.background}};
  };
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& [id, e] : report.per_category) {
    nlohmann::json j = entry(e);
    j["category_id"] = id;
    j["category"] = scenes.category(id).name;
    j["supercategory"] = scenes.category(id).supercategory;
    cats.push_back(std::move(j));
  }
  return {{"iou_threshold", 0.5}, {"mean", entry(report.mean)}, {"categories", std::move(cats)}};
}

}  // namespace ctxdet
