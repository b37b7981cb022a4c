#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxdet/dataset.hpp"
#include "ctxdet/detection.hpp"

namespace ctxdet {

inline constexpr double kSmallObjectArea = 32.0 * 32.0;

enum class MatchLabel { TruePositive, FalsePositive, Ignored };

struct MatchResult {
  MatchLabel label = MatchLabel::FalsePositive;
  int gt = -1;             // index into gts of the matched (TP/Ignored) GT
  double best_iou = 0.0;   // highest IoU with a non-ignored GT of the same image
  bool duplicate = false;  // FP whose best GT (IoU >= threshold) was already taken
};

// Greedy matching of one category. Detections are visited by descending
// score (stable on input order); each takes the highest-IoU unmatched
// non-ignored GT of its image with IoU >= threshold, failing that any
// ignored GT with IoU >= threshold (then it is dropped from scoring).
// Results are aligned with `dets`.
std::vector<MatchResult> match(const DetectionSet& dets, const std::vector<const Annotation*>& gts,
                               double iou_threshold);

// 101-point interpolated AP; NaN when num_gt == 0. Ignored entries skipped.
double average_precision(const std::vector<double>& scores, const std::vector<MatchLabel>& labels, int num_gt);

struct EvalOptions {
  double iou_threshold = 0.5;
  int max_detections = kMaxDetectionsPerImage;
};

struct CategoryAP {
  int category_id = 0;
  std::string name;
  std::string supercategory;
  int num_gt = 0;  // non-ignored
  double ap = 0.0;
};

// Per-category AP over every category of `scenes`, in category order.
std::vector<CategoryAP> evaluate(const DetectionSet& dets, const SceneSet& scenes, const EvalOptions& opt = {});

// Mean over entries with num_gt > 0; NaN when there are none.
double mean_ap(const std::vector<CategoryAP>& aps);
double mean_ap(const std::vector<CategoryAP>& aps, const std::vector<int>& category_ids);

enum class BreakdownAxis { Category, Supercategory, Size, Attached };
BreakdownAxis parse_breakdown_axis(const std::string& name);

// GT relabeled for an axis: Size marks GT with area >= 32^2 ignore;
// Attached marks add-on GT that is not attached to a person ignore.
SceneSet apply_axis(const SceneSet& scenes, BreakdownAxis axis);

struct APSlice {
  std::string key;
  int num_gt = 0;
  double ap = 0.0;
};

// Category / Size / Attached: one slice per category. Supercategory: the
// mean of member category APs (categories without GT excluded).
std::vector<APSlice> breakdown(const DetectionSet& dets, const SceneSet& scenes, BreakdownAxis axis,
                               const EvalOptions& opt = {});

struct ReportRow {
  int category_id = 0;
  std::string category;
  std::string supercategory;
  double ap = 0.0;
  double ap_small = 0.0;
  double ap_attached = 0.0;
};

struct APReport {
  std::vector<ReportRow> rows;
  ReportRow mean;
  std::map<std::string, ReportRow> supercategory_mean;
};

APReport build_report(const DetectionSet& dets, const SceneSet& scenes, const EvalOptions& opt = {});
// category,supercategory,AP,AP_small,AP_attached; one row per category,
// then "mean" rows (supercategory "*" for the overall mean).
std::string report_csv(const APReport& report);

struct DiagnosisEntry {
  double baseline = 0.0;
  double remove_mislocalized = 0.0;
  double correct_mislocalized = 0.0;
  double remove_similar = 0.0;
  double remove_background = 0.0;
  int mislocalized = 0;
  int similar = 0;
  int background = 0;
};

struct DiagnosisReport {
  std::map<int, DiagnosisEntry> per_category;  // categories with GT
  DiagnosisEntry mean;
};

// Each intervention is applied on its own to the baseline matching.
// Mislocalized: duplicates and FPs whose best same-category IoU is in
// (0.1, 0.5). Correcting turns one into a TP against its best GT if that
// GT is still unmatched, otherwise it stays an FP. Similar: remaining FPs
// with IoU > 0.5 against a GT of another category in the same
// supercategory. Background: all other FPs.
DiagnosisReport diagnose(const DetectionSet& dets, const SceneSet& scenes, const EvalOptions& opt = {});
nlohmann::json diagnosis_to_json(const DiagnosisReport& report, const SceneSet& scenes);

}  // namespace ctxdet
