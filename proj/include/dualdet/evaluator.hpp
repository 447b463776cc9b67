#pragma once

// COCO-style detection metrics: greedy per-image matching, 101-point
// interpolated average precision over IoU thresholds 0.50:0.05:0.95.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <cstddef>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dualdet/annotations.hpp"
#include "dualdet/error.hpp"
#include "dualdet/geometry.hpp"
#include "dualdet/postprocess.hpp"
#include "json.hpp"

namespace dualdet {

inline constexpr std::size_t kNumIouThresholds = 10;

inline double iou_threshold_at(std::size_t i) { return 0.5 + 0.05 * static_cast<double>(i); }

struct EvalResult {
  double ap = 0, ap50 = 0, ap75 = 0;
  std::array<double, kNumIouThresholds> ap_per_threshold{};
  double recall = 0;  // at IoU 0.5 over the supplied (already top-k) detections
  std::vector<double> per_class_ap;    // NaN for classes without ground truth
  std::vector<double> per_class_ap50;
  std::size_t num_images = 0, num_gts = 0, num_dets = 0;
};

/// Detections must be sorted by descending score. A detection is a true
/// positive when its best-IoU unmatched same-class gt reaches the threshold;
/// IoU ties go to the lower gt index.
inline std::vector<bool> match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                          double iou_threshold) {
  std::vector<bool> tp(dets.size(), false);
  std::vector<char> used(gts.size(), 0);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    double best = -1;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].class_id != dets[d].class_id) continue;
      const double v = iou(dets[d].box, gts[g].box);
      if (v >= iou_threshold && v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best >= 0) {
      used[best_g] = 1;
      tp[d] = true;
    }
  }
  return tp;
}

/// 101-point interpolated AP of a ranked list of TP/FP flags. Empty when
/// there is nothing to score (no gts and no detections); 0 when there are
/// detections but no gts.
inline std::optional<double> average_precision(const std::vector<bool>& tp_in_rank_order, std::size_t gt_count) {
  const std::size_t n = tp_in_rank_order.size();
  if (gt_count == 0) return n ? std::optional<double>(0.0) : std::nullopt;
  if (n == 0) return 0.0;
  std::vector<double> recall(n), precision(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += tp_in_rank_order[i] ? 1 : 0;
    recall[i] = static_cast<double>(tp) / static_cast<double>(gt_count);
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  for (std::size_t i = n - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0;
  std::size_t pos = 0;
  for (std::size_t r = 0; r <= 100; ++r) {
    const double level = static_cast<double>(r) / 100.0;
    while (pos < n && recall[pos] < level) ++pos;
    if (pos == n) break;
    total += precision[pos];
  }
  return total / 101.0;
}

/// AP of one class at one IoU threshold over all images. Detections are
/// ranked by score, ties by (image, position in image).
inline std::optional<double> class_ap(const std::vector<std::vector<Detection>>& dets,
                                      const std::vector<std::vector<GroundTruth>>& gts, int cls, double thr) {
  struct Ranked {
    double score;
    std::size_t order;
    bool tp;
  };
  std::vector<Ranked> ranked;
  std::size_t gt_count = 0, order = 0;
  for (std::size_t img = 0; img < dets.size(); ++img) {
    std::vector<Detection> d;
    for (const auto& x : dets[img])
      if (x.class_id == cls) d.push_back(x);
    std::stable_sort(d.begin(), d.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<GroundTruth> g;
    for (const auto& x : gts[img])
      if (x.class_id == cls) g.push_back(x);
    gt_count += g.size();
    const auto flags = match_detections(d, g, thr);
    for (std::size_t i = 0; i < d.size(); ++i) ranked.push_back({d[i].score, order++, flags[i]});
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  std::vector<bool> flags;
  for (const auto& r : ranked) flags.push_back(r.tp);
  return average_precision(flags, gt_count);
}

/// Dataset-level metrics. Classes without ground truth are excluded from
/// every average.
inline EvalResult evaluate(const std::vector<std::vector<Detection>>& dets,
                           const std::vector<std::vector<GroundTruth>>& gts, std::size_t num_classes) {
  if (dets.size() != gts.size())
    throw DimensionError("evaluate: " + std::to_string(dets.size()) + " detection lists for " +
                         std::to_string(gts.size()) + " images");
  EvalResult r;
  r.num_images = dets.size();
  std::vector<std::size_t> gts_per_class(num_classes, 0);
  for (const auto& g : gts)
    for (const auto& x : g) {
      if (x.class_id < 0 || static_cast<std::size_t>(x.class_id) >= num_classes)
        throw DomainError("evaluate: class id out of range");
      ++gts_per_class[static_cast<std::size_t>(x.class_id)];
      ++r.num_gts;
    }
  for (const auto& d : dets) r.num_dets += d.size();

  r.per_class_ap.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  r.per_class_ap50.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  std::size_t active = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (!gts_per_class[c]) continue;
    ++active;
    double sum = 0;
    for (std::size_t t = 0; t < kNumIouThresholds; ++t) {
      const double ap = class_ap(dets, gts, static_cast<int>(c), iou_threshold_at(t)).value_or(0.0);
      r.ap_per_threshold[t] += ap;
      sum += ap;
      if (t == 0) r.per_class_ap50[c] = ap;
    }
    r.per_class_ap[c] = sum / static_cast<double>(kNumIouThresholds);
  }
  if (active) {
    for (double& v : r.ap_per_threshold) v /= static_cast<double>(active);
    r.ap = std::accumulate(r.ap_per_threshold.begin(), r.ap_per_threshold.end(), 0.0) /
           static_cast<double>(kNumIouThresholds);
    r.ap50 = r.ap_per_threshold[0];
    r.ap75 = r.ap_per_threshold[5];
  }
  std::size_t matched = 0;
  for (std::size_t img = 0; img < dets.size(); ++img) {
    std::vector<Detection> d = dets[img];
    std::stable_sort(d.begin(), d.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    for (bool tp : match_detections(d, gts[img], 0.5)) matched += tp ? 1 : 0;
  }
  r.recall = r.num_gts ? static_cast<double>(matched) / static_cast<double>(r.num_gts) : 0.0;
  return r;
}

/// Fraction of annotations that survive class-aware NMS when every box is
/// given score 1 (ties resolved in annotation order): the recall ceiling
/// of any detector that relies on NMS.
inline double recall_after_nms_on_gt(const std::vector<std::vector<GroundTruth>>& gts, double iou_threshold) {
  std::size_t total = 0, kept = 0;
  for (const auto& img : gts) {
    std::vector<Detection> dets;
    for (const auto& g : img) dets.push_back({g.box, 1.0, g.class_id});
    total += dets.size();
    kept += nms(dets, iou_threshold, true).size();
  }
  return total ? static_cast<double>(kept) / static_cast<double>(total) : 1.0;
}

inline double recall_after_nms_on_gt(const std::vector<GroundTruth>& gts, double iou_threshold) {
  return recall_after_nms_on_gt(std::vector<std::vector<GroundTruth>>{gts}, iou_threshold);
}

// Versioned output forms. Values are fractions in [0, 1].
inline constexpr int kEvalSchema = 1;

inline std::string eval_csv_header() {
  std::string h = "schema,ap,ap50,ap75,recall,num_images,num_gts,num_dets";
  for (std::size_t t = 0; t < kNumIouThresholds; ++t) h += ",ap_t" + std::to_string(50 + 5 * t);
  return h;
}

inline std::string eval_csv_row(const EvalResult& r) {
  std::ostringstream os;
  os.precision(10);
  os << kEvalSchema << ',' << r.ap << ',' << r.ap50 << ',' << r.ap75 << ',' << r.recall << ',' << r.num_images << ','
     << r.num_gts << ',' << r.num_dets;
  for (double v : r.ap_per_threshold) os << ',' << v;
  return os.str();
}

inline nlohmann::json to_json(const EvalResult& r) {
  auto nan_to_null = [](const std::vector<double>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (double x : v) a.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
    return a;
  };
  return {{"schema", kEvalSchema},
          {"ap", r.ap},
          {"ap50", r.ap50},
          {"ap75", r.ap75},
          {"ap_per_threshold", r.ap_per_threshold},
          {"recall", r.recall},
          {"per_class_ap", nan_to_null(r.per_class_ap)},
          {"per_class_ap50", nan_to_null(r.per_class_ap50)},
          {"num_images", r.num_images},
          {"num_gts", r.num_gts},
          {"num_dets", r.num_dets}};
}

}  // namespace dualdet
