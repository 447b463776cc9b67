#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "dualdet/annotations.hpp"
#include "dualdet/error.hpp"
#include "dualdet/geometry.hpp"
#include "dualdet/losses.hpp"

namespace dualdet {

enum class ScoreMode { cls, cls_times_ctr };

inline constexpr std::size_t kDefaultTopK = 100;

/// Top-k over every (location, class) score in [L * K] layout, highest
/// first, ties in flat-index order. Nothing is suppressed.
inline std::vector<Detection> select_topk(std::span<const double> scores, std::size_t num_classes,
                                          std::span<const Box> boxes, std::size_t k, double score_floor = 0.0) {
  if (k == 0) throw ConfigError("select_topk: k must be >= 1");
  if (num_classes == 0 || scores.size() != boxes.size() * num_classes)
    throw ShapeError("select_topk: scores do not match boxes x classes");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > score_floor) order.push_back(i);
  const std::size_t keep = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(keep), order.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  std::vector<Detection> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t f = order[i];
    out.push_back({boxes[f / num_classes], scores[f], static_cast<int>(f % num_classes)});
  }
  return out;
}

/// Scores one image of a head (sigmoid of the class logits, times the
/// center-ness probability in cls_times_ctr mode) and keeps the top k.
inline std::vector<Detection> select_topk(const HeadOutput& head, std::size_t image, std::size_t k = kDefaultTopK,
                                          double score_floor = 0.0, ScoreMode mode = ScoreMode::cls) {
  if (mode == ScoreMode::cls_times_ctr && !head.has_centerness())
    throw ConfigError("select_topk: head has no center-ness output");
  const CandidateSet c = head.candidates(image);
  std::vector<double> scores = c.class_prob;
  if (mode == ScoreMode::cls_times_ctr) {
    const std::size_t L = head.locations(), K = head.classes();
    const auto ctr = head.centerness_logits.values().subspan(image * L, L);
    for (std::size_t l = 0; l < L; ++l) {
      const double q = 1.0 / (1.0 + std::exp(-ctr[l]));
      for (std::size_t kk = 0; kk < K; ++kk) scores[l * K + kk] *= q;
    }
  }
  return select_topk(scores, c.num_classes, c.boxes, k, score_floor);
}

/// Greedy non-maximum suppression. Repeatedly keeps the best remaining
/// detection and drops those (of the same class when class_aware) whose
/// IoU with it is strictly greater than the threshold. Equal scores keep
/// input order. Output is in score order.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold, bool class_aware = true) {
  if (!(iou_threshold > 0 && iou_threshold <= 1)) throw ConfigError("nms: threshold must be in (0, 1]");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<char> removed(dets.size(), 0);
  std::vector<Detection> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t a = order[i];
    if (removed[a]) continue;
    out.push_back(dets[a]);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t b = order[j];
      if (removed[b] || (class_aware && dets[b].class_id != dets[a].class_id)) continue;
      if (iou(dets[a].box, dets[b].box) > iou_threshold) removed[b] = 1;
    }
  }
  return out;
}

}  // namespace dualdet
