#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "dualdet/annotations.hpp"
#include "dualdet/error.hpp"
#include "dualdet/geometry.hpp"

namespace dualdet {

/// Dense rows x cols matrix of matching costs; lower is better.
/// Rows are ground truths, columns predictions.
class CostMatrix {
 public:
  CostMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) throw DimensionError("CostMatrix: data size mismatch");
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }

 private:
  std::size_t rows_, cols_;
  std::vector<double> data_;
};

struct Matching {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (gt, prediction), sorted by gt
  double total_cost = 0;
};

/// Exact minimum-cost assignment of every row to a distinct column
/// (rows <= cols). Shortest augmenting paths with vertex potentials,
/// O(rows^2 * cols).
inline Matching hungarian(const CostMatrix& cost) {
  const std::size_t n = cost.rows(), m = cost.cols();
  if (n > m)
    throw DimensionError("hungarian: " + std::to_string(n) + " ground truths but only " +
                         std::to_string(m) + " predictions");
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c)
      if (!std::isfinite(cost(r, c))) throw DomainError("hungarian: non-finite cost entry");
  Matching result;
  if (n == 0) return result;

  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based: column 0 is a virtual source; match_col[j] is the row owning column j.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> match_col(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match_col[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match_col[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match_col[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match_col[j0] = match_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> col_of_row(n);
  for (std::size_t j = 1; j <= m; ++j)
    if (match_col[j] != 0) col_of_row[match_col[j] - 1] = j - 1;
  for (std::size_t r = 0; r < n; ++r) {
    result.pairs.emplace_back(r, col_of_row[r]);
    result.total_cost += cost(r, col_of_row[r]);
  }
  return result;
}

/// Per-prediction label target. `gt` is meaningful only for positives.
struct SampleLabel {
  enum class Kind : unsigned char { negative, positive, ignored };
  Kind kind = Kind::negative;
  std::size_t gt = 0;

  bool positive() const { return kind == Kind::positive; }
  bool ignored() const { return kind == Kind::ignored; }
};

struct AssignmentResult {
  std::vector<SampleLabel> labels;
  std::size_t positive_count = 0;
  /// Filled by FCOS-style assignment only; zero for non-positives.
  std::vector<double> centerness;
  /// Ground truths that received no positive sample.
  std::vector<std::size_t> unassigned;

  bool has_centerness() const { return !centerness.empty(); }
  std::vector<std::size_t> positives() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i].positive()) out.push_back(i);
    return out;
  }
};

namespace detail {
inline void collect_unassigned(AssignmentResult& r, std::size_t num_gts) {
  std::vector<char> hit(num_gts, 0);
  r.positive_count = 0;
  for (const auto& l : r.labels)
    if (l.positive()) {
      hit[l.gt] = 1;
      ++r.positive_count;
    }
  r.unassigned.clear();
  for (std::size_t g = 0; g < num_gts; ++g)
    if (!hit[g]) r.unassigned.push_back(g);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// One-to-one assignment

struct O2OAssignerConfig {
  double alpha = 0.8;  // weight of IoU against classification in POTO quality
  bool restrict_to_box_interior = true;
};

/// POTO matching quality: prior * p^(1 - alpha) * IoU^alpha, with 0^0 = 1.
inline double poto_quality(double cls_prob, const Box& pred_box, const Box& gt_box, bool gt_inside,
                           double alpha) {
  if (!gt_inside) return 0.0;
  auto powz = [](double base, double e) { return e == 0 ? 1.0 : std::pow(base, e); };
  return powz(cls_prob, 1.0 - alpha) * powz(iou(pred_box, gt_box), alpha);
}

/// Detached view of one image's predictions used for matching.
struct CandidateSet {
  std::size_t num_classes = 0;
  std::vector<double> class_prob;  // [P * num_classes]
  std::vector<Box> boxes;          // [P]
  std::vector<Point> points;       // [P]

  std::size_t size() const { return boxes.size(); }
  double prob(std::size_t p, int cls) const {
    return class_prob[p * num_classes + static_cast<std::size_t>(cls)];
  }
};

/// Cost of pairing gt g with prediction p is the negated POTO quality, so
/// the minimum-cost matching maximizes total quality.
inline CostMatrix o2o_cost_matrix(const CandidateSet& preds, const std::vector<GroundTruth>& gts,
                                  const O2OAssignerConfig& cfg) {
  CostMatrix cost(gts.size(), preds.size());
  for (std::size_t g = 0; g < gts.size(); ++g)
    for (std::size_t p = 0; p < preds.size(); ++p) {
      const bool inside = !cfg.restrict_to_box_interior || strictly_inside(preds.points[p], gts[g].box);
      cost(g, p) = -poto_quality(preds.prob(p, gts[g].class_id), preds.boxes[p], gts[g].box, inside,
                                 cfg.alpha);
    }
  return cost;
}

inline AssignmentResult assign_o2o(const CandidateSet& preds, const std::vector<GroundTruth>& gts,
                                   const O2OAssignerConfig& cfg = {}) {
  if (cfg.alpha < 0 || cfg.alpha > 1) throw ConfigError("assign_o2o: alpha outside [0,1]");
  AssignmentResult r;
  r.labels.assign(preds.size(), {});
  const Matching m = hungarian(o2o_cost_matrix(preds, gts, cfg));
  for (const auto& [g, p] : m.pairs) r.labels[p] = {SampleLabel::Kind::positive, g};
  detail::collect_unassigned(r, gts.size());
  return r;
}

// ---------------------------------------------------------------------------
// Prediction locations

/// Feature-map grid of one pyramid level; location (x, y) sits at
/// (stride/2 + x*stride, stride/2 + y*stride).
struct LevelGrid {
  double stride = 8;
  std::size_t height = 0, width = 0;

  std::size_t size() const { return height * width; }
  Point at(std::size_t index) const {
    const std::size_t y = index / width, x = index % width;
    return {stride / 2 + static_cast<double>(x) * stride, stride / 2 + static_cast<double>(y) * stride};
  }
};

inline std::vector<Point> flatten_locations(const std::vector<LevelGrid>& levels) {
  std::vector<Point> out;
  for (const auto& lv : levels)
    for (std::size_t i = 0; i < lv.size(); ++i) out.push_back(lv.at(i));
  return out;
}

// ---------------------------------------------------------------------------
// One-to-many, FCOS style

struct FcosAssignerConfig {
  struct Range {
    double min = 0, max = std::numeric_limits<double>::infinity();
  };
  std::vector<Range> ranges{{0, 32}, {32, std::numeric_limits<double>::infinity()}};
  double center_sampling_radius = 0;  // pixels; 0 disables

  void validate(std::size_t num_levels) const {
    if (ranges.size() != num_levels)
      throw ConfigError("fcos: " + std::to_string(ranges.size()) + " ranges for " +
                        std::to_string(num_levels) + " levels");
    if (ranges.empty() || ranges.front().min != 0 || !std::isinf(ranges.back().max))
      throw ConfigError("fcos: ranges must cover [0, inf)");
    for (std::size_t i = 0; i < ranges.size(); ++i) {
      if (!(ranges[i].min < ranges[i].max)) throw ConfigError("fcos: empty range");
      if (i && ranges[i].min != ranges[i - 1].max) throw ConfigError("fcos: ranges must be contiguous");
    }
    if (center_sampling_radius < 0) throw ConfigError("fcos: negative center sampling radius");
  }
};

/// A location is positive for a gt when it lies strictly inside the box
/// (and inside the center-sampling square when enabled) and its largest
/// LTRB distance falls in [min, max) of its level. Several candidate gts
/// resolve to the smallest-area one, then the lowest index.
inline AssignmentResult assign_o2m_fcos(const std::vector<LevelGrid>& levels,
                                        const std::vector<GroundTruth>& gts,
                                        const FcosAssignerConfig& cfg = {}) {
  cfg.validate(levels.size());
  AssignmentResult r;
  std::size_t total = 0;
  for (const auto& lv : levels) total += lv.size();
  r.labels.assign(total, {});
  r.centerness.assign(total, 0.0);

  std::size_t offset = 0;
  for (std::size_t li = 0; li < levels.size(); ++li) {
    const auto& lv = levels[li];
    for (std::size_t i = 0; i < lv.size(); ++i) {
      const Point p = lv.at(i);
      std::optional<std::size_t> best;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        const Box& b = gts[g].box;
        if (!strictly_inside(p, b)) continue;
        if (cfg.center_sampling_radius > 0) {
          const double rad = cfg.center_sampling_radius;
          const Box center{std::max(b.x1, b.cx() - rad), std::max(b.y1, b.cy() - rad),
                           std::min(b.x2, b.cx() + rad), std::min(b.y2, b.cy() + rad)};
          if (!strictly_inside(p, center)) continue;
        }
        const double reach = ltrb_encode(p, b).max();
        if (reach < cfg.ranges[li].min || reach >= cfg.ranges[li].max) continue;
        if (!best || area(b) < area(gts[*best].box)) best = g;
      }
      if (best) {
        r.labels[offset + i] = {SampleLabel::Kind::positive, *best};
        r.centerness[offset + i] = centerness_target(p, gts[*best].box);
      }
    }
    offset += lv.size();
  }
  detail::collect_unassigned(r, gts.size());
  return r;
}

// ---------------------------------------------------------------------------
// One-to-many, RetinaNet style

struct AnchorConfig {
  std::vector<double> base_sizes{16, 32};   // one per level
  std::vector<double> ratios{0.5, 1.0, 2.0};  // height : width
  std::vector<double> scales{0.5, 1.0};
  double positive_iou_threshold = 0.5;
  double negative_iou_threshold = 0.4;

  std::size_t anchors_per_location() const { return ratios.size() * scales.size(); }

  void validate() const {
    if (ratios.empty() || scales.empty()) throw ConfigError("anchors: empty ratios or scales");
    if (!(0 <= negative_iou_threshold && negative_iou_threshold <= positive_iou_threshold &&
          positive_iou_threshold <= 1))
      throw ConfigError("anchors: thresholds must satisfy 0 <= negative <= positive <= 1");
  }
};

/// Anchors centered on every location, ordered location-major, then ratio,
/// then scale. Ratio r keeps the area of a size x size square: w = size/sqrt(r),
/// h = size*sqrt(r).
inline std::vector<Box> generate_anchors(const std::vector<LevelGrid>& levels, const AnchorConfig& cfg) {
  cfg.validate();
  if (cfg.base_sizes.size() != levels.size())
    throw ConfigError("anchors: one base size per level required");
  std::vector<Box> out;
  for (std::size_t li = 0; li < levels.size(); ++li)
    for (std::size_t i = 0; i < levels[li].size(); ++i) {
      const Point c = levels[li].at(i);
      for (double ratio : cfg.ratios)
        for (double scale : cfg.scales) {
          const double size = cfg.base_sizes[li] * scale;
          const double w = size / std::sqrt(ratio), h = size * std::sqrt(ratio);
          out.push_back({c.x - w / 2, c.y - h / 2, c.x + w / 2, c.y + h / 2});
        }
    }
  return out;
}

/// Max-IoU assignment. Anchors at or above the positive threshold take their
/// best gt, anchors below the negative threshold are background, the rest
/// are ignored. Each gt then forces its best anchor (lowest index on ties)
/// positive; when two gts force the same anchor the higher IoU wins.
inline AssignmentResult assign_o2m_retina(const std::vector<Box>& anchors,
                                          const std::vector<GroundTruth>& gts,
                                          const AnchorConfig& cfg = {}) {
  cfg.validate();
  AssignmentResult r;
  r.labels.assign(anchors.size(), {});
  std::vector<double> forced_iou(anchors.size(), -1.0);
  std::vector<std::size_t> best_anchor(gts.size(), 0);
  std::vector<double> best_anchor_iou(gts.size(), 0.0);

  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double best = 0;
    std::size_t best_gt = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[a], gts[g].box);
      if (v > best) {
        best = v;
        best_gt = g;
      }
      if (v > best_anchor_iou[g]) {
        best_anchor_iou[g] = v;
        best_anchor[g] = a;
      }
    }
    if (!gts.empty() && best >= cfg.positive_iou_threshold)
      r.labels[a] = {SampleLabel::Kind::positive, best_gt};
    else if (gts.empty() || best < cfg.negative_iou_threshold)
      r.labels[a] = {SampleLabel::Kind::negative, 0};
    else
      r.labels[a] = {SampleLabel::Kind::ignored, 0};
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (best_anchor_iou[g] <= 0) continue;  // no overlapping anchor at all
    const std::size_t a = best_anchor[g];
    if (best_anchor_iou[g] > forced_iou[a]) {
      forced_iou[a] = best_anchor_iou[g];
      r.labels[a] = {SampleLabel::Kind::positive, g};
    }
  }
  detail::collect_unassigned(r, gts.size());
  return r;
}

}  // namespace dualdet
