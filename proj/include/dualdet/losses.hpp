#pragma once

// Detection losses, scalar and differentiable forms, and the weighted
// combinations used to train the two heads:
//
//   l_o2o = a_cls * cls + a_reg * reg + a_iou * iou
//   l_o2m = b_cls * cls + b_reg * reg + b_ctr * ctr
//   l_DA  = lambda_o2o * l_o2o + lambda_o2m * l_o2m
//
// Every per-image term is normalized by max(#positives, 1) and the result
// is averaged over the batch.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "dualdet/annotations.hpp"
#include "dualdet/assignment.hpp"
#include "dualdet/error.hpp"
#include "dualdet/geometry.hpp"
#include "dualdet/tensor.hpp"

namespace dualdet {

/// Probabilities are clamped into [kProbEps, 1 - kProbEps] before any log.
inline constexpr double kProbEps = 1e-6;

struct LossWeights {
  double lambda_o2o = 1, lambda_o2m = 1;
  double alpha_cls = 2, alpha_reg = 5, alpha_iou = 2;
  double beta_cls = 1, beta_reg = 1, beta_ctr = 1;
  double focal_alpha = 0.25, focal_gamma = 2;

  void validate() const {
    for (double w : {lambda_o2o, lambda_o2m, alpha_cls, alpha_reg, alpha_iou, beta_cls, beta_reg,
                     beta_ctr, focal_gamma})
      if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
    if (!(focal_alpha >= 0 && focal_alpha <= 1)) throw ConfigError("focal alpha outside [0,1]");
  }
};

struct LossReport {
  double l_o2o_cls = 0, l_o2o_reg = 0, l_o2o_iou = 0;
  double l_o2m_cls = 0, l_o2m_reg = 0, l_o2m_ctr = 0;
  double l_o2o = 0, l_o2m = 0, l_DA = 0;
};

enum class O2MStyle { fcos, retina };

// ---------------------------------------------------------------------------
// Scalar forms

inline double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

inline double focal_loss(double p, int target, double alpha_t, double gamma) {
  p = clamp_prob(p);
  const double pt = target ? p : 1.0 - p;
  const double a = target ? alpha_t : 1.0 - alpha_t;
  return -a * std::pow(1.0 - pt, gamma) * std::log(pt);
}

inline double giou_loss(const Box& pred, const Box& gt) { return 1.0 - giou(pred, gt); }

inline double l1_loss(const LTRB& pred, const LTRB& target) {
  return (std::abs(pred.left - target.left) + std::abs(pred.top - target.top) +
          std::abs(pred.right - target.right) + std::abs(pred.bottom - target.bottom)) /
         4.0;
}

inline double bce_loss(double p, double target) {
  p = clamp_prob(p);
  return -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
}

inline double dual_loss(double l_o2o, double l_o2m, const LossWeights& w) {
  return w.lambda_o2o * l_o2o + w.lambda_o2m * l_o2m;
}

// ---------------------------------------------------------------------------
// Differentiable forms. Each returns sum_i weight_i * loss_i as a scalar tensor.

namespace loss {

inline ad::Tensor column(const ad::Tensor& m4, std::size_t c) {
  const std::size_t rows = m4.size() / 4;
  std::vector<std::size_t> idx(rows);
  for (std::size_t i = 0; i < rows; ++i) idx[i] = i * 4 + c;
  return ad::gather(m4, std::move(idx), {rows});
}

inline ad::Tensor constant(std::vector<double> v) {
  const std::size_t n = v.size();
  return ad::Tensor({n}, std::move(v));
}

/// Sigmoid focal loss on logits with {0,1} targets.
inline ad::Tensor focal(const ad::Tensor& logits, const std::vector<double>& targets,
                        const std::vector<double>& weights, double alpha_t, double gamma) {
  const std::size_t n = logits.size();
  if (targets.size() != n || weights.size() != n) throw ShapeError("focal: target/weight size mismatch");
  std::vector<double> slope(n), offset(n), w(n);
  for (std::size_t i = 0; i < n; ++i) {
    slope[i] = targets[i] ? 1.0 : -1.0;  // p_t = p or 1 - p
    offset[i] = targets[i] ? 0.0 : 1.0;
    w[i] = -weights[i] * (targets[i] ? alpha_t : 1.0 - alpha_t);
  }
  const ad::Tensor flat = ad::reshape(logits, {n});
  const ad::Tensor p = ad::clamp(ad::sigmoid(flat), kProbEps, 1.0 - kProbEps);
  const ad::Tensor pt = ad::add(ad::mul(p, constant(std::move(slope))), constant(std::move(offset)));
  const ad::Tensor mod = ad::pow(ad::rsub(1.0, pt), gamma);
  return ad::sum(ad::mul(ad::mul(mod, ad::log(pt)), constant(std::move(w))));
}

/// Binary cross-entropy on logits with soft targets.
inline ad::Tensor bce(const ad::Tensor& logits, const std::vector<double>& targets,
                      const std::vector<double>& weights) {
  const std::size_t n = logits.size();
  if (targets.size() != n || weights.size() != n) throw ShapeError("bce: target/weight size mismatch");
  std::vector<double> neg_t(n), neg_1mt(n);
  for (std::size_t i = 0; i < n; ++i) {
    neg_t[i] = -weights[i] * targets[i];
    neg_1mt[i] = -weights[i] * (1.0 - targets[i]);
  }
  const ad::Tensor p = ad::clamp(ad::sigmoid(ad::reshape(logits, {n})), kProbEps, 1.0 - kProbEps);
  return ad::sum(ad::add(ad::mul(ad::log(p), constant(std::move(neg_t))),
                         ad::mul(ad::log(ad::rsub(1.0, p)), constant(std::move(neg_1mt)))));
}

/// GIoU loss between boxes decoded from LTRB distances [M,4] at `points`
/// and target boxes.
inline ad::Tensor giou(const ad::Tensor& ltrb, const std::vector<Point>& points,
                       const std::vector<Box>& targets, const std::vector<double>& weights) {
  const std::size_t m = points.size();
  if (ltrb.size() != 4 * m || targets.size() != m || weights.size() != m)
    throw ShapeError("giou: size mismatch");
  if (m == 0) return ad::Tensor::scalar(0.0);
  std::vector<double> px(m), py(m), gx1(m), gy1(m), gx2(m), gy2(m), garea(m);
  for (std::size_t i = 0; i < m; ++i) {
    px[i] = points[i].x;
    py[i] = points[i].y;
    gx1[i] = targets[i].x1;
    gy1[i] = targets[i].y1;
    gx2[i] = targets[i].x2;
    gy2[i] = targets[i].y2;
    garea[i] = area(targets[i]);
  }
  const ad::Tensor l = column(ltrb, 0), t = column(ltrb, 1), r = column(ltrb, 2), b = column(ltrb, 3);
  const ad::Tensor cx = constant(px), cy = constant(py);
  const ad::Tensor x1 = ad::sub(cx, l), y1 = ad::sub(cy, t), x2 = ad::add(cx, r), y2 = ad::add(cy, b);
  const ad::Tensor Gx1 = constant(gx1), Gy1 = constant(gy1), Gx2 = constant(gx2), Gy2 = constant(gy2);

  const ad::Tensor iw = ad::relu(ad::sub(ad::minimum(x2, Gx2), ad::maximum(x1, Gx1)));
  const ad::Tensor ih = ad::relu(ad::sub(ad::minimum(y2, Gy2), ad::maximum(y1, Gy1)));
  const ad::Tensor inter = ad::mul(iw, ih);
  const ad::Tensor pred_area = ad::mul(ad::add(l, r), ad::add(t, b));
  const ad::Tensor uni = ad::sub(ad::add(pred_area, constant(garea)), inter);
  const ad::Tensor cw = ad::sub(ad::maximum(x2, Gx2), ad::minimum(x1, Gx1));
  const ad::Tensor ch = ad::sub(ad::maximum(y2, Gy2), ad::minimum(y1, Gy1));
  const ad::Tensor enclose = ad::mul(cw, ch);
  const ad::Tensor g = ad::sub(ad::div(inter, uni), ad::div(ad::sub(enclose, uni), enclose));
  return ad::sum(ad::mul(ad::rsub(1.0, g), constant(weights)));
}

/// Mean absolute LTRB error, each side divided by `scale`.
inline ad::Tensor l1(const ad::Tensor& ltrb, const std::vector<LTRB>& targets,
                     const std::vector<double>& weights, double scale) {
  const std::size_t m = targets.size();
  if (ltrb.size() != 4 * m || weights.size() != m) throw ShapeError("l1: size mismatch");
  if (m == 0) return ad::Tensor::scalar(0.0);
  std::vector<double> t(4 * m), w(4 * m);
  for (std::size_t i = 0; i < m; ++i) {
    t[4 * i] = targets[i].left;
    t[4 * i + 1] = targets[i].top;
    t[4 * i + 2] = targets[i].right;
    t[4 * i + 3] = targets[i].bottom;
    for (std::size_t c = 0; c < 4; ++c) w[4 * i + c] = weights[i] / (4.0 * scale);
  }
  const ad::Tensor diff = ad::sub(ad::reshape(ltrb, {4 * m}), constant(std::move(t)));
  return ad::sum(ad::mul(ad::abs(diff), constant(std::move(w))));
}

}  // namespace loss

// ---------------------------------------------------------------------------
// Branch losses

/// Differentiable outputs of one head over a batch. Locations are flattened
/// across pyramid levels (and anchors, for anchor-based heads).
struct HeadOutput {
  ad::Tensor cls_logits;         // [N, L, K]
  ad::Tensor ltrb;               // [N, L, 4], pixel distances > 0
  ad::Tensor centerness_logits;  // [N, L]; undefined when the head has none
  std::vector<Point> points;     // [L]
  double l1_scale = 64;          // divisor for L1 regression (image extent)

  std::size_t batch() const { return cls_logits.dim(0); }
  std::size_t locations() const { return cls_logits.dim(1); }
  std::size_t classes() const { return cls_logits.dim(2); }
  bool has_centerness() const { return centerness_logits.defined(); }

  /// Sigmoid class probabilities, boxes and points of one image, detached.
  CandidateSet candidates(std::size_t image) const {
    CandidateSet c;
    const std::size_t L = locations(), K = classes();
    c.num_classes = K;
    c.class_prob.resize(L * K);
    const auto logits = cls_logits.values().subspan(image * L * K, L * K);
    for (std::size_t i = 0; i < L * K; ++i) c.class_prob[i] = 1.0 / (1.0 + std::exp(-logits[i]));
    c.points = points;
    c.boxes.resize(L);
    const auto d = ltrb.values().subspan(image * L * 4, L * 4);
    for (std::size_t l = 0; l < L; ++l)
      c.boxes[l] = ltrb_decode(points[l], {d[4 * l], d[4 * l + 1], d[4 * l + 2], d[4 * l + 3]});
    return c;
  }
};

struct BranchLoss {
  ad::Tensor total, cls, reg, third;  // third = iou (o2o) or centerness (o2m)
};

namespace detail {

struct PositiveSet {
  std::vector<std::size_t> ltrb_index;  // flat indices into [N, L, 4]
  std::vector<std::size_t> ctr_index;   // flat indices into [N, L]
  std::vector<Point> points;
  std::vector<Box> boxes;
  std::vector<LTRB> ltrb_targets;
  std::vector<double> centerness;
  std::vector<double> weights;
};

inline void check_batch(const HeadOutput& head, const std::vector<AssignmentResult>& assignments,
                        const std::vector<std::vector<GroundTruth>>& gts) {
  if (assignments.size() != head.batch() || gts.size() != head.batch())
    throw ShapeError("branch loss: batch size mismatch between head, assignments and annotations");
  for (const auto& a : assignments)
    if (a.labels.size() != head.locations())
      throw ShapeError("branch loss: assignment covers " + std::to_string(a.labels.size()) +
                       " predictions, head has " + std::to_string(head.locations()));
}

// Focal targets/weights over every (image, location, class); ignored
// samples get weight 0.
inline void classification_targets(const HeadOutput& head,
                                   const std::vector<AssignmentResult>& assignments,
                                   const std::vector<std::vector<GroundTruth>>& gts,
                                   std::vector<double>& targets, std::vector<double>& weights) {
  const std::size_t N = head.batch(), L = head.locations(), K = head.classes();
  targets.assign(N * L * K, 0.0);
  weights.assign(N * L * K, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    const double w = 1.0 / (static_cast<double>(std::max<std::size_t>(assignments[n].positive_count, 1)) *
                            static_cast<double>(N));
    for (std::size_t l = 0; l < L; ++l) {
      const auto& lab = assignments[n].labels[l];
      if (lab.ignored()) continue;
      for (std::size_t k = 0; k < K; ++k) weights[(n * L + l) * K + k] = w;
      if (lab.positive()) {
        const int cls = gts[n][lab.gt].class_id;
        if (cls < 0 || static_cast<std::size_t>(cls) >= K) throw DomainError("branch loss: class id out of range");
        targets[(n * L + l) * K + static_cast<std::size_t>(cls)] = 1.0;
      }
    }
  }
}

inline PositiveSet positives(const HeadOutput& head, const std::vector<AssignmentResult>& assignments,
                             const std::vector<std::vector<GroundTruth>>& gts) {
  PositiveSet s;
  const std::size_t N = head.batch(), L = head.locations();
  for (std::size_t n = 0; n < N; ++n) {
    const double w = 1.0 / (static_cast<double>(std::max<std::size_t>(assignments[n].positive_count, 1)) *
                            static_cast<double>(N));
    for (std::size_t l = 0; l < L; ++l) {
      const auto& lab = assignments[n].labels[l];
      if (!lab.positive()) continue;
      for (std::size_t c = 0; c < 4; ++c) s.ltrb_index.push_back((n * L + l) * 4 + c);
      s.ctr_index.push_back(n * L + l);
      s.points.push_back(head.points[l]);
      s.boxes.push_back(gts[n][lab.gt].box);
      s.ltrb_targets.push_back(ltrb_encode(head.points[l], gts[n][lab.gt].box));
      s.centerness.push_back(assignments[n].has_centerness() ? assignments[n].centerness[l] : 0.0);
      s.weights.push_back(w);
    }
  }
  return s;
}

}  // namespace detail

/// One-to-one branch: focal classification over all predictions, L1 and
/// GIoU regression over the matched ones.
inline BranchLoss branch_loss_o2o(const HeadOutput& head, const std::vector<AssignmentResult>& assignments,
                                  const std::vector<std::vector<GroundTruth>>& gts, const LossWeights& w) {
  detail::check_batch(head, assignments, gts);
  std::vector<double> targets, weights;
  detail::classification_targets(head, assignments, gts, targets, weights);
  BranchLoss out;
  out.cls = loss::focal(head.cls_logits, targets, weights, w.focal_alpha, w.focal_gamma);
  const auto pos = detail::positives(head, assignments, gts);
  const std::size_t m = pos.points.size();
  const ad::Tensor ltrb = ad::gather(head.ltrb, pos.ltrb_index, {m, 4});
  out.reg = loss::l1(ltrb, pos.ltrb_targets, pos.weights, head.l1_scale);
  out.third = loss::giou(ltrb, pos.points, pos.boxes, pos.weights);
  out.total = ad::add(ad::add(ad::mul(out.cls, w.alpha_cls), ad::mul(out.reg, w.alpha_reg)),
                      ad::mul(out.third, w.alpha_iou));
  return out;
}

/// One-to-many branch: focal classification (ignored anchors excluded), GIoU
/// regression over positives and, for FCOS style, center-ness BCE over
/// positives. The center-ness term is identically zero for RetinaNet style.
inline BranchLoss branch_loss_o2m(const HeadOutput& head, const std::vector<AssignmentResult>& assignments,
                                  const std::vector<std::vector<GroundTruth>>& gts, const LossWeights& w,
                                  O2MStyle style) {
  detail::check_batch(head, assignments, gts);
  if (style == O2MStyle::fcos) {
    if (!head.has_centerness()) throw ConfigError("branch_loss_o2m: fcos head without center-ness output");
    for (const auto& a : assignments)
      if (!a.has_centerness()) throw ConfigError("branch_loss_o2m: fcos style requires center-ness targets");
  }
  std::vector<double> targets, weights;
  detail::classification_targets(head, assignments, gts, targets, weights);
  BranchLoss out;
  out.cls = loss::focal(head.cls_logits, targets, weights, w.focal_alpha, w.focal_gamma);
  const auto pos = detail::positives(head, assignments, gts);
  const std::size_t m = pos.points.size();
  out.reg = loss::giou(ad::gather(head.ltrb, pos.ltrb_index, {m, 4}), pos.points, pos.boxes, pos.weights);
  if (style == O2MStyle::fcos && m > 0)
    out.third = loss::bce(ad::gather(head.centerness_logits, pos.ctr_index, {m}), pos.centerness, pos.weights);
  else
    out.third = ad::Tensor::scalar(0.0);
  const double ctr_weight = style == O2MStyle::fcos ? w.beta_ctr : 0.0;
  out.total = ad::add(ad::add(ad::mul(out.cls, w.beta_cls), ad::mul(out.reg, w.beta_reg)),
                      ad::mul(out.third, ctr_weight));
  return out;
}

/// lambda_o2o * l_o2o + lambda_o2m * l_o2m on tensors.
inline ad::Tensor dual_loss(const ad::Tensor& l_o2o, const ad::Tensor& l_o2m, const LossWeights& w) {
  return ad::add(ad::mul(l_o2o, w.lambda_o2o), ad::mul(l_o2m, w.lambda_o2m));
}

}  // namespace dualdet
