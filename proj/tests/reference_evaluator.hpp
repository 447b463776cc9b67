#pragma once

// From-scratch COCO-style evaluator used as a test oracle. It shares no
// code with the library evaluator beyond the box type: IoU is recomputed
// here and recall levels are compared in integer arithmetic.

#include <algorithm>
#include <array>
#include <cstddef>
#include <random>
#include <vector>

#include "dualdet/annotations.hpp"

namespace oracle {

inline double box_iou(const dualdet::Box& a, const dualdet::Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct RefResult {
  double ap = 0, ap50 = 0, ap75 = 0;
  std::array<double, 10> per_threshold{};
};

// 101-point AP from flags in rank order. Returns -1 when undefined.
inline double ref_ap(const std::vector<int>& flags, std::size_t gt_count) {
  if (gt_count == 0) return flags.empty() ? -1.0 : 0.0;
  const std::size_t n = flags.size();
  std::vector<std::size_t> tps(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) tps[i] = tp += static_cast<std::size_t>(flags[i]);
  double total = 0;
  for (std::size_t r = 0; r <= 100; ++r) {
    // best precision among ranks whose recall reaches r / 100
    double best = 0;
    bool any = false;
    for (std::size_t i = 0; i < n; ++i)
      if (tps[i] * 100 >= r * gt_count) {
        any = true;
        best = std::max(best, static_cast<double>(tps[i]) / static_cast<double>(i + 1));
      }
    if (any) total += best;
  }
  return total / 101.0;
}

inline RefResult reference_evaluate(const std::vector<std::vector<dualdet::Detection>>& dets,
                                    const std::vector<std::vector<dualdet::GroundTruth>>& gts, int num_classes) {
  RefResult out;
  int classes_with_gt = 0;
  std::vector<std::array<double, 10>> class_aps;
  for (int c = 0; c < num_classes; ++c) {
    std::size_t gt_count = 0;
    for (const auto& img : gts)
      for (const auto& g : img) gt_count += g.class_id == c;
    if (!gt_count) continue;
    ++classes_with_gt;
    std::array<double, 10> aps{};
    for (int t = 0; t < 10; ++t) {
      const double thr = 0.5 + 0.05 * t;
      struct Entry {
        double score;
        std::size_t image, pos;
        int tp;
      };
      std::vector<Entry> all;
      for (std::size_t im = 0; im < dets.size(); ++im) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < dets[im].size(); ++i)
          if (dets[im][i].class_id == c) idx.push_back(i);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return dets[im][a].score > dets[im][b].score; });
        std::vector<bool> taken(gts[im].size(), false);
        for (std::size_t rank = 0; rank < idx.size(); ++rank) {
          const auto& d = dets[im][idx[rank]];
          int pick = -1;
          double pick_iou = 0;
          for (std::size_t g = 0; g < gts[im].size(); ++g) {
            if (taken[g] || gts[im][g].class_id != c) continue;
            const double v = box_iou(d.box, gts[im][g].box);
            if (v >= thr && (pick < 0 || v > pick_iou)) {
              pick = static_cast<int>(g);
              pick_iou = v;
            }
          }
          if (pick >= 0) taken[static_cast<std::size_t>(pick)] = true;
          all.push_back({d.score, im, rank, pick >= 0 ? 1 : 0});
        }
      }
      std::stable_sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });
      std::vector<int> flags;
      for (const auto& e : all) flags.push_back(e.tp);
      aps[static_cast<std::size_t>(t)] = std::max(0.0, ref_ap(flags, gt_count));
    }
    class_aps.push_back(aps);
  }
  if (!classes_with_gt) return out;
  for (std::size_t t = 0; t < 10; ++t) {
    double s = 0;
    for (const auto& a : class_aps) s += a[t];
    out.per_threshold[t] = s / classes_with_gt;
  }
  double s = 0;
  for (double v : out.per_threshold) s += v;
  out.ap = s / 10;
  out.ap50 = out.per_threshold[0];
  out.ap75 = out.per_threshold[5];
  return out;
}

struct Fixture {
  std::vector<std::vector<dualdet::Detection>> dets;
  std::vector<std::vector<dualdet::GroundTruth>> gts;
};

/// Small random detection/annotation sets with many ties and near-misses.
inline Fixture random_fixture(std::mt19937& rng) {
  std::uniform_int_distribution<int> images(1, 4), ngt(0, 5), ndet(0, 8), pos(0, 20), size(2, 12), cls(0, 2),
      score(1, 6), jitter(-2, 2);
  Fixture f;
  const int n = images(rng);
  for (int i = 0; i < n; ++i) {
    std::vector<dualdet::GroundTruth> g;
    for (int k = ngt(rng); k > 0; --k) {
      const double x = pos(rng), y = pos(rng);
      g.push_back({{x, y, x + size(rng), y + size(rng)}, cls(rng)});
    }
    std::vector<dualdet::Detection> d;
    for (int k = ndet(rng); k > 0; --k) {
      dualdet::Box b;
      if (!g.empty() && k % 3 != 0) {
        const dualdet::Box& src = g[static_cast<std::size_t>(k) % g.size()].box;
        b = {src.x1 + jitter(rng), src.y1 + jitter(rng), src.x2 + jitter(rng), src.y2 + jitter(rng)};
        if (b.x2 <= b.x1) b.x2 = b.x1 + 1;
        if (b.y2 <= b.y1) b.y2 = b.y1 + 1;
      } else {
        const double x = pos(rng), y = pos(rng);
        b = {x, y, x + size(rng), y + size(rng)};
      }
      d.push_back({b, score(rng) / 6.0, cls(rng)});
    }
    f.gts.push_back(g);
    f.dets.push_back(d);
  }
  return f;
}

}  // namespace oracle
