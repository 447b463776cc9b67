#pragma once

#include <algorithm>
#include <cmath>

#include "dualdet/error.hpp"

namespace dualdet {

/// Axis-aligned box in corner form, pixel coordinates.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 <= x2 && y1 <= y2; }

  friend bool operator==(const Box&, const Box&) = default;
};

struct Point {
  double x = 0, y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Distances from a point to the left, top, right and bottom box edges.
struct LTRB {
  double left = 0, top = 0, right = 0, bottom = 0;

  double max() const { return std::max({left, top, right, bottom}); }
  double min() const { return std::min({left, top, right, bottom}); }
  friend bool operator==(const LTRB&, const LTRB&) = default;
};

inline double area(const Box& b) { return (b.x2 - b.x1) * (b.y2 - b.y1); }

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

/// Smallest box enclosing both inputs.
inline Box enclosing(const Box& a, const Box& b) {
  return {std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2),
          std::max(a.y2, b.y2)};
}

/// Intersection over union. Zero whenever the union has no area, so a
/// degenerate box has IoU 0 even against itself.
inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = area(a) + area(b) - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

/// Generalized IoU: iou - |C \ (a ∪ b)| / |C| with C the enclosing box.
/// Two coincident degenerate boxes give 0 (both terms vanish).
inline double giou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = area(a) + area(b) - inter;
  const double c = area(enclosing(a, b));
  const double i = uni > 0 ? inter / uni : 0.0;
  if (c <= 0) return i;
  return i - (c - uni) / c;
}

inline LTRB ltrb_encode(const Point& p, const Box& b) {
  return {p.x - b.x1, p.y - b.y1, b.x2 - p.x, b.y2 - p.y};
}

/// Inverse of ltrb_encode. Negative distances are clamped to zero first so
/// the result is always a valid box.
inline Box ltrb_decode(const Point& p, const LTRB& d) {
  const double l = std::max(0.0, d.left), t = std::max(0.0, d.top);
  const double r = std::max(0.0, d.right), btm = std::max(0.0, d.bottom);
  return {p.x - l, p.y - t, p.x + r, p.y + btm};
}

inline bool strictly_inside(const Point& p, const Box& b) {
  return p.x > b.x1 && p.x < b.x2 && p.y > b.y1 && p.y < b.y2;
}

/// FCOS center-ness: sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)).
/// Requires the point to lie strictly inside the box.
inline double centerness_target(const Point& p, const Box& b) {
  const LTRB d = ltrb_encode(p, b);
  if (!(d.min() > 0)) throw DomainError("centerness_target: point lies outside its box");
  const double h = std::min(d.left, d.right) / std::max(d.left, d.right);
  const double v = std::min(d.top, d.bottom) / std::max(d.top, d.bottom);
  return std::sqrt(h * v);
}

}  // namespace dualdet
