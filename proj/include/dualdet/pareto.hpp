#pragma once

// Multi-objective helpers on finite candidate sets. All objectives are
// minimized.

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "dualdet/error.hpp"

namespace dualdet::pareto {

struct ObjectivePoint {
  std::vector<double> f;
  std::string id;

  friend bool operator==(const ObjectivePoint&, const ObjectivePoint&) = default;
};

using FeasibleSet = std::vector<ObjectivePoint>;

namespace detail {
inline std::size_t check_set(const FeasibleSet& s, const char* op) {
  if (s.empty()) throw DomainError(std::string(op) + ": empty set");
  const std::size_t m = s.front().f.size();
  for (const auto& p : s) {
    if (p.f.size() != m) throw DimensionError(std::string(op) + ": mixed objective dimensions");
    for (double v : p.f)
      if (!std::isfinite(v)) throw DomainError(std::string(op) + ": non-finite objective");
  }
  return m;
}
}  // namespace detail

/// q dominates p: no worse in every objective, strictly better in one.
inline bool dominates(const std::vector<double>& q, const std::vector<double>& p) {
  bool strictly = false;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (q[i] > p[i]) return false;
    if (q[i] < p[i]) strictly = true;
  }
  return strictly;
}

/// Componentwise minimum.
inline std::vector<double> utopia_point(const FeasibleSet& s) {
  const std::size_t m = detail::check_set(s, "utopia_point");
  std::vector<double> u(m, std::numeric_limits<double>::infinity());
  for (const auto& p : s)
    for (std::size_t i = 0; i < m; ++i) u[i] = std::min(u[i], p.f[i]);
  return u;
}

inline bool is_pareto_optimal(const ObjectivePoint& p, const FeasibleSet& s) {
  detail::check_set(s, "is_pareto_optimal");
  bool member = false;
  for (const auto& q : s) member = member || q.f == p.f;
  if (!member) throw DomainError("is_pareto_optimal: point is not in the set");
  for (const auto& q : s)
    if (dominates(q.f, p.f)) return false;
  return true;
}

/// Non-dominated points in input order; duplicates of a front point are kept.
inline FeasibleSet pareto_front(const FeasibleSet& s) {
  detail::check_set(s, "pareto_front");
  FeasibleSet out;
  for (const auto& p : s) {
    bool dominated = false;
    for (const auto& q : s)
      if (dominates(q.f, p.f)) {
        dominated = true;
        break;
      }
    if (!dominated) out.push_back(p);
  }
  return out;
}

inline double weighted_sum(const ObjectivePoint& p, const std::vector<double>& w) {
  if (w.size() != p.f.size())
    throw DimensionError("weighted_sum: " + std::to_string(w.size()) + " weights for " + std::to_string(p.f.size()) +
                         " objectives");
  double total = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] < 0) throw DomainError("weighted_sum: negative weight");
    total += w[i] * p.f[i];
  }
  return total;
}

/// Minimizer of the weighted sum, lowest index on ties. With strictly
/// positive weights the result is Pareto optimal.
inline ObjectivePoint argmin_weighted(const FeasibleSet& s, const std::vector<double>& w) {
  detail::check_set(s, "argmin_weighted");
  for (double x : w)
    if (!(x > 0)) throw DomainError("argmin_weighted: weights must be strictly positive");
  std::size_t best = 0;
  double best_value = weighted_sum(s[0], w);
  for (std::size_t i = 1; i < s.size(); ++i) {
    const double v = weighted_sum(s[i], w);
    if (v < best_value) {
      best_value = v;
      best = i;
    }
  }
  return s[best];
}

}  // namespace dualdet::pareto
