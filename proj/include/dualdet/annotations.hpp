#pragma once

#include "dualdet/geometry.hpp"

namespace dualdet {

struct GroundTruth {
  Box box;
  int class_id = 0;
  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

/// A scored prediction after inference-time selection.
struct Detection {
  Box box;
  double score = 0;
  int class_id = 0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

}  // namespace dualdet
