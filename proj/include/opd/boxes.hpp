#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "opd/datamodel.hpp"

namespace opd {

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Center offsets scaled by anchor size, log size ratios.
using BoxDeltas = std::array<double, 4>;

inline BoxDeltas encode_box(const BoundingBox& box, const BoundingBox& anchor) {
  const double aw = anchor.width(), ah = anchor.height();
  const double bw = box.width(), bh = box.height();
  if (!(aw > 0 && ah > 0 && bw > 0 && bh > 0)) throw Error("encode_box: non-positive width or height");
  const double acx = anchor.x1 + 0.5 * aw, acy = anchor.y1 + 0.5 * ah;
  const double bcx = box.x1 + 0.5 * bw, bcy = box.y1 + 0.5 * bh;
  return {(bcx - acx) / aw, (bcy - acy) / ah, std::log(bw / aw), std::log(bh / ah)};
}

inline BoundingBox decode_box(const BoxDeltas& t, const BoundingBox& anchor) {
  const double aw = anchor.width(), ah = anchor.height();
  const double acx = anchor.x1 + 0.5 * aw, acy = anchor.y1 + 0.5 * ah;
  const double cx = acx + t[0] * aw, cy = acy + t[1] * ah;
  const double w = aw * std::exp(t[2]), h = ah * std::exp(t[3]);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

}  // namespace opd
