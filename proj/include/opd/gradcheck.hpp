#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "opd/common.hpp"
#include "opd/random.hpp"

namespace opd {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates where the loss has a kink within ±step
};

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t max_coords = 0;  // 0: every coordinate
  double denom_floor = 1e-6;
  std::uint64_t seed = 0;
};

// Central differences against an analytic gradient. A coordinate whose forward
// and backward one-sided slopes disagree is treated as non-smooth and skipped.
inline GradCheckResult grad_check(const std::function<double(const Vec&)>& loss, const Vec& params,
                                  const Vec& analytic, const GradCheckOptions& opt = {}) {
  if (analytic.size() != params.size()) throw Error("grad_check: gradient size mismatch");
  std::vector<Eigen::Index> coords(static_cast<std::size_t>(params.size()));
  std::iota(coords.begin(), coords.end(), 0);
  if (opt.max_coords && opt.max_coords < coords.size()) {
    Rng rng(opt.seed);
    for (std::size_t i = 0; i < opt.max_coords; ++i) std::swap(coords[i], coords[i + uniform_index(rng, coords.size() - i)]);
    coords.resize(opt.max_coords);
  }
  GradCheckResult res;
  const double f0 = loss(params);
  Vec x = params;
  const double h = opt.step;
  for (auto i : coords) {
    x[i] = params[i] + h;
    const double fp = loss(x);
    x[i] = params[i] - h;
    const double fm = loss(x);
    x[i] = params[i];
    const double fwd = (fp - f0) / h, bwd = (f0 - fm) / h;
    if (std::abs(fwd - bwd) > std::max(1e-2 * std::max(std::abs(fwd), std::abs(bwd)), 1e3 * h)) {
      ++res.skipped;
      continue;
    }
    const double numeric = (fp - fm) / (2 * h);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), opt.denom_floor});
    res.max_rel_error = std::max(res.max_rel_error, std::abs(numeric - analytic[i]) / denom);
    ++res.checked;
  }
  return res;
}

}  // namespace opd
