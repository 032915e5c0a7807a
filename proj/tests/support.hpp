#pragma once

// Independent oracles and small fixtures shared by the unit tests and the
// acceptance runner. Nothing here calls the code it is used to check.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "opd/augment.hpp"
#include "opd/cca.hpp"
#include "opd/datamodel.hpp"
#include "opd/eval.hpp"
#include "opd/random.hpp"
#include "opd/trainer.hpp"

namespace opd::testing {

inline Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = standard_normal(rng);
  return m;
}

inline Vec random_vec(Eigen::Index n, Rng& rng) { return random_mat(n, 1, rng).col(0); }

// ---------------------------------------------------------------------------
// CCA as the generalized symmetric eigenproblem
//   [0 Σxy; Σyx 0] v = ρ [Σxx 0; 0 Σyy] v
// whose top-k eigenvectors, normalized to vᵀBv = 1, carry (wx, wy)/√2.

struct CcaOracle {
  Vec correlations;
  Mat wx, wy;
};

inline CcaOracle oracle_cca(const Mat& x, const Mat& y, Eigen::Index k, double eps = 0.0) {
  const double n = static_cast<double>(x.rows());
  const Mat xc = x.rowwise() - x.colwise().mean();
  const Mat yc = y.rowwise() - y.colwise().mean();
  const Eigen::Index dx = x.cols(), dy = y.cols();
  Mat a = Mat::Zero(dx + dy, dx + dy), b = Mat::Zero(dx + dy, dx + dy);
  a.topRightCorner(dx, dy) = xc.transpose() * yc / n;
  a.bottomLeftCorner(dy, dx) = a.topRightCorner(dx, dy).transpose();
  b.topLeftCorner(dx, dx) = xc.transpose() * xc / n + eps * Mat::Identity(dx, dx);
  b.bottomRightCorner(dy, dy) = yc.transpose() * yc / n + eps * Mat::Identity(dy, dy);
  Eigen::GeneralizedSelfAdjointEigenSolver<Mat> es(a, b);
  CcaOracle o;
  o.correlations.resize(k);
  o.wx.resize(dx, k);
  o.wy.resize(dy, k);
  const Eigen::Index top = dx + dy - 1;  // eigenvalues ascend
  for (Eigen::Index i = 0; i < k; ++i) {
    o.correlations[i] = es.eigenvalues()[top - i];
    const Vec v = es.eigenvectors().col(top - i) * std::sqrt(2.0);
    o.wx.col(i) = v.head(dx);
    o.wy.col(i) = v.tail(dy);
  }
  return o;
}

// Largest |a − s·b| over columns, with s = ±1 chosen per column.
inline double max_diff_up_to_sign(const Mat& a, const Mat& b) {
  double worst = 0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    const double plus = (a.col(c) - b.col(c)).cwiseAbs().maxCoeff();
    const double minus = (a.col(c) + b.col(c)).cwiseAbs().maxCoeff();
    worst = std::max(worst, std::min(plus, minus));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Average precision by brute force: for every cutoff k, rerun greedy matching
// on the k best predictions from scratch and integrate the PR step curve.

inline std::size_t brute_force_true_positives(std::vector<ScoredPrediction> top,
                                              const std::map<std::string, std::vector<BoundingBox>>& gt, double thr) {
  std::map<std::string, std::set<std::size_t>> taken;
  std::size_t tp = 0;
  for (const auto& p : top) {
    auto it = gt.find(p.image_id);
    if (it == gt.end()) continue;
    double best = -1;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < it->second.size(); ++j) {
      if (taken[p.image_id].count(j)) continue;
      const auto& g = it->second[j];
      const double ix = std::max(0.0, std::min(p.box.x2, g.x2) - std::max(p.box.x1, g.x1));
      const double iy = std::max(0.0, std::min(p.box.y2, g.y2) - std::max(p.box.y1, g.y1));
      const double inter = ix * iy;
      const double o = inter > 0 ? inter / (p.box.area() + g.area() - inter) : 0.0;
      if (o > best) best = o, arg = j;
    }
    if (best >= thr) {
      taken[p.image_id].insert(arg);
      ++tp;
    }
  }
  return tp;
}

inline double brute_force_ap(std::vector<ScoredPrediction> preds, const std::map<std::string, std::vector<BoundingBox>>& gt,
                             double thr = 0.5) {
  std::size_t npos = 0;
  for (const auto& [_, v] : gt) npos += v.size();
  if (npos == 0) return 0.0;
  std::stable_sort(preds.begin(), preds.end(), [](const ScoredPrediction& a, const ScoredPrediction& b) {
    return std::make_tuple(-a.score, a.image_id, a.region_index) < std::make_tuple(-b.score, b.image_id, b.region_index);
  });
  double ap = 0, prev = 0;
  for (std::size_t k = 1; k <= preds.size(); ++k) {
    std::vector<ScoredPrediction> top(preds.begin(), preds.begin() + static_cast<long>(k));
    const std::size_t tp = brute_force_true_positives(top, gt, thr);
    const double precision = static_cast<double>(tp) / static_cast<double>(k);
    const double recall = static_cast<double>(tp) / static_cast<double>(npos);
    ap += (recall - prev) * precision;
    prev = recall;
  }
  return ap;
}

struct MapOracle {
  std::map<std::string, double> per_phrase;
  double bucket_mean = 0;
};

inline MapOracle brute_force_map(const std::vector<ScoredPrediction>& preds, const GroundTruthDataset& gt,
                                 const std::map<std::string, std::int64_t>& counts) {
  std::map<std::string, std::map<std::string, std::vector<BoundingBox>>> idx;
  for (const auto& img : gt.images)
    for (const auto& r : img.regions)
      for (const auto& l : r.phrases)
        if (!l.augmented) idx[l.text][img.image_id].push_back(r.box);
  MapOracle o;
  double sum[3] = {0, 0, 0};
  int n[3] = {0, 0, 0};
  for (const auto& [phrase, g] : idx) {
    std::vector<ScoredPrediction> mine;
    for (const auto& p : preds)
      if (p.phrase == phrase) mine.push_back(p);
    const double ap = brute_force_ap(mine, g);
    o.per_phrase[phrase] = ap;
    auto it = counts.find(phrase);
    const std::int64_t c = it == counts.end() ? 0 : it->second;
    const int b = c == 0 ? 0 : (c <= 100 ? 1 : 2);
    sum[b] += ap;
    ++n[b];
  }
  double total = 0;
  int used = 0;
  for (int b = 0; b < 3; ++b)
    if (n[b]) total += sum[b] / n[b], ++used;
  o.bucket_mean = used ? total / used : 0.0;
  return o;
}

// Random tiny detection instance: ≤10 images, ≤5 phrases, boxes on a coarse
// grid and scores from a small set so that ties and duplicates are common.
struct DetectionInstance {
  GroundTruthDataset gt;
  std::vector<ScoredPrediction> preds;
  std::map<std::string, std::int64_t> counts;
};

inline BoundingBox grid_box(Rng& rng) {
  const double x = static_cast<double>(uniform_index(rng, 4)) * 10, y = static_cast<double>(uniform_index(rng, 4)) * 10;
  const double w = 10.0 * static_cast<double>(1 + uniform_index(rng, 3)), h = 10.0 * static_cast<double>(1 + uniform_index(rng, 3));
  return {x, y, x + w, y + h};
}

inline DetectionInstance random_detection_instance(Rng& rng) {
  DetectionInstance inst;
  inst.gt.split = Split::Test;
  const std::size_t n_img = 1 + uniform_index(rng, 10), n_phr = 1 + uniform_index(rng, 5);
  std::vector<std::string> phrases;
  for (std::size_t p = 0; p < n_phr; ++p) phrases.push_back("phrase" + std::to_string(p));
  for (std::size_t i = 0; i < n_img; ++i) {
    ImageRecord img;
    img.image_id = "img" + std::to_string(i);
    const std::size_t regions = 1 + uniform_index(rng, 3);
    for (std::size_t r = 0; r < regions; ++r) {
      GtRegion reg;
      reg.box = grid_box(rng);
      reg.phrases.push_back({phrases[uniform_index(rng, n_phr)], false});
      img.regions.push_back(reg);
    }
    std::uint32_t index = 0;
    for (const auto& p : phrases) {
      const std::size_t k = uniform_index(rng, 4);
      for (std::size_t c = 0; c < k; ++c) {
        ScoredPrediction sp;
        sp.phrase = p;
        sp.image_id = img.image_id;
        sp.region_index = index++;
        sp.box = uniform01(rng) < 0.5 ? img.regions[uniform_index(rng, regions)].box : grid_box(rng);
        sp.score = static_cast<double>(uniform_index(rng, 4)) * 0.25;
        inst.preds.push_back(sp);
      }
    }
    inst.gt.images.push_back(img);
  }
  for (const auto& p : phrases) {
    const std::size_t pick = uniform_index(rng, 3);
    inst.counts[p] = pick == 0 ? 0 : (pick == 1 ? 7 : 250);
  }
  return inst;
}

// ---------------------------------------------------------------------------
// Fixtures

inline Lexicon jacket_lexicon() {
  Lexicon lex;
  for (const char* r : {"coat", "cover", "apparel"}) lex.add("jacket", r);
  return lex;
}

// A small grounded dataset with region/phrase features drawn from a shared
// latent code per phrase. Every image has two labeled regions plus proposals.
struct ToyData {
  GroundTruthDataset train;
  ProposalSet proposals;
  FeatureStore regions{6};
  FeatureStore phrases{5};
  TrainingData view() const { return {&train, &regions, &phrases, &proposals, nullptr}; }
};

inline ToyData toy_data(std::uint64_t seed, int images = 40, int n_phrases = 6) {
  Rng rng = derived_rng(seed, 99);
  ToyData t;
  t.train.split = Split::Train;
  const Mat to_r = random_mat(6, 3, rng), to_p = random_mat(5, 3, rng);
  std::vector<Vec> latent;
  for (int p = 0; p < n_phrases; ++p) {
    latent.push_back(2.0 * random_vec(3, rng));
    t.phrases.add("thing " + std::to_string(p), Vec(to_p * latent.back() + 0.1 * random_vec(5, rng)));
  }
  for (int i = 0; i < images; ++i) {
    ImageRecord img;
    img.image_id = "im" + std::to_string(i);
    for (int r = 0; r < 2; ++r) {
      const auto p = uniform_index(rng, static_cast<std::size_t>(n_phrases));
      GtRegion reg;
      reg.box = {r * 50.0, 0, r * 50.0 + 40, 40};
      reg.phrases.push_back({"thing " + std::to_string(p), false});
      img.regions.push_back(reg);
      t.regions.add(region_feature_id(img.image_id, static_cast<std::size_t>(r)),
                    Vec(to_r * latent[p] + 0.3 * random_vec(6, rng)));
    }
    auto& boxes = t.proposals.boxes[img.image_id];
    boxes.push_back({2, 2, 40, 40});
    boxes.push_back({0, 50, 30, 90});
    t.regions.add(proposal_feature_id(img.image_id, 0), t.regions.get(region_feature_id(img.image_id, 0)));
    t.regions.add(proposal_feature_id(img.image_id, 1), Vec(random_vec(6, rng)));
    t.train.images.push_back(img);
  }
  return t;
}

}  // namespace opd::testing
