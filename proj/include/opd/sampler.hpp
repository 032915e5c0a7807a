#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "opd/datamodel.hpp"
#include "opd/random.hpp"

namespace opd {

struct SamplerConfig {
  int budget = 30;       // K: augmented phrases drawn per image
  int gt_subsample = 5;  // ground-truth phrases kept per image
  bool inverse_frequency = true;  // false: uniform random subsampling
  std::uint64_t seed = 0;
};

inline SamplerConfig default_sampler_config(DatasetMode mode) {
  SamplerConfig c;
  if (mode == DatasetMode::ReferItLike) c.gt_subsample = 2;
  return c;
}

// Sampling weights for one image's phrases from their global likelihoods:
// renormalize to q_i = p_i / Σp, invert as (1 − q_i), renormalize. With two
// phrases this is exactly w_i = 1 − q_i. Accumulates in extended precision so
// that each weight is the correctly rounded value of the formula.
inline std::vector<double> ifs_weights(std::span<const double> likelihoods) {
  std::vector<double> w;
  if (likelihoods.empty()) return w;
  if (likelihoods.size() == 1) return {1.0};
  long double total = 0;
  for (double p : likelihoods) {
    if (!(p > 0)) throw Error("ifs_weights: likelihoods must be positive");
    total += p;
  }
  std::vector<long double> inv;
  long double wsum = 0;
  for (double p : likelihoods) {
    inv.push_back(1.0L - p / total);
    wsum += inv.back();
  }
  for (auto x : inv) w.push_back(static_cast<double>(x / wsum));
  return w;
}

// Share of all phrase-region pairs in the (augmented) training set carried by
// each phrase.
inline std::map<std::string, double> phrase_likelihoods(const GroundTruthDataset& train) {
  std::map<std::string, double> counts;
  double total = 0;
  for (const auto& img : train.images)
    for (const auto& reg : img.regions)
      for (const auto& p : reg.phrases) {
        counts[p.text] += 1.0;
        total += 1.0;
      }
  for (auto& [_, c] : counts) c /= total;
  return counts;
}

struct ImageBatch {
  std::vector<std::string> ground_truth;
  std::vector<std::string> augmented;

  std::vector<std::string> all() const {
    auto out = ground_truth;
    out.insert(out.end(), augmented.begin(), augmented.end());
    return out;
  }
};

// Index drawn with probability proportional to weights (which need not sum to 1).
inline std::size_t weighted_draw(std::span<const double> weights, Rng& rng) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  const double u = uniform01(rng) * total;
  double acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  for (std::size_t i = weights.size(); i-- > 0;)
    if (weights[i] > 0) return i;
  return weights.size() - 1;
}

// All ground-truth phrases (at most gt_subsample, chosen uniformly), then up to
// `budget` augmented phrases drawn without replacement.
inline ImageBatch sample_image_batch(const ImageRecord& img, const std::map<std::string, double>& likelihoods,
                                     const SamplerConfig& cfg, Rng& rng) {
  std::set<std::string> gt, aug;
  for (const auto& reg : img.regions)
    for (const auto& p : reg.phrases) (p.augmented ? aug : gt).insert(p.text);
  for (const auto& g : gt) aug.erase(g);

  ImageBatch batch;
  batch.ground_truth.assign(gt.begin(), gt.end());
  if (cfg.gt_subsample >= 1 && batch.ground_truth.size() > static_cast<std::size_t>(cfg.gt_subsample)) {
    auto& v = batch.ground_truth;
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.gt_subsample); ++i)
      std::swap(v[i], v[i + uniform_index(rng, v.size() - i)]);
    v.resize(static_cast<std::size_t>(cfg.gt_subsample));
  }

  std::vector<std::string> pool(aug.begin(), aug.end());
  if (pool.empty() || cfg.budget <= 0) return batch;
  std::vector<double> weights;
  if (cfg.inverse_frequency) {
    std::vector<double> lik;
    for (const auto& p : pool) {
      auto it = likelihoods.find(p);
      lik.push_back(it != likelihoods.end() && it->second > 0 ? it->second : 1e-12);
    }
    weights = ifs_weights(lik);
  } else {
    weights.assign(pool.size(), 1.0);
  }
  while (!pool.empty() && batch.augmented.size() < static_cast<std::size_t>(cfg.budget)) {
    auto i = weighted_draw(weights, rng);
    batch.augmented.push_back(pool[i]);
    pool.erase(pool.begin() + static_cast<long>(i));
    weights.erase(weights.begin() + static_cast<long>(i));
    if (std::all_of(weights.begin(), weights.end(), [](double w) { return w <= 0; }))
      std::fill(weights.begin(), weights.end(), 1.0);
  }
  return batch;
}

}  // namespace opd
