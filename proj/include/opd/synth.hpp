#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "opd/boxes.hpp"
#include "opd/datamodel.hpp"
#include "opd/random.hpp"

// Two-view Gaussian-mixture benchmark. Each phrase is a fine-grained point
// (coarse cluster center plus offset) in a shared latent space; phrase
// features and annotated-region features are noisy linear images of that
// point in two different spaces, plus a few high-variance nuisance directions
// that carry no phrase information. Proposals mix their source region's
// features with background clutter in proportion to their overlap.
namespace opd {

struct SynthConfig {
  int clusters = 50;
  int phrases_per_cluster = 5;
  int train_regions = 5000;
  int test_regions = 1000;
  int max_regions_per_image = 3;
  int latent_dim = 12;
  int region_dim = 40;
  int phrase_dim = 30;
  int jittered_proposals = 4;  // per annotated region
  int background_proposals = 4;  // per image
  double zipf_exponent = 1.0;
  double zero_shot_fraction = 0.1;  // phrases that never occur in train
  double fine_scale = 0.5;
  double region_noise = 0.6;
  double phrase_noise = 0.1;
  int nuisance_rank = 8;  // high-variance directions unrelated to the phrase
  double nuisance_scale = 4.0;
  double image_size = 100.0;
  std::uint64_t seed = 0;
};

struct SynthBenchmark {
  GroundTruthDataset train;
  GroundTruthDataset test;
  ProposalSet train_proposals;
  ProposalSet test_proposals;
  FeatureStore region_features;
  FeatureStore phrase_features;

  SynthBenchmark(std::uint32_t region_dim, std::uint32_t phrase_dim)
      : region_features(region_dim), phrase_features(phrase_dim) {}
};

namespace detail {

inline Vec normal_vec(Eigen::Index n, Rng& rng) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = standard_normal(rng);
  return v;
}

inline Mat normal_mat(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = standard_normal(rng);
  return m;
}

inline BoundingBox random_box(double size, Rng& rng) {
  const double w = size * (0.15 + 0.35 * uniform01(rng)), h = size * (0.15 + 0.35 * uniform01(rng));
  const double x = (size - w) * uniform01(rng), y = (size - h) * uniform01(rng);
  return {x, y, x + w, y + h};
}

inline BoundingBox jitter_box(const BoundingBox& b, double size, Rng& rng) {
  const double w = b.width(), h = b.height();
  const double dx = 0.5 * w * (2 * uniform01(rng) - 1), dy = 0.5 * h * (2 * uniform01(rng) - 1);
  const double sw = std::exp(0.4 * (2 * uniform01(rng) - 1)), sh = std::exp(0.4 * (2 * uniform01(rng) - 1));
  const double cx = b.x1 + 0.5 * w + dx, cy = b.y1 + 0.5 * h + dy;
  BoundingBox j{cx - 0.5 * w * sw, cy - 0.5 * h * sh, cx + 0.5 * w * sw, cy + 0.5 * h * sh};
  j.x1 = std::clamp(j.x1, 0.0, size - 1);
  j.y1 = std::clamp(j.y1, 0.0, size - 1);
  j.x2 = std::clamp(j.x2, j.x1 + 1, size);
  j.y2 = std::clamp(j.y2, j.y1 + 1, size);
  return j;
}

inline std::string synth_phrase(int cluster, int fine) {
  return "kind" + std::to_string(cluster) + " variant" + std::to_string(fine);
}

}  // namespace detail

inline SynthBenchmark make_synthetic_benchmark(const SynthConfig& cfg) {
  if (cfg.clusters < 1 || cfg.phrases_per_cluster < 1 || cfg.train_regions < 1 || cfg.test_regions < 1 ||
      cfg.max_regions_per_image < 1 || cfg.latent_dim < 1 || cfg.region_dim < 1 || cfg.phrase_dim < 1)
    throw ConfigError("synthetic benchmark sizes must be positive");
  Rng rng = derived_rng(cfg.seed, 0x5e);
  const int np = cfg.clusters * cfg.phrases_per_cluster;
  const Eigen::Index L = cfg.latent_dim;
  SynthBenchmark out(static_cast<std::uint32_t>(cfg.region_dim), static_cast<std::uint32_t>(cfg.phrase_dim));

  std::vector<Vec> latent;
  std::vector<std::string> names;
  for (int c = 0; c < cfg.clusters; ++c) {
    const Vec center = 2.0 * detail::normal_vec(L, rng);
    for (int f = 0; f < cfg.phrases_per_cluster; ++f) {
      latent.push_back(center + cfg.fine_scale * detail::normal_vec(L, rng));
      names.push_back(detail::synth_phrase(c, f));
    }
  }
  const Mat to_region = detail::normal_mat(cfg.region_dim, L, rng) / std::sqrt(static_cast<double>(L));
  const Mat to_phrase = detail::normal_mat(cfg.phrase_dim, L, rng) / std::sqrt(static_cast<double>(L));

  const Eigen::Index nr = std::max(cfg.nuisance_rank, 0);
  const Mat region_nuisance = detail::normal_mat(cfg.region_dim, nr, rng) * (cfg.nuisance_scale / std::sqrt(static_cast<double>(cfg.region_dim)));
  const Mat phrase_nuisance = detail::normal_mat(cfg.phrase_dim, nr, rng) * (cfg.nuisance_scale / std::sqrt(static_cast<double>(cfg.phrase_dim)));
  auto region_clutter = [&]() {
    return Vec(region_nuisance * detail::normal_vec(nr, rng) + cfg.region_noise * detail::normal_vec(cfg.region_dim, rng));
  };

  for (int p = 0; p < np; ++p) {
    Vec y = to_phrase * latent[static_cast<std::size_t>(p)] + phrase_nuisance * detail::normal_vec(nr, rng) +
            cfg.phrase_noise * detail::normal_vec(cfg.phrase_dim, rng);
    out.phrase_features.add(names[static_cast<std::size_t>(p)], y);
  }

  // Zipf weights over a random rank order; the tail share is held out of train.
  std::vector<int> rank(static_cast<std::size_t>(np));
  std::iota(rank.begin(), rank.end(), 0);
  for (std::size_t i = rank.size(); i > 1; --i) std::swap(rank[i - 1], rank[uniform_index(rng, i)]);
  std::vector<double> train_w(static_cast<std::size_t>(np), 0.0);
  const int zero_shot = static_cast<int>(std::lround(cfg.zero_shot_fraction * np));
  for (int r = 0; r < np - zero_shot; ++r)
    train_w[static_cast<std::size_t>(rank[static_cast<std::size_t>(r)])] = 1.0 / std::pow(r + 1.0, cfg.zipf_exponent);
  const std::vector<double> test_w(static_cast<std::size_t>(np), 1.0);

  auto draw = [&](const std::vector<double>& w) {
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    double u = uniform01(rng) * total;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (u < w[i]) return static_cast<int>(i);
      u -= w[i];
    }
    return static_cast<int>(w.size() - 1);
  };
  auto background = [&]() { return Vec(to_region * (2.0 * detail::normal_vec(L, rng)) + region_clutter()); };

  auto build = [&](GroundTruthDataset& ds, ProposalSet& props, const std::vector<double>& weights, int regions,
                   const std::string& prefix, Split split) {
    ds.split = split;
    ds.mode = DatasetMode::FlickrLike;
    int made = 0, index = 0;
    while (made < regions) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%s%06d", prefix.c_str(), index++);
      ImageRecord img;
      img.image_id = buf;
      const int n = std::min(regions - made, 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(cfg.max_regions_per_image))));
      std::vector<Vec> feats;
      for (int r = 0; r < n; ++r) {
        const int p = draw(weights);
        GtRegion reg;
        reg.box = detail::random_box(cfg.image_size, rng);
        reg.phrases.push_back({names[static_cast<std::size_t>(p)], false});
        Vec x = to_region * (latent[static_cast<std::size_t>(p)] + cfg.region_noise * detail::normal_vec(L, rng)) +
                region_clutter();
        out.region_features.add(region_feature_id(img.image_id, static_cast<std::size_t>(r)), x);
        feats.push_back(std::move(x));
        img.regions.push_back(std::move(reg));
      }
      auto& boxes = props.boxes[img.image_id];
      for (int r = 0; r < n; ++r)
        for (int j = 0; j < cfg.jittered_proposals; ++j) {
          const auto& src = img.regions[static_cast<std::size_t>(r)].box;
          const BoundingBox b = detail::jitter_box(src, cfg.image_size, rng);
          const double o = iou(b, src);
          const Vec x = o * feats[static_cast<std::size_t>(r)] + (1.0 - o) * background();
          out.region_features.add(proposal_feature_id(img.image_id, boxes.size()), x);
          boxes.push_back(b);
        }
      for (int j = 0; j < cfg.background_proposals; ++j) {
        out.region_features.add(proposal_feature_id(img.image_id, boxes.size()), background());
        boxes.push_back(detail::random_box(cfg.image_size, rng));
      }
      made += n;
      ds.images.push_back(std::move(img));
    }
  };
  build(out.train, out.train_proposals, train_w, cfg.train_regions, "train", Split::Train);
  build(out.test, out.test_proposals, test_w, cfg.test_regions, "test", Split::Test);
  return out;
}

}  // namespace opd
