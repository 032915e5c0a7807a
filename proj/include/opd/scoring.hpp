#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "opd/datamodel.hpp"
#include "opd/eval.hpp"
#include "opd/filter.hpp"
#include "opd/io.hpp"
#include "opd/model.hpp"

namespace opd {

struct ScoringInputs {
  const GroundTruthDataset* images = nullptr;
  const FeatureStore* region_features = nullptr;
  const FeatureStore* phrase_features = nullptr;
  const ProposalSet* proposals = nullptr;  // without proposals, annotated regions are the candidates
};

struct ScoringOptions {
  std::size_t top_k = 1;               // candidates kept per (phrase, image)
  const FilterSets* filters = nullptr;  // per-image phrase lists replacing `phrases`
  unsigned threads = 1;
};

struct ScoringResult {
  std::vector<ScoredPrediction> predictions;
  std::size_t missing_features = 0;
};

namespace detail {

inline std::vector<Candidate> scoring_candidates(const ScoringInputs& in, const ImageRecord& img) {
  std::vector<Candidate> out;
  if (in.proposals && !in.proposals->of(img.image_id).empty()) {
    const auto& boxes = in.proposals->of(img.image_id);
    for (std::size_t p = 0; p < boxes.size(); ++p) out.push_back({boxes[p], proposal_feature_id(img.image_id, p)});
  } else {
    for (std::size_t r = 0; r < img.regions.size(); ++r)
      out.push_back({img.regions[r].box, region_feature_id(img.image_id, r)});
  }
  return out;
}

}  // namespace detail

// Top-k candidates per (phrase, image) for every image of the dataset.
// Output order is image order, then phrase order, then rank.
inline ScoringResult score_images(const AlignmentModel& m, const ScoringInputs& in, const std::vector<std::string>& phrases,
                                  const ScoringOptions& opt = {}) {
  const auto& images = in.images->images;
  std::vector<std::vector<ScoredPrediction>> per_image(images.size());
  std::vector<std::size_t> missing(images.size(), 0);

  std::vector<std::string> global;
  for (const auto& p : phrases)
    if (in.phrase_features->contains(p)) global.push_back(p);
  const std::size_t global_missing = phrases.size() - global.size();
  const Mat global_emb = opt.filters ? Mat() : forward_rows(m.phrase, in.phrase_features->gather(global));

  auto work = [&](std::size_t i) {
    const auto& img = images[i];
    auto cands = detail::scoring_candidates(in, img);
    std::vector<std::string> ids;
    for (auto it = cands.begin(); it != cands.end();) {
      if (in.region_features->contains(it->feature_id)) {
        ids.push_back(it->feature_id);
        ++it;
      } else {
        ++missing[i];
        it = cands.erase(it);
      }
    }
    if (cands.empty()) return;
    std::vector<std::string> local;
    Mat local_emb;
    const std::vector<std::string>* names = &global;
    const Mat* pemb = &global_emb;
    if (opt.filters) {
      auto f = opt.filters->find(img.image_id);
      if (f != opt.filters->end())
        for (const auto& p : f->second) {
          if (in.phrase_features->contains(p)) local.push_back(p);
          else ++missing[i];
        }
      local_emb = forward_rows(m.phrase, in.phrase_features->gather(local));
      names = &local;
      pemb = &local_emb;
    }
    if (names->empty()) return;
    Embedded e{forward_rows(m.region, in.region_features->gather(ids)), *pemb};
    const Mat s = score_embedded(m, e);
    const std::size_t k = std::min(opt.top_k, cands.size());
    std::vector<std::uint32_t> order(cands.size());
    for (Eigen::Index p = 0; p < s.rows(); ++p) {
      std::iota(order.begin(), order.end(), 0u);
      std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (s(p, a) != s(p, b)) return s(p, a) > s(p, b);
        return a < b;
      });
      for (std::size_t r = 0; r < k; ++r) {
        const auto c = order[r];
        const BoundingBox box =
            refine_box(m, e.region.row(c).transpose(), e.phrase.row(p).transpose(), cands[c].box);
        per_image[i].push_back({(*names)[static_cast<std::size_t>(p)], img.image_id, c, box, s(p, c)});
      }
    }
  };

  const unsigned threads = std::max(1u, opt.threads);
  if (threads == 1) {
    for (std::size_t i = 0; i < images.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < images.size(); i += threads) work(i);
      });
    for (auto& th : pool) th.join();
  }

  ScoringResult res;
  res.missing_features = global_missing;
  for (std::size_t i = 0; i < images.size(); ++i) {
    res.missing_features += missing[i];
    for (auto& p : per_image[i]) res.predictions.push_back(std::move(p));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Score files (little-endian):
//   "OPDSCORE" | u32 version | u64 count |
//   per record: u16-prefixed phrase, u16-prefixed image id, u32 region index,
//               x1 y1 x2 y2 as f64, score as f64

inline constexpr std::string_view kScoreMagic = "OPDSCORE";
inline constexpr std::uint32_t kScoreVersion = 1;

inline void write_scores(const std::vector<ScoredPrediction>& preds, std::ostream& out) {
  io::put_bytes(out, kScoreMagic);
  io::put_le<std::uint32_t>(out, kScoreVersion);
  io::put_le<std::uint64_t>(out, preds.size());
  for (const auto& p : preds) {
    io::put_short_string(out, p.phrase);
    io::put_short_string(out, p.image_id);
    io::put_le<std::uint32_t>(out, p.region_index);
    for (double v : {p.box.x1, p.box.y1, p.box.x2, p.box.y2}) io::put_le<double>(out, v);
    io::put_le<double>(out, p.score);
  }
}

inline std::vector<ScoredPrediction> read_scores(std::istream& in) {
  io::expect_magic(in, kScoreMagic, "score file");
  const auto version = io::get_le<std::uint32_t>(in, "score file version");
  if (version != kScoreVersion) throw FormatError("unsupported score file version " + std::to_string(version));
  const auto n = io::get_le<std::uint64_t>(in, "record count");
  std::vector<ScoredPrediction> out;
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string what = "score record " + std::to_string(i);
    ScoredPrediction p;
    p.phrase = io::get_short_string(in, what);
    p.image_id = io::get_short_string(in, what);
    p.region_index = io::get_le<std::uint32_t>(in, what);
    p.box.x1 = io::get_le<double>(in, what);
    p.box.y1 = io::get_le<double>(in, what);
    p.box.x2 = io::get_le<double>(in, what);
    p.box.y2 = io::get_le<double>(in, what);
    p.score = io::get_le<double>(in, what);
    if (!std::isfinite(p.score)) throw FormatError(what + ": non-finite score");
    out.push_back(std::move(p));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("score file: trailing bytes after last record");
  return out;
}

inline void write_scores(const std::vector<ScoredPrediction>& preds, const std::string& path) {
  auto out = io::open_out(path);
  write_scores(preds, out);
}

inline std::vector<ScoredPrediction> read_scores(const std::string& path) {
  auto in = io::open_in(path);
  return read_scores(in);
}

}  // namespace opd
