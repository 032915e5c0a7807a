#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "opd/boxes.hpp"
#include "opd/datamodel.hpp"

namespace opd {

inline constexpr double kEvalIou = 0.5;

struct ScoredPrediction {
  std::string phrase;
  std::string image_id;
  std::uint32_t region_index = 0;
  BoundingBox box;
  double score = 0.0;
};

// Higher score first; ties by (image_id, region_index).
inline bool ranks_before(const ScoredPrediction& a, const ScoredPrediction& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.image_id, a.region_index) < std::tie(b.image_id, b.region_index);
}

struct EvalOptions {
  bool include_augmented = false;  // augmented test labels count as ground truth
  double iou_threshold = kEvalIou;
};

struct EvalReport {
  std::string metric;
  std::array<double, 3> bucket_value{};
  std::array<std::size_t, 3> bucket_phrases{};
  std::array<std::size_t, 3> bucket_instances{};
  double overall = 0.0;           // per `overall_convention`
  std::string overall_convention;  // "bucket_mean" or "instance_weighted"
  double bucket_mean = 0.0;
  double instance_weighted = 0.0;
  std::map<std::string, double> per_phrase;
  std::size_t evaluated_phrases = 0;
  std::size_t evaluated_instances = 0;
  std::size_t warnings = 0;

  double bucket(FrequencyBucket b) const { return bucket_value[static_cast<int>(b)]; }
};

// phrase → image → boxes
using GtIndex = std::map<std::string, std::map<std::string, std::vector<BoundingBox>>>;

inline GtIndex index_ground_truth(const GroundTruthDataset& gt, bool include_augmented) {
  GtIndex idx;
  for (const auto& img : gt.images)
    for (const auto& reg : img.regions)
      for (const auto& p : reg.phrases)
        if (include_augmented || !p.augmented) idx[p.text][img.image_id].push_back(reg.box);
  return idx;
}

// Mean over buckets that contain at least one phrase.
inline double mean_of_nonempty(const std::array<double, 3>& v, const std::array<std::size_t, 3>& n) {
  double s = 0;
  int k = 0;
  for (int b = 0; b < 3; ++b)
    if (n[b] > 0) s += v[b], ++k;
  return k ? s / k : 0.0;
}

// --------------------------------------------------------------------------
// Detection

struct PhraseAp {
  double ap = 0.0;
  std::size_t positives = 0;
  std::vector<double> precision, recall;  // one point per ranked candidate
};

// Greedy one-to-one matching in rank order; AP is the exact area under the
// precision/recall step curve, Σ_k (R_k − R_{k−1}) · P_k over ranks k.
inline PhraseAp phrase_average_precision(std::vector<ScoredPrediction> preds,
                                         const std::map<std::string, std::vector<BoundingBox>>& gt_by_image,
                                         double iou_threshold, bool keep_curve = false) {
  PhraseAp out;
  for (const auto& [_, boxes] : gt_by_image) out.positives += boxes.size();
  if (out.positives == 0) return out;
  std::sort(preds.begin(), preds.end(), ranks_before);
  std::map<std::string, std::vector<bool>> used;
  for (const auto& [img, boxes] : gt_by_image) used[img].assign(boxes.size(), false);
  std::size_t tp = 0;
  double prev_recall = 0.0;
  for (std::size_t rank = 0; rank < preds.size(); ++rank) {
    const auto& p = preds[rank];
    auto it = gt_by_image.find(p.image_id);
    if (it != gt_by_image.end()) {
      auto& flags = used[p.image_id];
      double best = -1;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < it->second.size(); ++j) {
        if (flags[j]) continue;
        double o = iou(p.box, it->second[j]);
        if (o > best) best = o, best_j = j;
      }
      if (best >= iou_threshold) {
        flags[best_j] = true;
        ++tp;
      }
    }
    const double precision = static_cast<double>(tp) / static_cast<double>(rank + 1);
    const double recall = static_cast<double>(tp) / static_cast<double>(out.positives);
    out.ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    if (keep_curve) {
      out.precision.push_back(precision);
      out.recall.push_back(recall);
    }
  }
  return out;
}

// mAP across phrases with at least one ground-truth instance, split into
// frequency buckets; overall is the mean of the bucket mAPs.
inline EvalReport detection_map(const std::vector<ScoredPrediction>& predictions, const GroundTruthDataset& gt,
                                const std::map<std::string, std::int64_t>& train_counts, const EvalOptions& opt = {}) {
  EvalReport rep;
  rep.metric = "detection_map";
  rep.overall_convention = "bucket_mean";
  const auto idx = index_ground_truth(gt, opt.include_augmented);
  std::map<std::string, std::vector<ScoredPrediction>> by_phrase;
  for (const auto& p : predictions)
    if (idx.count(p.phrase)) by_phrase[p.phrase].push_back(p);
  std::array<double, 3> sums{};
  for (const auto& [phrase, per_image] : idx) {
    auto ap = phrase_average_precision(by_phrase[phrase], per_image, opt.iou_threshold);
    int b = static_cast<int>(bucket_of(count_of(train_counts, phrase)));
    sums[b] += ap.ap;
    rep.bucket_phrases[b] += 1;
    rep.bucket_instances[b] += ap.positives;
    rep.per_phrase[phrase] = ap.ap;
    rep.evaluated_instances += ap.positives;
  }
  rep.evaluated_phrases = idx.size();
  double total = 0;
  for (int b = 0; b < 3; ++b) {
    rep.bucket_value[b] = rep.bucket_phrases[b] ? sums[b] / static_cast<double>(rep.bucket_phrases[b]) : 0.0;
    total += sums[b];
  }
  rep.bucket_mean = mean_of_nonempty(rep.bucket_value, rep.bucket_phrases);
  rep.instance_weighted = rep.evaluated_phrases ? total / static_cast<double>(rep.evaluated_phrases) : 0.0;
  rep.overall = rep.bucket_mean;
  return rep;
}

// Keeps the k best candidates per (phrase, image).
inline std::vector<ScoredPrediction> top_k_per_phrase_image(std::vector<ScoredPrediction> preds, std::size_t k) {
  std::sort(preds.begin(), preds.end(), [](const ScoredPrediction& a, const ScoredPrediction& b) {
    if (a.phrase != b.phrase) return a.phrase < b.phrase;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return ranks_before(a, b);
  });
  std::vector<ScoredPrediction> out;
  std::size_t run = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (i == 0 || preds[i].phrase != preds[i - 1].phrase || preds[i].image_id != preds[i - 1].image_id) run = 0;
    if (run++ < k) out.push_back(preds[i]);
  }
  return out;
}

// --------------------------------------------------------------------------
// Localization

namespace detail {

// Aggregates per-(image, phrase) success flags into a report.
inline EvalReport aggregate_instances(std::string metric, const std::map<std::pair<std::string, std::string>, bool>& hits,
                                      const std::map<std::string, std::int64_t>& train_counts) {
  EvalReport rep;
  rep.metric = std::move(metric);
  rep.overall_convention = "instance_weighted";
  std::array<std::size_t, 3> ok{};
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_phrase;
  std::set<std::string> phrases_by_bucket[3];
  for (const auto& [key, hit] : hits) {
    const auto& phrase = key.second;
    int b = static_cast<int>(bucket_of(count_of(train_counts, phrase)));
    rep.bucket_instances[b] += 1;
    ok[b] += hit ? 1 : 0;
    phrases_by_bucket[b].insert(phrase);
    auto& pp = per_phrase[phrase];
    pp.first += hit ? 1 : 0;
    pp.second += 1;
  }
  std::size_t all_ok = 0;
  for (int b = 0; b < 3; ++b) {
    rep.bucket_phrases[b] = phrases_by_bucket[b].size();
    rep.bucket_value[b] =
        rep.bucket_instances[b] ? static_cast<double>(ok[b]) / static_cast<double>(rep.bucket_instances[b]) : 0.0;
    all_ok += ok[b];
    rep.evaluated_instances += rep.bucket_instances[b];
  }
  for (const auto& [phrase, c] : per_phrase)
    rep.per_phrase[phrase] = static_cast<double>(c.first) / static_cast<double>(c.second);
  rep.evaluated_phrases = per_phrase.size();
  rep.instance_weighted =
      rep.evaluated_instances ? static_cast<double>(all_ok) / static_cast<double>(rep.evaluated_instances) : 0.0;
  rep.bucket_mean = mean_of_nonempty(rep.bucket_value, rep.bucket_phrases);
  rep.overall = rep.instance_weighted;
  return rep;
}

}  // namespace detail

// Top-1 box per (image, phrase); success if IoU ≥ 0.5 with any ground-truth box
// of that phrase in that image.
inline EvalReport localization_accuracy(const std::vector<ScoredPrediction>& predictions, const GroundTruthDataset& gt,
                                        const std::map<std::string, std::int64_t>& train_counts,
                                        const EvalOptions& opt = {}) {
  const auto idx = index_ground_truth(gt, opt.include_augmented);
  std::map<std::pair<std::string, std::string>, const ScoredPrediction*> best;
  for (const auto& p : predictions) {
    auto& slot = best[{p.image_id, p.phrase}];
    if (!slot || ranks_before(p, *slot)) slot = &p;
  }
  std::map<std::pair<std::string, std::string>, bool> hits;
  std::size_t missing = 0;
  for (const auto& [phrase, per_image] : idx)
    for (const auto& [image, boxes] : per_image) {
      auto it = best.find({image, phrase});
      bool hit = false;
      if (it == best.end()) {
        ++missing;
      } else {
        for (const auto& b : boxes) hit |= iou(it->second->box, b) >= opt.iou_threshold;
      }
      hits[{image, phrase}] = hit;
    }
  auto rep = detail::aggregate_instances("localization_accuracy", hits, train_counts);
  rep.warnings = missing;
  return rep;
}

// Fraction of (image, phrase) instances that any candidate box covers at IoU ≥ 0.5.
inline EvalReport proposal_upper_bound(const ProposalSet& proposals, const GroundTruthDataset& gt,
                                       const std::map<std::string, std::int64_t>& train_counts,
                                       const EvalOptions& opt = {}) {
  const auto idx = index_ground_truth(gt, opt.include_augmented);
  std::map<std::pair<std::string, std::string>, bool> hits;
  for (const auto& [phrase, per_image] : idx)
    for (const auto& [image, boxes] : per_image) {
      bool hit = false;
      for (const auto& cand : proposals.of(image))
        for (const auto& b : boxes) hit |= iou(cand, b) >= opt.iou_threshold;
      hits[{image, phrase}] = hit;
    }
  return detail::aggregate_instances("proposal_upper_bound", hits, train_counts);
}

// --------------------------------------------------------------------------
// Image-sentence retrieval

struct RetrievalMetrics {
  std::array<double, 3> image_to_sentence{};  // R@1, R@5, R@10 in percent
  std::array<double, 3> sentence_to_image{};
  double mean_recall = 0.0;
};

inline constexpr std::array<int, 3> kRecallAt = {1, 5, 10};

// similarity: images × sentences. sentence_image[s] is the image sentence s
// describes. Rank of an item counts strictly better items plus equal items
// with a smaller index.
inline RetrievalMetrics retrieval_metrics(const Mat& similarity, const std::vector<int>& sentence_image) {
  const auto n_img = similarity.rows(), n_sent = similarity.cols();
  if (static_cast<Eigen::Index>(sentence_image.size()) != n_sent)
    throw Error("retrieval_metrics: one image index per sentence required");
  std::vector<std::vector<int>> img_sentences(static_cast<std::size_t>(n_img));
  for (Eigen::Index s = 0; s < n_sent; ++s) {
    int i = sentence_image[static_cast<std::size_t>(s)];
    if (i < 0 || i >= n_img) throw Error("retrieval_metrics: sentence maps to unknown image");
    img_sentences[static_cast<std::size_t>(i)].push_back(static_cast<int>(s));
  }
  auto rank_in_row = [&](Eigen::Index row, Eigen::Index col) {
    const double v = similarity(row, col);
    Eigen::Index r = 1;
    for (Eigen::Index c = 0; c < n_sent; ++c)
      if (similarity(row, c) > v || (similarity(row, c) == v && c < col)) ++r;
    return r;
  };
  auto rank_in_col = [&](Eigen::Index col, Eigen::Index row) {
    const double v = similarity(row, col);
    Eigen::Index r = 1;
    for (Eigen::Index i = 0; i < n_img; ++i)
      if (similarity(i, col) > v || (similarity(i, col) == v && i < row)) ++r;
    return r;
  };
  RetrievalMetrics m;
  for (Eigen::Index i = 0; i < n_img; ++i) {
    const auto& sents = img_sentences[static_cast<std::size_t>(i)];
    if (sents.empty()) throw Error("retrieval_metrics: image without a ground-truth sentence");
    Eigen::Index best = n_sent + 1;
    for (int s : sents) best = std::min(best, rank_in_row(i, s));
    for (int k = 0; k < 3; ++k) m.image_to_sentence[k] += best <= kRecallAt[k] ? 1.0 : 0.0;
  }
  for (Eigen::Index s = 0; s < n_sent; ++s) {
    auto r = rank_in_col(s, sentence_image[static_cast<std::size_t>(s)]);
    for (int k = 0; k < 3; ++k) m.sentence_to_image[k] += r <= kRecallAt[k] ? 1.0 : 0.0;
  }
  double sum = 0;
  for (int k = 0; k < 3; ++k) {
    m.image_to_sentence[k] *= 100.0 / static_cast<double>(n_img);
    m.sentence_to_image[k] *= 100.0 / static_cast<double>(n_sent);
    sum += m.image_to_sentence[k] + m.sentence_to_image[k];
  }
  m.mean_recall = sum / 6.0;
  return m;
}

// --------------------------------------------------------------------------
// Report rendering

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json buckets = nlohmann::json::object();
  for (auto b : kAllBuckets) {
    int i = static_cast<int>(b);
    buckets[std::string(bucket_name(b))] = {{"value", r.bucket_value[i]},
                                            {"phrases", r.bucket_phrases[i]},
                                            {"instances", r.bucket_instances[i]}};
  }
  return {{"metric", r.metric},
          {"buckets", buckets},
          {"overall", r.overall},
          {"overall_convention", r.overall_convention},
          {"bucket_mean", r.bucket_mean},
          {"instance_weighted", r.instance_weighted},
          {"evaluated_phrases", r.evaluated_phrases},
          {"evaluated_instances", r.evaluated_instances},
          {"warnings", r.warnings},
          {"per_phrase", r.per_phrase}};
}

inline nlohmann::json to_json(const RetrievalMetrics& m) {
  return {{"image_to_sentence", {{"R@1", m.image_to_sentence[0]}, {"R@5", m.image_to_sentence[1]}, {"R@10", m.image_to_sentence[2]}}},
          {"sentence_to_image", {{"R@1", m.sentence_to_image[0]}, {"R@5", m.sentence_to_image[1]}, {"R@10", m.sentence_to_image[2]}}},
          {"mR", m.mean_recall}};
}

// Aligned text table, values in percent.
inline std::string to_text(const EvalReport& r, const std::string& label = "") {
  std::ostringstream os;
  os << std::left << std::setw(24) << "#Train Occurrences" << std::right << std::setw(11) << "zero-shot"
     << std::setw(11) << "few-shot" << std::setw(11) << "common" << std::setw(11)
     << (r.overall_convention == "bucket_mean" ? "mean" : "overall") << '\n';
  os << std::left << std::setw(24) << "Per Phrase" << std::right << std::setw(11) << "0" << std::setw(11) << "1-100"
     << std::setw(11) << ">100" << std::setw(11) << "" << '\n';
  os << std::left << std::setw(24) << (label.empty() ? r.metric : label) << std::right << std::fixed
     << std::setprecision(1);
  for (int b = 0; b < 3; ++b) {
    if (r.bucket_phrases[b] == 0)
      os << std::setw(11) << "-";
    else
      os << std::setw(11) << 100.0 * r.bucket_value[b];
  }
  os << std::setw(11) << 100.0 * r.overall << '\n';
  return os.str();
}

}  // namespace opd
