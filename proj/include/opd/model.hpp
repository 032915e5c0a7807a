#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "opd/heads.hpp"

namespace opd {

enum class HeadKind { Cca, DeepCca, EmbNet, SimNet, Qa };

inline std::string_view head_name(HeadKind h) {
  switch (h) {
    case HeadKind::Cca: return "cca";
    case HeadKind::DeepCca: return "deep_cca";
    case HeadKind::EmbNet: return "embnet";
    case HeadKind::SimNet: return "simnet";
    case HeadKind::Qa: return "qa";
  }
  return "?";
}

inline HeadKind parse_head(std::string_view s) {
  for (auto h : {HeadKind::Cca, HeadKind::DeepCca, HeadKind::EmbNet, HeadKind::SimNet, HeadKind::Qa})
    if (head_name(h) == s) return h;
  throw FormatError("unknown head \"" + std::string(s) + "\"");
}

// Region/phrase branch stacks feeding one classifier head. Higher scores mean
// more confident for every head. EmbNet and SimNet compare L2-normalized
// branch outputs.
struct AlignmentModel {
  HeadKind head = HeadKind::Cca;
  Eigen::Index region_dim = 0;
  Eigen::Index phrase_dim = 0;
  Branch region;
  Branch phrase;
  EmbNetParams embnet;
  SimNetStages simnet;
  QaHead qa;
  std::optional<BbregHead> bbreg;

  Eigen::Index embed_dim() const { return region.out_dim(region_dim); }
};

struct Embedded {
  Mat region;  // rows = regions
  Mat phrase;  // rows = phrases
};

inline Embedded embed(const AlignmentModel& m, const Mat& regions, const Mat& phrases) {
  if (regions.cols() != m.region_dim || phrases.cols() != m.phrase_dim) throw Error("model: feature dimension mismatch");
  return {forward_rows(m.region, regions), forward_rows(m.phrase, phrases)};
}

// phrases × regions score matrix from branch outputs.
inline Mat score_embedded(const AlignmentModel& m, const Embedded& e) {
  const Eigen::Index np = e.phrase.rows(), nr = e.region.rows();
  Mat out(np, nr);
  switch (m.head) {
    case HeadKind::Cca:
    case HeadKind::DeepCca:
      for (Eigen::Index p = 0; p < np; ++p)
        for (Eigen::Index r = 0; r < nr; ++r)
          out(p, r) = cosine_similarity(e.region.row(r).transpose(), e.phrase.row(p).transpose()).value;
      break;
    case HeadKind::EmbNet:
      for (Eigen::Index p = 0; p < np; ++p)
        for (Eigen::Index r = 0; r < nr; ++r)
          out(p, r) = embnet_similarity(e.region.row(r).transpose(), e.phrase.row(p).transpose()).value;
      break;
    case HeadKind::SimNet: {
      Vec rn, pn;
      const Mat ru = normalize_rows(e.region, rn), pu = normalize_rows(e.phrase, pn);
      for (Eigen::Index p = 0; p < np; ++p) {
        Mat fused = ru.array().rowwise() * pu.row(p).array();
        out.row(p) = simnet_logits(m.simnet, fused).transpose();
      }
      break;
    }
    case HeadKind::Qa:
      out = qa_logit_matrix(m.qa, e.phrase, e.region);
      break;
  }
  return out;
}

inline Mat score_matrix(const AlignmentModel& m, const Mat& regions, const Mat& phrases) {
  return score_embedded(m, embed(m, regions, phrases));
}

inline double score(const AlignmentModel& m, const Vec& region, const Vec& phrase) {
  return score_matrix(m, region.transpose(), phrase.transpose())(0, 0);
}

// Box refined by the regression head, or the candidate box itself.
inline BoundingBox refine_box(const AlignmentModel& m, const Vec& region_emb, const Vec& phrase_emb,
                              const BoundingBox& candidate) {
  if (!m.bbreg) return candidate;
  return decode_box(m.bbreg->predict(region_emb.cwiseProduct(phrase_emb)), candidate);
}

}  // namespace opd
