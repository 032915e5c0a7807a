#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "opd/boxes.hpp"
#include "opd/cca.hpp"
#include "opd/layers.hpp"
#include "opd/losses.hpp"

namespace opd {

// ===========================================================================
// Branch stacks

// A stack of alignment layers with an optional ReLU between consecutive layers
// (never after the last). An empty stack is the identity.
struct Branch {
  std::vector<LinearAlignLayer> layers;
  bool relu_between = true;

  Eigen::Index out_dim(Eigen::Index in_dim) const { return layers.empty() ? in_dim : layers.back().out_dim(); }
};

struct BranchTrace {
  std::vector<Mat> inputs;   // input to layer i (after activation)
  std::vector<Mat> outputs;  // raw output of layer i
};

inline Mat forward_rows(const Branch& br, const Mat& xs, BranchTrace* trace = nullptr) {
  Mat h = xs;
  for (std::size_t i = 0; i < br.layers.size(); ++i) {
    if (i > 0 && br.relu_between) h = relu(std::move(h));
    if (trace) trace->inputs.push_back(h);
    h = forward_rows(br.layers[i], h);
    if (trace) trace->outputs.push_back(h);
  }
  return h;
}

inline std::vector<LayerGrad> zero_grads(const Branch& br) {
  std::vector<LayerGrad> g;
  for (const auto& l : br.layers) g.push_back(LayerGrad::zeros_like(l));
  return g;
}

inline Mat backward_rows(const Branch& br, const BranchTrace& trace, Mat grad, std::vector<LayerGrad>& grads) {
  for (std::size_t i = br.layers.size(); i-- > 0;) {
    grad = backward_rows(br.layers[i], trace.inputs[i], grad, grads[i]);
    if (i > 0 && br.relu_between) grad = grad.cwiseProduct((trace.outputs[i - 1].array() > 0.0).cast<double>().matrix());
  }
  return grad;
}

// ===========================================================================
// Row normalization

inline Mat normalize_rows(const Mat& e, Vec& norms) {
  norms = e.rowwise().norm();
  Mat u = e;
  for (Eigen::Index i = 0; i < e.rows(); ++i)
    if (norms[i] > 1e-15) u.row(i) /= norms[i];
    else u.row(i).setZero();
  return u;
}

// d/de of e/‖e‖ applied to grad_u.
inline Mat normalize_rows_backward(const Mat& u, const Vec& norms, const Mat& grad_u) {
  Mat g = Mat::Zero(u.rows(), u.cols());
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    if (!(norms[i] > 1e-15)) continue;
    const double proj = u.row(i).dot(grad_u.row(i));
    g.row(i) = (grad_u.row(i) - proj * u.row(i)) / norms[i];
  }
  return g;
}

// ===========================================================================
// EmbNet

struct EmbNetParams {
  double margin = 0.2;
  double w_rr = 0.1;
  double w_pp = 0.1;
};

// Negated Euclidean distance between unit embeddings, in [−2, 0].
inline Similarity embnet_similarity(const Vec& region_emb, const Vec& phrase_emb) {
  const double nr = region_emb.norm(), np = phrase_emb.norm();
  if (!(nr > 1e-15) || !(np > 1e-15)) return {-2.0, true};
  return {-(region_emb / nr - phrase_emb / np).norm(), false};
}

// One phrase query with indices into the batch's region rows.
struct TripletQuery {
  int phrase = 0;  // row in the phrase matrix
  std::vector<int> positives;
  std::vector<int> negatives;
};

struct EmbNetBatchLoss {
  double value = 0.0;
  Mat grad_phrase;  // w.r.t. unit phrase rows
  Mat grad_region;  // w.r.t. unit region rows
  int skipped = 0;
  std::size_t cross_terms = 0, region_terms = 0, phrase_terms = 0;
};

namespace detail {
inline bool intersects(const std::vector<int>& a, const std::vector<int>& b) {
  for (int x : a)
    for (int y : b)
      if (x == y) return true;
  return false;
}
}  // namespace detail

// Mean cross-modal triplet loss over all admissible (q, r_p, r_n), plus w_rr ×
// mean region-region triplet loss (anchor and positive from P_q, negative from
// N_q) and w_pp × mean phrase-phrase triplet loss (positive phrases share a
// positive region with the anchor, negative phrases share none).
inline EmbNetBatchLoss embnet_batch_loss(const Mat& phrase_unit, const Mat& region_unit,
                                         std::span<const TripletQuery> queries, const EmbNetParams& p) {
  EmbNetBatchLoss out;
  out.grad_phrase = Mat::Zero(phrase_unit.rows(), phrase_unit.cols());
  out.grad_region = Mat::Zero(region_unit.rows(), region_unit.cols());
  std::vector<const TripletQuery*> valid;
  for (const auto& q : queries) {
    if (q.positives.empty() || q.negatives.empty()) ++out.skipped;
    else valid.push_back(&q);
  }

  Mat gp_cross = Mat::Zero(out.grad_phrase.rows(), out.grad_phrase.cols()), gr_cross = Mat::Zero(out.grad_region.rows(), out.grad_region.cols());
  double v_cross = 0;
  for (const auto* q : valid)
    for (int rp : q->positives)
      for (int rn : q->negatives) {
        auto t = triplet_loss(phrase_unit.row(q->phrase).transpose(), region_unit.row(rp).transpose(),
                              region_unit.row(rn).transpose(), p.margin);
        v_cross += t.value;
        gp_cross.row(q->phrase) += t.grad_q.transpose();
        gr_cross.row(rp) += t.grad_pos.transpose();
        gr_cross.row(rn) += t.grad_neg.transpose();
        ++out.cross_terms;
      }
  if (out.cross_terms) {
    const double s = 1.0 / static_cast<double>(out.cross_terms);
    out.value += s * v_cross;
    out.grad_phrase += s * gp_cross;
    out.grad_region += s * gr_cross;
  }

  if (p.w_rr != 0.0) {
    Mat g = Mat::Zero(out.grad_region.rows(), out.grad_region.cols());
    double v = 0;
    for (const auto* q : valid)
      for (int a : q->positives)
        for (int rp : q->positives) {
          if (rp == a) continue;
          for (int rn : q->negatives) {
            auto t = triplet_loss(region_unit.row(a).transpose(), region_unit.row(rp).transpose(),
                                  region_unit.row(rn).transpose(), p.margin);
            v += t.value;
            g.row(a) += t.grad_q.transpose();
            g.row(rp) += t.grad_pos.transpose();
            g.row(rn) += t.grad_neg.transpose();
            ++out.region_terms;
          }
        }
    if (out.region_terms) {
      const double s = p.w_rr / static_cast<double>(out.region_terms);
      out.value += s * v;
      out.grad_region += s * g;
    }
  }

  if (p.w_pp != 0.0) {
    Mat g = Mat::Zero(out.grad_phrase.rows(), out.grad_phrase.cols());
    double v = 0;
    for (const auto* a : valid)
      for (const auto* pos : valid) {
        if (pos == a || !detail::intersects(a->positives, pos->positives)) continue;
        for (const auto* neg : valid) {
          if (neg == a || detail::intersects(a->positives, neg->positives)) continue;
          auto t = triplet_loss(phrase_unit.row(a->phrase).transpose(), phrase_unit.row(pos->phrase).transpose(),
                                phrase_unit.row(neg->phrase).transpose(), p.margin);
          v += t.value;
          g.row(a->phrase) += t.grad_q.transpose();
          g.row(pos->phrase) += t.grad_pos.transpose();
          g.row(neg->phrase) += t.grad_neg.transpose();
          ++out.phrase_terms;
        }
      }
    if (out.phrase_terms) {
      const double s = p.w_pp / static_cast<double>(out.phrase_terms);
      out.value += s * v;
      out.grad_phrase += s * g;
    }
  }
  return out;
}

// ===========================================================================
// SimNet: three fully connected stages on the elementwise product.

struct SimNetStages {
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;
  Vec a;  // final stage weights (the L1-regularized conditional weights)
  double b3 = 0.0;

  template <typename Rng>
  static SimNetStages random(Eigen::Index in, Eigen::Index h1, Eigen::Index h2, Rng& rng) {
    SimNetStages s;
    auto l1 = LinearAlignLayer::random(in, h1, rng);
    auto l2 = LinearAlignLayer::random(h1, h2, rng);
    auto l3 = LinearAlignLayer::random(h2, 1, rng);
    s.w1 = l1.w;
    s.b1 = Vec::Zero(h1);
    s.w2 = l2.w;
    s.b2 = Vec::Zero(h2);
    s.a = l3.w.row(0).transpose();
    return s;
  }
};

struct SimNetTrace {
  Mat input, z1, z2;  // z = pre-activation
};

inline Vec simnet_logits(const SimNetStages& s, const Mat& fused, SimNetTrace* trace = nullptr) {
  Mat z1 = fused * s.w1.transpose();
  z1.rowwise() += s.b1.transpose();
  Mat z2 = relu(z1) * s.w2.transpose();
  z2.rowwise() += s.b2.transpose();
  Vec logits = relu(z2) * s.a;
  logits.array() += s.b3;
  if (trace) *trace = {fused, std::move(z1), std::move(z2)};
  return logits;
}

inline double simnet_score(const SimNetStages& s, const Vec& region_emb, const Vec& phrase_emb) {
  return simnet_logits(s, region_emb.cwiseProduct(phrase_emb).transpose())[0];
}

struct SimNetGrad {
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;
  Vec a;
  double b3 = 0.0;

  static SimNetGrad zeros_like(const SimNetStages& s) {
    return {Mat::Zero(s.w1.rows(), s.w1.cols()), Vec::Zero(s.b1.size()), Mat::Zero(s.w2.rows(), s.w2.cols()),
            Vec::Zero(s.b2.size()), Vec::Zero(s.a.size()), 0.0};
  }
};

// Returns dL/d(fused rows).
inline Mat simnet_backward(const SimNetStages& s, const SimNetTrace& t, const Vec& grad_logits, SimNetGrad& g) {
  const Mat h2 = relu(t.z2);
  g.a.noalias() += h2.transpose() * grad_logits;
  g.b3 += grad_logits.sum();
  Mat d2 = (grad_logits * s.a.transpose()).cwiseProduct((t.z2.array() > 0.0).cast<double>().matrix());
  g.w2.noalias() += d2.transpose() * relu(t.z1);
  g.b2.noalias() += d2.colwise().sum().transpose();
  Mat d1 = (d2 * s.w2).cwiseProduct((t.z1.array() > 0.0).cast<double>().matrix());
  g.w1.noalias() += d1.transpose() * t.input;
  g.b1.noalias() += d1.colwise().sum().transpose();
  return d1 * s.w1;
}

// ===========================================================================
// QA R-CNN: a linear region classifier generated from the phrase vector.

struct QaHead {
  Mat wc;        // d_region × d_phrase; w_c = wc · v
  Vec bias_gen;  // d_phrase; generated bias = bias_gen · v
  double b0 = 0.0;

  Vec generate(const Vec& v) const { return wc * v; }
  double generated_bias(const Vec& v) const { return bias_gen.dot(v) + b0; }
};

inline double qa_generate_and_score(const QaHead& h, const Vec& phrase_vec, const Vec& region_vec) {
  if (phrase_vec.size() != h.wc.cols() || region_vec.size() != h.wc.rows())
    throw Error("qa_generate_and_score: dimension mismatch");
  return h.generate(phrase_vec).dot(region_vec) + h.generated_bias(phrase_vec);
}

// logits(p, r) for phrase rows × region rows.
inline Mat qa_logit_matrix(const QaHead& h, const Mat& phrases, const Mat& regions) {
  Mat gen = phrases * h.wc.transpose();  // rows = generated classifiers
  Mat out = gen * regions.transpose();
  Vec bias = phrases * h.bias_gen;
  out.colwise() += bias;
  out.array() += h.b0;
  return out;
}

struct QaGrad {
  Mat wc;
  Vec bias_gen;
  double b0 = 0.0;
  static QaGrad zeros_like(const QaHead& h) { return {Mat::Zero(h.wc.rows(), h.wc.cols()), Vec::Zero(h.bias_gen.size()), 0.0}; }
};

// grad_logits is phrases × regions. Accumulates parameter gradients and writes
// input gradients.
inline void qa_backward(const QaHead& h, const Mat& phrases, const Mat& regions, const Mat& grad_logits, QaGrad& g,
                        Mat& grad_phrases, Mat& grad_regions) {
  // L depends on Σ_pr G_pr (v_pᵀ Wcᵀ r_r) + Σ_p (Σ_r G_pr) (bias_genᵀ v_p) + b0 Σ G
  const Mat gr = grad_logits * regions;  // phrases × d_r: Σ_r G_pr r_r
  g.wc.noalias() += gr.transpose() * phrases;
  const Vec row_sums = grad_logits.rowwise().sum();
  g.bias_gen.noalias() += phrases.transpose() * row_sums;
  g.b0 += grad_logits.sum();
  grad_phrases = gr * h.wc + row_sums * h.bias_gen.transpose();
  grad_regions = grad_logits.transpose() * (phrases * h.wc.transpose());
}

// ===========================================================================
// Phrase-aware box regression: one linear stage from the fused feature.

struct BbregHead {
  Mat w;  // 4 × d
  Vec b;  // 4

  BoxDeltas predict(const Vec& fused) const {
    Vec t = w * fused + b;
    return {t[0], t[1], t[2], t[3]};
  }
};

}  // namespace opd
