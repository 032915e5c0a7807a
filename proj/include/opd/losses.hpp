#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "opd/boxes.hpp"
#include "opd/common.hpp"

// Scalar losses with exact (sub)gradients. Kinks take subgradient 0.
namespace opd {

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline double logistic(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// --------------------------------------------------------------------------
// Triplet hinge on Euclidean distances.

struct TripletLoss {
  double value = 0.0;
  Vec grad_q, grad_pos, grad_neg;
};

inline TripletLoss triplet_loss(const Vec& q, const Vec& pos, const Vec& neg, double margin) {
  TripletLoss out;
  const Vec dp_vec = q - pos, dn_vec = q - neg;
  const double dp = dp_vec.norm(), dn = dn_vec.norm();
  const double slack = margin + dp - dn;
  out.grad_q = Vec::Zero(q.size());
  out.grad_pos = Vec::Zero(q.size());
  out.grad_neg = Vec::Zero(q.size());
  if (slack <= 0) return out;
  out.value = slack;
  const Vec up = dp > 0 ? Vec(dp_vec / dp) : Vec::Zero(q.size());
  const Vec un = dn > 0 ? Vec(dn_vec / dn) : Vec::Zero(q.size());
  out.grad_q = up - un;
  out.grad_pos = -up;
  out.grad_neg = un;
  return out;
}

// --------------------------------------------------------------------------
// SimNet logistic loss: Σ log(1 + exp(−l c)) + λ1 ‖a‖₁.

struct LogisticLoss {
  double value = 0.0;
  Vec grad_logits;
  Vec grad_reg;
};

inline LogisticLoss simnet_loss(const Vec& logits, const Vec& labels, double lambda1, const Vec& reg_weights) {
  if (logits.size() != labels.size()) throw Error("simnet_loss: logits/labels size mismatch");
  LogisticLoss out;
  out.grad_logits.resize(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double l = labels[i];
    if (l != 1.0 && l != -1.0) throw Error("simnet_loss: labels must be -1 or +1");
    const double z = -l * logits[i];
    out.value += softplus(z);
    out.grad_logits[i] = -l * logistic(z);
  }
  out.value += lambda1 * reg_weights.cwiseAbs().sum();
  out.grad_reg = lambda1 * reg_weights.unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
  return out;
}

// --------------------------------------------------------------------------
// QA R-CNN sigmoid cross-entropy, averaged over (region, phrase) pairs.

struct BceLoss {
  double value = 0.0;
  Vec grad_logits;
};

inline BceLoss qa_loss(const Vec& logits, const Vec& labels) {
  if (logits.size() != labels.size()) throw Error("qa_loss: logits/labels size mismatch");
  BceLoss out;
  out.grad_logits = Vec::Zero(logits.size());
  if (logits.size() == 0) return out;
  const double inv = 1.0 / static_cast<double>(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double y = labels[i];
    if (y != 0.0 && y != 1.0) throw Error("qa_loss: labels must be 0 or 1");
    const double z = logits[i];
    // −y log σ(z) − (1−y) log(1−σ(z)) = softplus(z) − y z
    out.value += inv * (softplus(z) - y * z);
    out.grad_logits[i] = inv * (logistic(z) - y);
  }
  return out;
}

// --------------------------------------------------------------------------
// Smooth-L1 (Huber, δ = 1) over the four box deltas.

struct SmoothL1 {
  double value = 0.0;
  BoxDeltas grad{};
};

inline SmoothL1 smooth_l1(const BoxDeltas& t, const BoxDeltas& t_star) {
  SmoothL1 out;
  for (int i = 0; i < 4; ++i) {
    const double u = t[i] - t_star[i];
    if (std::abs(u) < 1.0) {
      out.value += 0.5 * u * u;
      out.grad[i] = u;
    } else {
      out.value += std::abs(u) - 0.5;
      out.grad[i] = u > 0 ? 1.0 : -1.0;
    }
  }
  return out;
}

struct BoxRegressionLoss {
  double value = 0.0;
  std::vector<BoxDeltas> grads;
};

// 1/(4 N_r) Σ_i smooth_l1(t_i, t_i*).
inline BoxRegressionLoss bbreg_loss(std::span<const BoxDeltas> pred, std::span<const BoxDeltas> target) {
  if (pred.size() != target.size()) throw Error("bbreg_loss: size mismatch");
  BoxRegressionLoss out;
  out.grads.resize(pred.size());
  if (pred.empty()) return out;
  const double scale = 1.0 / (4.0 * static_cast<double>(pred.size()));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto s = smooth_l1(pred[i], target[i]);
    out.value += scale * s.value;
    for (int c = 0; c < 4; ++c) out.grads[i][c] = scale * s.grad[c];
  }
  return out;
}

}  // namespace opd
