#pragma once

#include <cmath>
#include <vector>

#include "opd/cca.hpp"
#include "opd/common.hpp"

namespace opd {

// h(x) = sigma ⊙ (W (x − mu)) + b. W and b train; mu, sigma and the
// initialization snapshot w_init are frozen.
struct LinearAlignLayer {
  Mat w;       // k × d
  Vec b;       // k
  Vec mu;      // d
  Vec sigma;   // k
  Mat w_init;  // k × d

  Eigen::Index in_dim() const { return w.cols(); }
  Eigen::Index out_dim() const { return w.rows(); }

  static LinearAlignLayer identity(Eigen::Index d) {
    LinearAlignLayer l;
    l.w = Mat::Identity(d, d);
    l.b = Vec::Zero(d);
    l.mu = Vec::Zero(d);
    l.sigma = Vec::Ones(d);
    l.w_init = l.w;
    return l;
  }

  template <typename Rng>
  static LinearAlignLayer random(Eigen::Index in, Eigen::Index out, Rng& rng) {
    // Uniform(-a, a) with a = sqrt(6 / (in + out)).
    LinearAlignLayer l;
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    l.w.resize(out, in);
    for (Eigen::Index i = 0; i < l.w.size(); ++i)
      l.w.data()[i] = a * (2.0 * static_cast<double>(rng() >> 11) * 0x1.0p-53 - 1.0);
    round_to_f32(l.w);
    l.b = Vec::Zero(out);
    l.mu = Vec::Zero(in);
    l.sigma = Vec::Ones(out);
    l.w_init = l.w;
    return l;
  }
};

inline Vec forward(const LinearAlignLayer& layer, const Vec& x) {
  if (x.size() != layer.in_dim()) throw Error("layer forward: dimension mismatch");
  return layer.sigma.cwiseProduct(layer.w * (x - layer.mu)) + layer.b;
}

// Row-batch forward: every row of xs is a sample.
inline Mat forward_rows(const LinearAlignLayer& layer, const Mat& xs) {
  Mat centered = xs.rowwise() - layer.mu.transpose();
  Mat out = (centered * layer.w.transpose()) * layer.sigma.asDiagonal();
  out.rowwise() += layer.b.transpose();
  return out;
}

struct LayerGrad {
  Mat w;
  Vec b;

  static LayerGrad zeros_like(const LinearAlignLayer& l) { return {Mat::Zero(l.w.rows(), l.w.cols()), Vec::Zero(l.b.size())}; }
};

// Accumulates dL/dW, dL/db for a batch given dL/dh (rows = samples) and
// returns dL/dx.
inline Mat backward_rows(const LinearAlignLayer& layer, const Mat& xs, const Mat& grad_out, LayerGrad& g) {
  Mat scaled = grad_out * layer.sigma.asDiagonal();  // dL/d(W(x-mu))
  Mat centered = xs.rowwise() - layer.mu.transpose();
  g.w.noalias() += scaled.transpose() * centered;
  g.b.noalias() += grad_out.colwise().sum().transpose();
  return scaled * layer.w;
}

struct PenaltyWithGrad {
  double value = 0.0;
  Mat grad_w;
  Vec grad_b;
};

// lambda2 · ‖W − W_init‖_F + ‖b‖₁. Subgradient 0 at W = W_init and at b_i = 0.
inline PenaltyWithGrad drift_penalty(const LinearAlignLayer& layer, double lambda2) {
  PenaltyWithGrad p;
  const Mat diff = layer.w - layer.w_init;
  const double fro = diff.norm();
  p.value = lambda2 * fro + layer.b.cwiseAbs().sum();
  p.grad_w = (fro > 0.0) ? Mat(lambda2 / fro * diff) : Mat::Zero(diff.rows(), diff.cols());
  p.grad_b = layer.b.unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
  return p;
}

// Region and phrase layers reproducing normalized-CCA scoring.
struct LayerPair {
  LinearAlignLayer region;
  LinearAlignLayer phrase;
  CcaSolution solution;
};

inline LayerPair layers_from_cca(const CcaSolution& sol) {
  LayerPair p;
  p.solution = sol;
  const Vec sigma = sol.scales();
  p.region.w = sol.wx.transpose();
  p.region.mu = sol.mu_x;
  p.region.sigma = sigma;
  p.region.b = Vec::Zero(sol.k());
  p.phrase.w = sol.wy.transpose();
  p.phrase.mu = sol.mu_y;
  p.phrase.sigma = sigma;
  p.phrase.b = Vec::Zero(sol.k());
  for (auto* l : {&p.region, &p.phrase}) {
    round_to_f32(l->w);
    round_to_f32(l->mu);
    round_to_f32(l->sigma);
    l->w_init = l->w;
  }
  return p;
}

inline LayerPair init_pair_from_cca(const Mat& x, const Mat& y, const CcaOptions& opt) {
  return layers_from_cca(fit_cca(x, y, opt));
}

inline Mat relu(Mat m) { return m.cwiseMax(0.0); }

// Recursive initialization: layer i is fit on the (activated) outputs of the
// already-initialized layers below it. widths[i] is clipped to what the views
// support.
inline std::vector<LayerPair> init_stack_from_cca(const Mat& x, const Mat& y, const std::vector<Eigen::Index>& widths,
                                                  const CcaOptions& base, bool relu_between) {
  std::vector<LayerPair> stack;
  Mat hx = x, hy = y;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (i > 0 && relu_between) hx = relu(hx), hy = relu(hy);
    CcaOptions opt = base;
    opt.k = std::min({widths[i], hx.cols(), hy.cols()});
    stack.push_back(init_pair_from_cca(hx, hy, opt));
    hx = forward_rows(stack.back().region, hx);
    hy = forward_rows(stack.back().phrase, hy);
  }
  return stack;
}

}  // namespace opd
