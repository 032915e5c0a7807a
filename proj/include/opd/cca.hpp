#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "opd/common.hpp"

namespace opd {

// Paired linear projections maximizing correlation between two views.
// Columns of wx/wy are canonical directions; wxᵀ Σxx wx = I and
// wyᵀ Σyy wy = I on the fitting data (Σ including the ridge term).
struct CcaSolution {
  Mat wx;            // d_x × k
  Mat wy;            // d_y × k
  Vec correlations;  // k, non-increasing, in [0, 1]
  Vec mu_x;
  Vec mu_y;
  double scale_exponent = 4.0;
  double eps_x = 0.0;
  double eps_y = 0.0;

  Eigen::Index k() const { return correlations.size(); }

  // diag(correlations^p), the normalized-CCA output scaling.
  Vec scales() const { return correlations.array().pow(scale_exponent).matrix(); }

  Vec project_x(const Vec& x) const { return scales().cwiseProduct(wx.transpose() * (x - mu_x)); }
  Vec project_y(const Vec& y) const { return scales().cwiseProduct(wy.transpose() * (y - mu_y)); }
};

struct CcaOptions {
  Eigen::Index k = 0;
  // Ridge added to each view covariance. Unset means 1e-4 · trace(Σ) / d per view.
  std::optional<double> eps;
  double scale_exponent = 4.0;
};

namespace detail {

inline Mat centered(const Mat& m, const Vec& mean) { return m.rowwise() - mean.transpose(); }

inline double default_ridge(const Mat& cov) { return 1e-4 * cov.trace() / static_cast<double>(cov.rows()); }

// Symmetric inverse square root. Throws when the matrix is not safely positive definite.
inline Mat inv_sqrt_spd(const Mat& c, const char* what) {
  Eigen::SelfAdjointEigenSolver<Mat> es(c);
  if (es.info() != Eigen::Success) throw FitError(std::string("eigen-solver failure on ") + what);
  const Vec& ev = es.eigenvalues();
  double top = std::max(ev.maxCoeff(), 0.0);
  if (!(ev.minCoeff() > 1e-12 * std::max(top, 1e-300)))
    throw FitError(std::string(what) + " is singular or not positive definite (min eigenvalue " +
                   std::to_string(ev.minCoeff()) + "); increase the ridge");
  return es.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

struct Whitened {
  Mat xc, yc;
  Mat a, b;  // (Σxx+εI)^-1/2, (Σyy+εI)^-1/2
  Mat cxy;
  Eigen::BDCSVD<Mat> svd;
  double eps_x = 0, eps_y = 0;
};

inline Whitened whiten(const Mat& x, const Mat& y, const Vec& mu_x, const Vec& mu_y, std::optional<double> eps_x,
                       std::optional<double> eps_y) {
  Whitened w;
  const double n = static_cast<double>(x.rows());
  w.xc = centered(x, mu_x);
  w.yc = centered(y, mu_y);
  Mat cxx = (w.xc.transpose() * w.xc) / n;
  Mat cyy = (w.yc.transpose() * w.yc) / n;
  w.cxy = (w.xc.transpose() * w.yc) / n;
  w.eps_x = eps_x ? *eps_x : default_ridge(cxx);
  w.eps_y = eps_y ? *eps_y : default_ridge(cyy);
  cxx.diagonal().array() += w.eps_x;
  cyy.diagonal().array() += w.eps_y;
  w.a = inv_sqrt_spd(cxx, "region covariance");
  w.b = inv_sqrt_spd(cyy, "phrase covariance");
  Mat t = w.a * w.cxy * w.b;
  if (!t.allFinite()) throw FitError("whitened cross-covariance is not finite");
  w.svd.compute(t, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (w.svd.info() != Eigen::Success) throw FitError("SVD of the whitened cross-covariance failed");
  return w;
}

}  // namespace detail

// Fits normalized CCA between row-sample matrices x (n × d_x) and y (n × d_y).
inline CcaSolution fit_cca(const Mat& x, const Mat& y, const CcaOptions& opt) {
  const Eigen::Index n = x.rows();
  if (y.rows() != n) throw FitError("views have different sample counts");
  if (n < 2) throw FitError("fit_cca needs at least 2 samples, got " + std::to_string(n));
  if (opt.k < 1 || opt.k > std::min(x.cols(), y.cols()))
    throw FitError("k=" + std::to_string(opt.k) + " out of range [1, " + std::to_string(std::min(x.cols(), y.cols())) +
                   "]");
  if (opt.eps && *opt.eps < 0) throw FitError("ridge must be non-negative");
  if (!x.allFinite() || !y.allFinite()) throw FitError("non-finite input samples");

  CcaSolution sol;
  sol.scale_exponent = opt.scale_exponent;
  sol.mu_x = x.colwise().mean().transpose();
  sol.mu_y = y.colwise().mean().transpose();
  auto w = detail::whiten(x, y, sol.mu_x, sol.mu_y, opt.eps, opt.eps);
  sol.eps_x = w.eps_x;
  sol.eps_y = w.eps_y;

  const Eigen::Index k = opt.k;
  sol.wx = w.a * w.svd.matrixU().leftCols(k);
  sol.wy = w.b * w.svd.matrixV().leftCols(k);
  sol.correlations = w.svd.singularValues().head(k).cwiseMax(0.0).cwiseMin(1.0);

  // Deterministic sign: the largest-magnitude entry of each region column is
  // positive; the paired phrase column flips with it.
  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::Index arg;
    sol.wx.col(c).cwiseAbs().maxCoeff(&arg);
    if (sol.wx(arg, c) < 0) {
      sol.wx.col(c) *= -1.0;
      sol.wy.col(c) *= -1.0;
    }
  }
  return sol;
}

inline CcaSolution fit_cca(const Mat& x, const Mat& y, Eigen::Index k, std::optional<double> eps = std::nullopt) {
  CcaOptions opt;
  opt.k = k;
  opt.eps = eps;
  return fit_cca(x, y, opt);
}

struct Similarity {
  double value = 0.0;
  bool degenerate = false;
};

inline Similarity cosine_similarity(const Vec& a, const Vec& b) {
  const double na = a.norm(), nb = b.norm();
  if (!(na > 1e-15) || !(nb > 1e-15) || !std::isfinite(na) || !std::isfinite(nb)) return {0.0, true};
  return {std::clamp(a.dot(b) / (na * nb), -1.0, 1.0), false};
}

// Cosine similarity of the scaled canonical projections.
inline Similarity cca_score(const CcaSolution& sol, const Vec& x, const Vec& y) {
  if (x.size() != sol.wx.rows() || y.size() != sol.wy.rows()) throw Error("cca_score: dimension mismatch");
  return cosine_similarity(sol.project_x(x), sol.project_y(y));
}

struct DccaResult {
  double corr = 0.0;
  Mat grad_x;
  Mat grad_y;
};

// Deep-CCA correlation objective on a minibatch: the sum of the top-k singular
// values of (Σxx+r1 I)^-1/2 Σxy (Σyy+r2 I)^-1/2, with exact gradients w.r.t.
// every batch entry.
inline DccaResult dcca_objective(const Mat& xb, const Mat& yb, double r1, double r2, Eigen::Index k,
                                 bool with_gradient = true) {
  const Eigen::Index n = xb.rows();
  if (yb.rows() != n || n < 2) throw NumericalError("dcca_objective: need matching batches of at least 2 rows");
  if (k < 1 || k > std::min(xb.cols(), yb.cols())) throw NumericalError("dcca_objective: k out of range");
  if (r1 < 0 || r2 < 0) throw NumericalError("dcca_objective: regularizers must be non-negative");
  Vec mu_x = xb.colwise().mean().transpose();
  Vec mu_y = yb.colwise().mean().transpose();
  detail::Whitened w;
  try {
    w = detail::whiten(xb, yb, mu_x, mu_y, r1, r2);
  } catch (const FitError& e) {
    throw NumericalError(std::string("dcca_objective: ") + e.what());
  }
  DccaResult out;
  const Vec s = w.svd.singularValues().head(k);
  out.corr = s.sum();
  if (!with_gradient) return out;

  const Mat uk = w.svd.matrixU().leftCols(k);
  const Mat vk = w.svd.matrixV().leftCols(k);
  const Mat au = w.a * uk;
  const Mat bv = w.b * vk;
  const Mat g_xx = -0.5 * au * s.asDiagonal() * au.transpose();
  const Mat g_yy = -0.5 * bv * s.asDiagonal() * bv.transpose();
  const Mat g_xy = au * bv.transpose();
  const double inv_n = 1.0 / static_cast<double>(n);
  out.grad_x = inv_n * (2.0 * w.xc * g_xx + w.yc * g_xy.transpose());
  out.grad_y = inv_n * (2.0 * w.yc * g_yy + w.xc * g_xy);
  return out;
}

}  // namespace opd
