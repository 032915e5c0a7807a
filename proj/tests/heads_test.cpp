#include <gtest/gtest.h>

#include "opd/gradcheck.hpp"
#include "opd/heads.hpp"
#include "opd/losses.hpp"
#include "opd/npa.hpp"
#include "support.hpp"

namespace opd {
namespace {

using testing::random_mat;
using testing::random_vec;

// ---- EmbNet ---------------------------------------------------------------

TEST(EmbNet, SimilarityRange) {
  Vec a(3);
  a << 1, 2, 2;
  EXPECT_DOUBLE_EQ(embnet_similarity(a, 2 * a).value, 0.0);
  EXPECT_DOUBLE_EQ(embnet_similarity(a, -a).value, -2.0);
  EXPECT_TRUE(embnet_similarity(Vec::Zero(3), a).degenerate);
  Rng rng = derived_rng(1, 0);
  for (int t = 0; t < 100; ++t) {
    const double s = embnet_similarity(random_vec(4, rng), random_vec(4, rng)).value;
    EXPECT_GE(s, -2.0);
    EXPECT_LE(s, 0.0);
  }
}

TEST(EmbNet, SimilarityOfTinyPipeline) {
  // Branch x -> W x, unit-normalize, negated distance; evaluated by hand.
  LinearAlignLayer l = LinearAlignLayer::identity(2);
  l.w << 2, 0, 0, 1;
  Vec x(2), y(2);
  x << 1, 0;
  y << 0, 3;
  const Vec ex = forward(l, x), ey = forward(l, y);  // (2,0) and (0,3)
  EXPECT_NEAR(embnet_similarity(ex, ey).value, -std::sqrt(2.0), 1e-15);
}

TEST(Triplet, TieAndSatisfiedMargin) {
  Vec q = Vec::Zero(2), p(2), n(2);
  p << 1, 0;
  n << 0, 1;
  EXPECT_DOUBLE_EQ(triplet_loss(q, p, n, 0.2).value, 0.2);
  n << 0, 1.3;  // d_n - d_p = 0.3 = m + 0.1
  const auto t = triplet_loss(q, p, n, 0.2);
  EXPECT_EQ(t.value, 0.0);
  EXPECT_EQ(t.grad_q, Vec::Zero(2));
}

TEST(Triplet, GradientMatchesFiniteDifferences) {
  Rng rng = derived_rng(2, 0);
  int checked = 0;
  for (int t = 0; t < 50; ++t) {
    const Vec q = random_vec(4, rng), p = random_vec(4, rng), n = random_vec(4, rng);
    const auto l = triplet_loss(q, p, n, 1.0);
    if (l.value <= 1e-3) continue;
    Vec all(12), grad(12);
    all << q, p, n;
    grad << l.grad_q, l.grad_pos, l.grad_neg;
    const auto r = grad_check(
        [](const Vec& v) { return triplet_loss(v.segment(0, 4), v.segment(4, 4), v.segment(8, 4), 1.0).value; }, all,
        grad);
    EXPECT_LT(r.max_rel_error, 1e-4);
    ++checked;
  }
  EXPECT_GT(checked, 10);
}

Mat unit_rows(Mat m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i).normalize();
  return m;
}

TEST(EmbNetBatch, SaturatedHingeIsZero) {
  Mat regions(3, 2), phrases(1, 2);
  regions << 1, 0, 0, 1, -1, 0;
  phrases << 1, 0;
  const std::vector<TripletQuery> q{{0, {0}, {1, 2}}};
  const auto l = embnet_batch_loss(phrases, regions, q, {});
  EXPECT_EQ(l.value, 0.0);
  EXPECT_EQ(l.cross_terms, 2u);
}

TEST(EmbNetBatch, CrossOnlyIsMeanTriplet) {
  Rng rng = derived_rng(3, 0);
  const Mat regions = unit_rows(random_mat(5, 3, rng)), phrases = unit_rows(random_mat(2, 3, rng));
  const std::vector<TripletQuery> q{{0, {0, 1}, {2, 3, 4}}, {1, {2}, {0, 4}}, {0, {}, {1}}};
  const auto l = embnet_batch_loss(phrases, regions, q, {0.2, 0.0, 0.0});
  double sum = 0;
  int n = 0;
  for (std::size_t i = 0; i < 2; ++i)
    for (int p : q[i].positives)
      for (int m : q[i].negatives) {
        sum += triplet_loss(phrases.row(q[i].phrase).transpose(), regions.row(p).transpose(), regions.row(m).transpose(), 0.2).value;
        ++n;
      }
  EXPECT_NEAR(l.value, sum / n, 1e-15);
  EXPECT_EQ(l.skipped, 1);
}

TEST(EmbNetBatch, ThreeQueryBruteForce) {
  Rng rng = derived_rng(4, 0);
  const Mat regions = unit_rows(random_mat(6, 3, rng)), phrases = unit_rows(random_mat(3, 3, rng));
  const std::vector<TripletQuery> q{{0, {0, 1}, {3, 4}}, {1, {1, 2}, {0, 5}}, {2, {5}, {0, 1, 2}}};
  const EmbNetParams prm{0.5, 0.3, 0.7};
  auto tl = [&](const Vec& a, const Vec& b, const Vec& c) { return std::max(0.0, prm.margin + (a - b).norm() - (a - c).norm()); };
  double cross = 0, rr = 0, pp = 0;
  int nc = 0, nr = 0, np = 0;
  for (const auto& a : q) {
    for (int p : a.positives)
      for (int m : a.negatives) cross += tl(phrases.row(a.phrase), regions.row(p), regions.row(m)), ++nc;
    for (int x : a.positives)
      for (int p : a.positives)
        if (p != x)
          for (int m : a.negatives) rr += tl(regions.row(x), regions.row(p), regions.row(m)), ++nr;
  }
  auto shares = [](const TripletQuery& a, const TripletQuery& b) {
    for (int x : a.positives)
      if (std::find(b.positives.begin(), b.positives.end(), x) != b.positives.end()) return true;
    return false;
  };
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t p = 0; p < 3; ++p)
      for (std::size_t m = 0; m < 3; ++m)
        if (p != a && m != a && shares(q[a], q[p]) && !shares(q[a], q[m]))
          pp += tl(phrases.row(q[a].phrase), phrases.row(q[p].phrase), phrases.row(q[m].phrase)), ++np;
  ASSERT_GT(np, 0);
  const double expect = cross / nc + prm.w_rr * rr / nr + prm.w_pp * pp / np;
  EXPECT_NEAR(embnet_batch_loss(phrases, regions, q, prm).value, expect, 1e-14);
}

// ---- SimNet ---------------------------------------------------------------

SimNetStages tiny_simnet() {
  SimNetStages s;
  s.w1 = Mat(2, 2);
  s.w1 << 1, -1, 0.5, 2;
  s.b1 = Vec::Zero(2);
  s.w2 = Mat(2, 2);
  s.w2 << 1, 1, -1, 0.25;
  s.b2 = Vec::Zero(2);
  s.a = Vec(2);
  s.a << 2, -3;
  return s;
}

TEST(SimNet, ZeroInputGivesEvenOdds) {
  Rng rng = derived_rng(5, 0);
  const auto s = SimNetStages::random(4, 6, 3, rng);
  const double z = simnet_score(s, Vec::Zero(4), random_vec(4, rng));
  EXPECT_EQ(z, 0.0);
  EXPECT_EQ(logistic(z), 0.5);
}

TEST(SimNet, FinalStageScalesLogit) {
  Rng rng = derived_rng(6, 0);
  auto s = SimNetStages::random(4, 6, 3, rng);
  const Vec r = random_vec(4, rng), p = random_vec(4, rng);
  const double base = simnet_score(s, r, p);
  s.a *= 2.5;
  EXPECT_NEAR(simnet_score(s, r, p), 2.5 * base, 1e-14);
}

TEST(SimNet, TinyWeightsByHand) {
  const auto s = tiny_simnet();
  Vec r(2), p(2);
  r << 1, 2;
  p << 3, 0.5;
  // fused (3, 1); z1 = (2, 3.5); z2 = (5.5, -1.125) -> relu (5.5, 0); logit 11.
  EXPECT_DOUBLE_EQ(simnet_score(s, r, p), 11.0);
}

TEST(SimNet, BackwardMatchesFiniteDifferences) {
  Rng rng = derived_rng(7, 0);
  auto s = SimNetStages::random(4, 5, 3, rng);
  s.b1 = 0.1 * random_vec(5, rng);
  s.b2 = 0.1 * random_vec(3, rng);
  const Mat fused = random_mat(6, 4, rng);
  const Vec labels = (Vec(6) << 1, -1, 1, 1, -1, -1).finished();
  SimNetTrace tr;
  const Vec logits = simnet_logits(s, fused, &tr);
  const auto loss = simnet_loss(logits, labels, 0.0, s.a);
  SimNetGrad g = SimNetGrad::zeros_like(s);
  const Mat gin = simnet_backward(s, tr, loss.grad_logits, g);
  Vec x(fused.size());
  Eigen::Map<Mat>(x.data(), 6, 4) = fused;
  const auto r = grad_check(
      [&](const Vec& v) { return simnet_loss(simnet_logits(s, Eigen::Map<const Mat>(v.data(), 6, 4)), labels, 0.0, s.a).value; },
      x, Eigen::Map<const Vec>(gin.data(), gin.size()));
  EXPECT_LT(r.max_rel_error, 1e-4);
  Vec w(s.w1.size());
  Eigen::Map<Mat>(w.data(), 5, 4) = s.w1;
  const auto rw = grad_check(
      [&](const Vec& v) {
        auto c = s;
        c.w1 = Eigen::Map<const Mat>(v.data(), 5, 4);
        return simnet_loss(simnet_logits(c, fused), labels, 0.0, c.a).value;
      },
      w, Eigen::Map<const Vec>(g.w1.data(), g.w1.size()));
  EXPECT_LT(rw.max_rel_error, 1e-4);
}

TEST(SimNetLoss, ZeroLogitsAndAsymptote) {
  const Vec zeros = Vec::Zero(4), labels = (Vec(4) << 1, -1, 1, -1).finished();
  Vec a(2);
  a << 0.5, -1.5;
  EXPECT_NEAR(simnet_loss(zeros, labels, 0.1, a).value, 4 * std::log(2.0) + 0.2, 1e-15);
  EXPECT_LT(simnet_loss(60.0 * labels, labels, 0.0, a).value, 1e-20);
  EXPECT_THROW(simnet_loss(zeros, Vec::Zero(4), 0.0, a), Error);
}

TEST(SimNetLoss, GradientMatchesFiniteDifferences) {
  Rng rng = derived_rng(8, 0);
  for (int t = 0; t < 20; ++t) {
    const Vec logits = 3 * random_vec(5, rng);
    Vec labels(5);
    for (int i = 0; i < 5; ++i) labels[i] = uniform01(rng) < 0.5 ? -1 : 1;
    Vec a = random_vec(3, rng);
    const auto l = simnet_loss(logits, labels, 0.3, a);
    EXPECT_LT(grad_check([&](const Vec& v) { return simnet_loss(v, labels, 0.3, a).value; }, logits, l.grad_logits).max_rel_error, 1e-4);
    EXPECT_LT(grad_check([&](const Vec& v) { return simnet_loss(logits, labels, 0.3, v).value; }, a, l.grad_reg).max_rel_error, 1e-4);
  }
}

// ---- QA -------------------------------------------------------------------

TEST(Qa, IdentityGeneratorIsDotProduct) {
  Rng rng = derived_rng(9, 0);
  QaHead h{Mat::Identity(4, 4), Vec::Zero(4), 0.0};
  const Vec v = random_vec(4, rng), r = random_vec(4, rng);
  EXPECT_NEAR(qa_generate_and_score(h, v, r), v.dot(r), 1e-15);
}

TEST(Qa, ZeroPhraseLeavesBias) {
  Rng rng = derived_rng(10, 0);
  QaHead h{random_mat(3, 4, rng), random_vec(4, rng), 0.75};
  EXPECT_EQ(qa_generate_and_score(h, Vec::Zero(4), random_vec(3, rng)), 0.75);
}

TEST(Qa, SmallGeneratorByHand) {
  QaHead h;
  h.wc = Mat(2, 3);
  h.wc << 1, 0, 2, 0, -1, 1;
  h.bias_gen = Vec(3);
  h.bias_gen << 0.5, 0, 0;
  h.b0 = -1;
  Vec v(3), r(2);
  v << 1, 2, 3;
  r << 2, -1;
  // w = (7, 1); w.r = 13; bias = 0.5 - 1.
  EXPECT_DOUBLE_EQ(qa_generate_and_score(h, v, r), 12.5);
  Mat vs(1, 3), rs(2, 2);
  vs.row(0) = v.transpose();
  rs << 2, -1, 0, 0;
  const Mat m = qa_logit_matrix(h, vs, rs);
  EXPECT_DOUBLE_EQ(m(0, 0), 12.5);
  EXPECT_DOUBLE_EQ(m(0, 1), -0.5);
}

TEST(Qa, LossValuesAndGradients) {
  EXPECT_NEAR(qa_loss(Vec::Zero(3), (Vec(3) << 1, 0, 1).finished()).value, std::log(2.0), 1e-15);
  EXPECT_LT(qa_loss((Vec(2) << 50, -50).finished(), (Vec(2) << 1, 0).finished()).value, 1e-20);
  Rng rng = derived_rng(11, 0);
  QaHead h{random_mat(3, 4, rng), random_vec(4, rng), 0.2};
  const Mat ps = random_mat(2, 4, rng), rs = random_mat(5, 3, rng);
  Mat labels = Mat::Zero(2, 5);
  labels(0, 1) = labels(1, 3) = 1;
  auto loss_of = [&](const QaHead& hh, const Mat& pp, const Mat& rr) {
    const Mat lg = qa_logit_matrix(hh, pp, rr);
    return qa_loss(Eigen::Map<const Vec>(lg.data(), lg.size()), Eigen::Map<const Vec>(labels.data(), labels.size()));
  };
  const auto l = loss_of(h, ps, rs);
  QaGrad g = QaGrad::zeros_like(h);
  Mat gp, gr;
  qa_backward(h, ps, rs, Eigen::Map<const Mat>(l.grad_logits.data(), 2, 5), g, gp, gr);
  Vec w(h.wc.size());
  Eigen::Map<Mat>(w.data(), 3, 4) = h.wc;
  EXPECT_LT(grad_check(
                [&](const Vec& v) {
                  auto c = h;
                  c.wc = Eigen::Map<const Mat>(v.data(), 3, 4);
                  return loss_of(c, ps, rs).value;
                },
                w, Eigen::Map<const Vec>(g.wc.data(), g.wc.size()))
                .max_rel_error,
            1e-4);
  Vec pv(ps.size());
  Eigen::Map<Mat>(pv.data(), 2, 4) = ps;
  EXPECT_LT(grad_check([&](const Vec& v) { return loss_of(h, Eigen::Map<const Mat>(v.data(), 2, 4), rs).value; }, pv,
                       Eigen::Map<const Vec>(gp.data(), gp.size()))
                .max_rel_error,
            1e-4);
  Vec rv(rs.size());
  Eigen::Map<Mat>(rv.data(), 5, 3) = rs;
  EXPECT_LT(grad_check([&](const Vec& v) { return loss_of(h, ps, Eigen::Map<const Mat>(v.data(), 5, 3)).value; }, rv,
                       Eigen::Map<const Vec>(gr.data(), gr.size()))
                .max_rel_error,
            1e-4);
}

// ---- Box regression -------------------------------------------------------

TEST(SmoothL1, ClosedForms) {
  const BoxDeltas zero{0, 0, 0, 0};
  EXPECT_EQ(smooth_l1(zero, zero).value, 0.0);
  EXPECT_DOUBLE_EQ(smooth_l1({0.5, 0, 0, 0}, zero).value, 0.125);
  EXPECT_DOUBLE_EQ(smooth_l1({2, 0, 0, 0}, zero).value, 1.5);
  const auto below = smooth_l1({1 - 1e-12, 0, 0, 0}, zero), at = smooth_l1({1, 0, 0, 0}, zero);
  EXPECT_NEAR(below.value, 0.5, 1e-11);
  EXPECT_DOUBLE_EQ(at.value, 0.5);
  EXPECT_NEAR(below.grad[0], 1.0, 1e-11);
  EXPECT_EQ(at.grad[0], 1.0);
}

TEST(SmoothL1, BatchLossIsScaledMean) {
  const std::vector<BoxDeltas> pred{{0.5, 0, 0, 0}, {2, 0, 0, -2}}, target(2, BoxDeltas{0, 0, 0, 0});
  const auto l = bbreg_loss(pred, target);
  EXPECT_DOUBLE_EQ(l.value, (0.125 + 3.0) / 8.0);
  EXPECT_DOUBLE_EQ(l.grads[1][3], -1.0 / 8.0);
}

TEST(Boxes, EncodeDecode) {
  const BoundingBox a{10, 20, 30, 60};
  for (double t : encode_box(a, a)) EXPECT_EQ(t, 0.0);
  const auto d = encode_box({0, 0, 40, 80}, {10, 20, 30, 60});
  EXPECT_NEAR(d[2], std::log(2.0), 1e-15);
  EXPECT_NEAR(d[3], std::log(2.0), 1e-15);
  Rng rng = derived_rng(12, 0);
  for (int t = 0; t < 200; ++t) {
    const BoundingBox b = testing::grid_box(rng), anchor = testing::grid_box(rng);
    const BoundingBox back = decode_box(encode_box(b, anchor), anchor);
    EXPECT_NEAR(back.x1, b.x1, 1e-6);
    EXPECT_NEAR(back.y1, b.y1, 1e-6);
    EXPECT_NEAR(back.x2, b.x2, 1e-6);
    EXPECT_NEAR(back.y2, b.y2, 1e-6);
  }
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {5, 5, 15, 15}), 25.0 / 175.0);
}

TEST(Localization, ArgmaxInvariantUnderPositiveScaling) {
  Rng rng = derived_rng(13, 0);
  for (int t = 0; t < 100; ++t) {
    const Vec s = random_vec(8, rng);
    Eigen::Index a, b;
    s.maxCoeff(&a);
    (s * (0.01 + 10 * uniform01(rng))).maxCoeff(&b);
    EXPECT_EQ(a, b);
  }
}

// ---- Negative phrase augmentation ------------------------------------------

TEST(Npa, ParentChildNeverNegative) {
  Lexicon lex;
  lex.add("man", "person");
  ConfusionSample s;
  s.phrases = {"a man", "a person", "a dog"};
  s.scores = Mat(3, 2);
  s.scores << 1, 0, 0.9, 0.1, 0.5, 0.2;
  s.positives = {{0}, {1}, {1}};
  const auto table = build_confusion_table(s, lex, {});
  for (const auto& e : table.of("a man")) EXPECT_NE(e.phrase, "a person");
  for (const auto& e : table.of("a person")) EXPECT_NE(e.phrase, "a man");
  ASSERT_EQ(table.of("a man").size(), 1u);
  EXPECT_EQ(table.of("a man")[0].phrase, "a dog");
}

TEST(Npa, SinglePhraseHasNoCandidates) {
  ConfusionSample s{{"a cat"}, Mat::Ones(1, 3), {{0, 1}}};
  EXPECT_TRUE(build_confusion_table(s, {}, {}).of("a cat").empty());
  ConfusionSample empty;
  EXPECT_EQ(build_confusion_table(empty, {}, {}).warnings, 1u);
}

TEST(Npa, FivePhraseBruteForce) {
  Rng rng = derived_rng(14, 0);
  Lexicon lex;
  lex.add("dog", "animal");
  ConfusionSample s;
  s.phrases = {"a dog", "an animal", "a cat", "the car", "a tree"};
  s.phrases[1] = "a animal";
  s.scores = random_mat(5, 6, rng);
  s.positives = {{0, 1}, {1}, {2, 3}, {4}, {5, 0}};
  CoannotationCounts co{{unordered_key("a cat", "the car"), 2}};
  ConfusionOptions opt;
  opt.capacity = 2;
  const auto table = build_confusion_table(s, lex, co, opt);
  for (std::size_t p = 0; p < 5; ++p) {
    std::vector<std::pair<double, std::string>> rank;
    for (std::size_t q = 0; q < 5; ++q) {
      if (q == p) continue;
      if ((p == 0 && q == 1) || (p == 1 && q == 0)) continue;  // lexicon pair
      if ((p == 2 && q == 3) || (p == 3 && q == 2)) continue;  // co-annotated
      double m = 0;
      for (int r : s.positives[p]) m += s.scores(static_cast<Eigen::Index>(q), r);
      rank.push_back({-m / static_cast<double>(s.positives[p].size()), s.phrases[q]});
    }
    std::sort(rank.begin(), rank.end());
    rank.resize(2);
    const auto& got = table.of(s.phrases[p]);
    ASSERT_EQ(got.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
      EXPECT_EQ(got[i].phrase, rank[i].second);
      EXPECT_DOUBLE_EQ(got[i].score, -rank[i].first);
    }
  }
}

}  // namespace
}  // namespace opd
