#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "opd/augment.hpp"
#include "opd/boxes.hpp"
#include "opd/checkpoint.hpp"
#include "opd/datamodel.hpp"
#include "opd/model.hpp"
#include "opd/npa.hpp"
#include "opd/random.hpp"
#include "opd/sampler.hpp"

namespace opd {

struct TrainConfig {
  HeadKind head = HeadKind::SimNet;
  double learning_rate = 1e-3;
  int steps = 1000;
  double momentum = 0.9;
  double max_grad_norm = 0.0;  // global gradient-norm clip; 0 disables
  double weight_decay = 0.0;
  double lambda1 = 1e-4;  // L1 on SimNet's final stage
  double lambda2 = 0.1;   // drift toward the CCA initialization
  bool cca_init = true;
  double head_only_fraction = 0.5;  // leading share of steps that train only the head
  bool freeze_bias = false;
  bool npa = false;
  int npa_period = kConfusionRebuildPeriod;
  int npa_per_phrase = 3;
  int npa_sample_images = 50;
  int random_negatives = 5;
  int images_per_step = 1;  // per-image batches whose gradients are summed each step
  bool ifs = true;
  int budget = 30;
  int gt_subsample = 5;
  double positive_iou = 0.6;
  std::vector<Eigen::Index> widths = {2048, 512};
  Eigen::Index simnet_hidden = 512;
  bool relu = true;
  double scale_exponent = 4.0;
  std::optional<double> cca_eps;
  int cca_refits = 1;
  bool bbreg = false;
  EmbNetParams embnet;
  Eigen::Index dcca_dim = 512;
  int dcca_batch = 512;
  double dcca_r = 1e-3;
  std::uint64_t seed = 0;

  SamplerConfig sampler() const {
    SamplerConfig s;
    s.budget = budget;
    s.gt_subsample = gt_subsample;
    s.inverse_frequency = ifs;
    s.seed = seed;
    return s;
  }

  void validate() const {
    if (!(learning_rate >= 0) || steps < 0) throw ConfigError("learning_rate and steps must be non-negative");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
    if (lambda1 < 0 || lambda2 < 0 || weight_decay < 0 || max_grad_norm < 0) throw ConfigError("regularization weights must be non-negative");
    if (!(head_only_fraction >= 0 && head_only_fraction <= 1)) throw ConfigError("head_only_fraction must lie in [0, 1]");
    if (budget < 0 || gt_subsample < 1) throw ConfigError("budget must be >= 0 and gt_subsample >= 1");
    if (npa_period < 1) throw ConfigError("npa_period must be >= 1");
    if (images_per_step < 1) throw ConfigError("images_per_step must be >= 1");
    if (widths.empty() || std::any_of(widths.begin(), widths.end(), [](Eigen::Index w) { return w < 1; }))
      throw ConfigError("widths must be a non-empty list of positive sizes");
    if (simnet_hidden < 1 || dcca_dim < 1 || dcca_batch < 2) throw ConfigError("layer sizes must be positive");
    if (cca_refits < 1) throw ConfigError("cca_refits must be >= 1");
    if (head == HeadKind::Cca && steps > 0) throw ConfigError("the cca head has no trainable parameters; use steps = 0");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"head", std::string(head_name(c.head))},
          {"learning_rate", c.learning_rate},
          {"steps", c.steps},
          {"momentum", c.momentum},
          {"max_grad_norm", c.max_grad_norm},
          {"weight_decay", c.weight_decay},
          {"lambda1", c.lambda1},
          {"lambda2", c.lambda2},
          {"cca_init", c.cca_init},
          {"head_only_fraction", c.head_only_fraction},
          {"freeze_bias", c.freeze_bias},
          {"npa", c.npa},
          {"npa_period", c.npa_period},
          {"npa_per_phrase", c.npa_per_phrase},
          {"npa_sample_images", c.npa_sample_images},
          {"random_negatives", c.random_negatives},
          {"images_per_step", c.images_per_step},
          {"ifs", c.ifs},
          {"budget", c.budget},
          {"gt_subsample", c.gt_subsample},
          {"positive_iou", c.positive_iou},
          {"widths", c.widths},
          {"simnet_hidden", c.simnet_hidden},
          {"relu", c.relu},
          {"scale_exponent", c.scale_exponent},
          {"cca_eps", c.cca_eps ? nlohmann::json(*c.cca_eps) : nlohmann::json(nullptr)},
          {"cca_refits", c.cca_refits},
          {"bbreg", c.bbreg},
          {"margin", c.embnet.margin},
          {"w_rr", c.embnet.w_rr},
          {"w_pp", c.embnet.w_pp},
          {"dcca_dim", c.dcca_dim},
          {"dcca_batch", c.dcca_batch},
          {"dcca_r", c.dcca_r},
          {"seed", c.seed}};
}

// Overlays the keys present in j onto base. Unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const auto& v = it.value();
      if (k == "head") c.head = parse_head(v.get<std::string>());
      else if (k == "learning_rate") c.learning_rate = v.get<double>();
      else if (k == "steps") c.steps = v.get<int>();
      else if (k == "momentum") c.momentum = v.get<double>();
      else if (k == "max_grad_norm") c.max_grad_norm = v.get<double>();
      else if (k == "weight_decay") c.weight_decay = v.get<double>();
      else if (k == "lambda1") c.lambda1 = v.get<double>();
      else if (k == "lambda2") c.lambda2 = v.get<double>();
      else if (k == "cca_init") c.cca_init = v.get<bool>();
      else if (k == "head_only_fraction") c.head_only_fraction = v.get<double>();
      else if (k == "freeze_bias") c.freeze_bias = v.get<bool>();
      else if (k == "npa") c.npa = v.get<bool>();
      else if (k == "npa_period") c.npa_period = v.get<int>();
      else if (k == "npa_per_phrase") c.npa_per_phrase = v.get<int>();
      else if (k == "npa_sample_images") c.npa_sample_images = v.get<int>();
      else if (k == "random_negatives") c.random_negatives = v.get<int>();
      else if (k == "images_per_step") c.images_per_step = v.get<int>();
      else if (k == "ifs") c.ifs = v.get<bool>();
      else if (k == "budget") c.budget = v.get<int>();
      else if (k == "gt_subsample") c.gt_subsample = v.get<int>();
      else if (k == "positive_iou") c.positive_iou = v.get<double>();
      else if (k == "widths") c.widths = v.get<std::vector<Eigen::Index>>();
      else if (k == "simnet_hidden") c.simnet_hidden = v.get<Eigen::Index>();
      else if (k == "relu") c.relu = v.get<bool>();
      else if (k == "scale_exponent") c.scale_exponent = v.get<double>();
      else if (k == "cca_eps") c.cca_eps = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
      else if (k == "cca_refits") c.cca_refits = v.get<int>();
      else if (k == "bbreg") c.bbreg = v.get<bool>();
      else if (k == "margin") c.embnet.margin = v.get<double>();
      else if (k == "w_rr") c.embnet.w_rr = v.get<double>();
      else if (k == "w_pp") c.embnet.w_pp = v.get<double>();
      else if (k == "dcca_dim") c.dcca_dim = v.get<Eigen::Index>();
      else if (k == "dcca_batch") c.dcca_batch = v.get<int>();
      else if (k == "dcca_r") c.dcca_r = v.get<double>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else throw ConfigError("unknown training config key \"" + k + "\"");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Training data

struct TrainingData {
  const GroundTruthDataset* dataset = nullptr;
  const FeatureStore* region_features = nullptr;
  const FeatureStore* phrase_features = nullptr;
  const ProposalSet* proposals = nullptr;
  const Lexicon* lexicon = nullptr;
};

// Annotated regions plus proposals of one image, restricted to those with features.
inline std::vector<Candidate> image_candidates(const TrainingData& d, const ImageRecord& img) {
  std::vector<Candidate> out;
  for (std::size_t r = 0; r < img.regions.size(); ++r) {
    auto id = region_feature_id(img.image_id, r);
    if (d.region_features->contains(id)) out.push_back({img.regions[r].box, std::move(id)});
  }
  if (d.proposals) {
    const auto& boxes = d.proposals->of(img.image_id);
    for (std::size_t p = 0; p < boxes.size(); ++p) {
      auto id = proposal_feature_id(img.image_id, p);
      if (d.region_features->contains(id)) out.push_back({boxes[p], std::move(id)});
    }
  }
  return out;
}

// Paired (region feature, phrase feature) rows from non-augmented annotations.
inline std::pair<Mat, Mat> cca_training_pairs(const TrainingData& d) {
  std::vector<std::string> rids, pids;
  for (const auto& img : d.dataset->images)
    for (std::size_t r = 0; r < img.regions.size(); ++r) {
      const auto rid = region_feature_id(img.image_id, r);
      if (!d.region_features->contains(rid)) continue;
      for (const auto& p : img.regions[r].phrases)
        if (!p.augmented && d.phrase_features->contains(p.text)) {
          rids.push_back(rid);
          pids.push_back(p.text);
        }
    }
  if (rids.size() < 2) throw FitError("fewer than two region-phrase training pairs have features");
  return {d.region_features->gather(rids), d.phrase_features->gather(pids)};
}

// One per-image minibatch: candidate regions × phrases with ±1 labels.
struct TrainBatch {
  Mat regions;
  std::vector<BoundingBox> region_boxes;
  Mat phrases;
  std::vector<std::string> phrase_texts;
  Mat labels;  // phrases × regions, +1 / −1
  struct BoxTarget {
    int phrase = 0, region = 0;
    BoundingBox target;
  };
  std::vector<BoxTarget> box_targets;
};

inline TrainBatch make_batch(const TrainingData& d, const ImageRecord& img, const std::vector<Candidate>& cands,
                             const std::vector<std::string>& phrases, double positive_iou) {
  TrainBatch b;
  std::vector<std::string> ids;
  for (const auto& c : cands) {
    ids.push_back(c.feature_id);
    b.region_boxes.push_back(c.box);
  }
  b.regions = d.region_features->gather(ids);
  for (const auto& p : phrases)
    if (d.phrase_features->contains(p)) b.phrase_texts.push_back(p);
  b.phrases = d.phrase_features->gather(b.phrase_texts);
  const auto np = static_cast<Eigen::Index>(b.phrase_texts.size());
  const auto nr = static_cast<Eigen::Index>(cands.size());
  b.labels = Mat::Constant(np, nr, -1.0);
  for (Eigen::Index p = 0; p < np; ++p) {
    std::vector<BoundingBox> gt;
    for (const auto& reg : img.regions)
      for (const auto& l : reg.phrases)
        if (l.text == b.phrase_texts[static_cast<std::size_t>(p)]) {
          gt.push_back(reg.box);
          break;
        }
    for (Eigen::Index r = 0; r < nr; ++r) {
      double best = 0;
      const BoundingBox* best_box = nullptr;
      for (const auto& g : gt) {
        const double o = iou(b.region_boxes[static_cast<std::size_t>(r)], g);
        if (o > best) best = o, best_box = &g;
      }
      if (best >= positive_iou) {
        b.labels(p, r) = 1.0;
        b.box_targets.push_back({static_cast<int>(p), static_cast<int>(r), *best_box});
      }
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Gradients and parameter traversal

struct ModelGrad {
  std::vector<LayerGrad> region, phrase;
  SimNetGrad simnet;
  QaGrad qa;
  Mat bbreg_w;
  Vec bbreg_b;
};

inline ModelGrad zero_grad(const AlignmentModel& m) {
  ModelGrad g;
  g.region = zero_grads(m.region);
  g.phrase = zero_grads(m.phrase);
  g.simnet = SimNetGrad::zeros_like(m.simnet);
  g.qa = QaGrad::zeros_like(m.qa);
  if (m.bbreg) {
    g.bbreg_w = Mat::Zero(m.bbreg->w.rows(), m.bbreg->w.cols());
    g.bbreg_b = Vec::Zero(m.bbreg->b.size());
  }
  return g;
}

enum class ParamGroup { BranchWeight, BranchBias, Head };

// f(group, layer or nullptr, param, grad, velocity, count) for every trainable
// block, in a fixed order.
template <typename F>
void visit_params(AlignmentModel& m, ModelGrad& g, ModelGrad& v, F&& f) {
  auto branch = [&](Branch& br, std::vector<LayerGrad>& gb, std::vector<LayerGrad>& vb) {
    for (std::size_t i = 0; i < br.layers.size(); ++i) {
      auto& l = br.layers[i];
      f(ParamGroup::BranchWeight, &l, l.w.data(), gb[i].w.data(), vb[i].w.data(), l.w.size());
      f(ParamGroup::BranchBias, &l, l.b.data(), gb[i].b.data(), vb[i].b.data(), l.b.size());
    }
  };
  branch(m.region, g.region, v.region);
  branch(m.phrase, g.phrase, v.phrase);
  auto head = [&](auto& p, auto& gp, auto& vp) {
    f(ParamGroup::Head, nullptr, p.data(), gp.data(), vp.data(), p.size());
  };
  auto scalar = [&](double& p, double& gp, double& vp) { f(ParamGroup::Head, nullptr, &p, &gp, &vp, Eigen::Index{1}); };
  if (m.head == HeadKind::SimNet) {
    head(m.simnet.w1, g.simnet.w1, v.simnet.w1);
    head(m.simnet.b1, g.simnet.b1, v.simnet.b1);
    head(m.simnet.w2, g.simnet.w2, v.simnet.w2);
    head(m.simnet.b2, g.simnet.b2, v.simnet.b2);
    head(m.simnet.a, g.simnet.a, v.simnet.a);
    scalar(m.simnet.b3, g.simnet.b3, v.simnet.b3);
  }
  if (m.head == HeadKind::Qa) {
    head(m.qa.wc, g.qa.wc, v.qa.wc);
    head(m.qa.bias_gen, g.qa.bias_gen, v.qa.bias_gen);
    scalar(m.qa.b0, g.qa.b0, v.qa.b0);
  }
  if (m.bbreg) {
    head(m.bbreg->w, g.bbreg_w, v.bbreg_w);
    head(m.bbreg->b, g.bbreg_b, v.bbreg_b);
  }
}

inline Vec flatten_params(const AlignmentModel& model) {
  AlignmentModel m = model;
  ModelGrad g = zero_grad(m), v = zero_grad(m);
  std::vector<double> out;
  visit_params(m, g, v, [&](ParamGroup, LinearAlignLayer*, double* p, double*, double*, Eigen::Index n) {
    out.insert(out.end(), p, p + n);
  });
  return Eigen::Map<Vec>(out.data(), static_cast<Eigen::Index>(out.size()));
}

inline Vec flatten_grad(const AlignmentModel& model, const ModelGrad& grad) {
  AlignmentModel m = model;
  ModelGrad g = grad, v = zero_grad(m);
  std::vector<double> out;
  visit_params(m, g, v, [&](ParamGroup, LinearAlignLayer*, double*, double* gp, double*, Eigen::Index n) {
    out.insert(out.end(), gp, gp + n);
  });
  return Eigen::Map<Vec>(out.data(), static_cast<Eigen::Index>(out.size()));
}

inline void assign_params(AlignmentModel& m, const Vec& flat) {
  ModelGrad g = zero_grad(m), v = zero_grad(m);
  Eigen::Index at = 0;
  visit_params(m, g, v, [&](ParamGroup, LinearAlignLayer*, double* p, double*, double*, Eigen::Index n) {
    if (at + n > flat.size()) throw Error("assign_params: vector too short");
    std::copy(flat.data() + at, flat.data() + at + n, p);
    at += n;
  });
  if (at != flat.size()) throw Error("assign_params: vector too long");
}

// ---------------------------------------------------------------------------
// Batch loss

struct BatchLoss {
  double value = 0.0;
  int skipped = 0;
};

// Data loss of one batch. With g set, accumulates parameter gradients; branch
// gradients only when branch_grads is set.
inline BatchLoss batch_loss(const AlignmentModel& m, const TrainBatch& b, ModelGrad* g, bool branch_grads = true,
                            double lambda1 = 0.0) {
  BatchLoss out;
  const Eigen::Index np = b.phrases.rows(), nr = b.regions.rows();
  if (np == 0 || nr == 0) return out;
  BranchTrace tr_r, tr_p;
  const Mat re = forward_rows(m.region, b.regions, &tr_r);
  const Mat pe = forward_rows(m.phrase, b.phrases, &tr_p);
  Mat g_re = Mat::Zero(re.rows(), re.cols()), g_pe = Mat::Zero(pe.rows(), pe.cols());

  switch (m.head) {
    case HeadKind::Cca:
    case HeadKind::DeepCca:
      throw ConfigError("batch_loss: the " + std::string(head_name(m.head)) + " head has no classification loss");
    case HeadKind::SimNet: {
      Vec rn, pn;
      const Mat ru = normalize_rows(re, rn), pu = normalize_rows(pe, pn);
      std::vector<SimNetTrace> traces(static_cast<std::size_t>(np));
      Vec logits(np * nr), labels(np * nr);
      for (Eigen::Index p = 0; p < np; ++p) {
        Mat fused = ru.array().rowwise() * pu.row(p).array();
        logits.segment(p * nr, nr) = simnet_logits(m.simnet, fused, &traces[static_cast<std::size_t>(p)]);
        labels.segment(p * nr, nr) = b.labels.row(p).transpose();
      }
      auto loss = simnet_loss(logits, labels, lambda1, m.simnet.a);
      out.value += loss.value;
      if (g) {
        g->simnet.a += loss.grad_reg;
        Mat g_ru = Mat::Zero(ru.rows(), ru.cols()), g_pu = Mat::Zero(pu.rows(), pu.cols());
        for (Eigen::Index p = 0; p < np; ++p) {
          Mat d_fused = simnet_backward(m.simnet, traces[static_cast<std::size_t>(p)], loss.grad_logits.segment(p * nr, nr),
                                        g->simnet);
          g_ru.array() += d_fused.array().rowwise() * pu.row(p).array();
          g_pu.row(p) += d_fused.cwiseProduct(ru).colwise().sum();
        }
        g_re += normalize_rows_backward(ru, rn, g_ru);
        g_pe += normalize_rows_backward(pu, pn, g_pu);
      }
      break;
    }
    case HeadKind::Qa: {
      const Mat logits = qa_logit_matrix(m.qa, pe, re);
      const Mat targets = (b.labels.array() + 1.0) * 0.5;
      auto loss = qa_loss(Eigen::Map<const Vec>(logits.data(), logits.size()),
                          Eigen::Map<const Vec>(targets.data(), targets.size()));
      out.value += loss.value;
      if (g) {
        const Mat grad = Eigen::Map<const Mat>(loss.grad_logits.data(), np, nr);
        Mat gp, gr;
        qa_backward(m.qa, pe, re, grad, g->qa, gp, gr);
        g_pe += gp;
        g_re += gr;
      }
      break;
    }
    case HeadKind::EmbNet: {
      Vec pn, rn;
      const Mat pu = normalize_rows(pe, pn), ru = normalize_rows(re, rn);
      std::vector<TripletQuery> queries;
      for (Eigen::Index p = 0; p < np; ++p) {
        TripletQuery q;
        q.phrase = static_cast<int>(p);
        for (Eigen::Index r = 0; r < nr; ++r) (b.labels(p, r) > 0 ? q.positives : q.negatives).push_back(static_cast<int>(r));
        if (!q.positives.empty()) queries.push_back(std::move(q));
      }
      auto loss = embnet_batch_loss(pu, ru, queries, m.embnet);
      out.value += loss.value;
      out.skipped += loss.skipped;
      if (g) {
        g_pe += normalize_rows_backward(pu, pn, loss.grad_phrase);
        g_re += normalize_rows_backward(ru, rn, loss.grad_region);
      }
      break;
    }
  }

  if (m.bbreg && !b.box_targets.empty()) {
    std::vector<BoxDeltas> pred, target;
    std::vector<Vec> fused;
    for (const auto& t : b.box_targets) {
      fused.push_back(re.row(t.region).transpose().cwiseProduct(pe.row(t.phrase).transpose()));
      pred.push_back(m.bbreg->predict(fused.back()));
      target.push_back(encode_box(t.target, b.region_boxes[static_cast<std::size_t>(t.region)]));
    }
    auto loss = bbreg_loss(pred, target);
    out.value += loss.value;
    if (g)
      for (std::size_t i = 0; i < fused.size(); ++i) {
        const Eigen::Map<const Eigen::Vector4d> gd(loss.grads[i].data());
        g->bbreg_w += gd * fused[i].transpose();
        g->bbreg_b += gd;
      }
  }

  if (g && branch_grads) {
    backward_rows(m.region, tr_r, g_re, g->region);
    backward_rows(m.phrase, tr_p, g_pe, g->phrase);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model construction

namespace detail {

inline Branch branch_from(const std::vector<LayerPair>& stack, bool region, bool relu) {
  Branch br;
  br.relu_between = relu;
  for (const auto& p : stack) br.layers.push_back(region ? p.region : p.phrase);
  return br;
}

inline LinearAlignLayer centered_random_layer(const Mat& x, Eigen::Index out, Rng& rng) {
  auto l = LinearAlignLayer::random(x.cols(), out, rng);
  l.mu = x.colwise().mean().transpose();
  round_to_f32(l.mu);
  return l;
}

inline void add_heads(AlignmentModel& m, const TrainConfig& cfg, Rng& rng) {
  m.embnet = cfg.embnet;
  const Eigen::Index e = m.embed_dim();
  if (m.head == HeadKind::SimNet) m.simnet = SimNetStages::random(e, cfg.simnet_hidden, cfg.simnet_hidden, rng);
  if (m.head == HeadKind::Qa) {
    auto gen = LinearAlignLayer::random(m.phrase_dim, m.region_dim, rng);
    m.qa = QaHead{gen.w, Vec::Zero(m.phrase_dim), 0.0};
  }
  if (cfg.bbreg) {
    if (m.region.out_dim(m.region_dim) != m.phrase.out_dim(m.phrase_dim))
      throw ConfigError("box regression needs equal region and phrase embedding sizes");
    m.bbreg = BbregHead{Mat::Zero(4, e), Vec::Zero(4)};
  }
}

}  // namespace detail

inline CcaOptions cca_options(const TrainConfig& cfg) {
  CcaOptions o;
  o.eps = cfg.cca_eps;
  o.scale_exponent = cfg.scale_exponent;
  return o;
}

// Builds the untrained model for cfg.head. With `first_layer`, the lowest
// branch layers come from that solution instead of a fresh fit.
inline AlignmentModel initialize_model(const TrainingData& d, const TrainConfig& cfg,
                                       const std::optional<CcaSolution>& first_layer = std::nullopt) {
  cfg.validate();
  Rng rng = derived_rng(cfg.seed, 0);
  AlignmentModel m;
  m.head = cfg.head;
  m.region_dim = d.region_features->dimension();
  m.phrase_dim = d.phrase_features->dimension();
  if (first_layer && (first_layer->wx.rows() != m.region_dim || first_layer->wy.rows() != m.phrase_dim))
    throw ConfigError("initial CCA solution does not match the feature dimensions");

  switch (cfg.head) {
    case HeadKind::Cca: {
      auto [x, y] = cca_training_pairs(d);
      CcaOptions o = cca_options(cfg);
      o.k = std::min({cfg.widths.front(), x.cols(), y.cols()});
      auto pair = first_layer ? layers_from_cca(*first_layer) : init_pair_from_cca(x, y, o);
      m.region.layers = {pair.region};
      m.phrase.layers = {pair.phrase};
      m.region.relu_between = m.phrase.relu_between = false;
      break;
    }
    case HeadKind::DeepCca: {
      auto [x, y] = cca_training_pairs(d);
      auto lx = detail::centered_random_layer(x, cfg.dcca_dim, rng);
      auto ly = detail::centered_random_layer(y, cfg.dcca_dim, rng);
      CcaOptions o = cca_options(cfg);
      o.k = std::min(cfg.widths.back(), cfg.dcca_dim);
      auto top = init_pair_from_cca(forward_rows(lx, x), forward_rows(ly, y), o);
      m.region.layers = {lx, top.region};
      m.phrase.layers = {ly, top.phrase};
      m.region.relu_between = m.phrase.relu_between = false;
      break;
    }
    case HeadKind::EmbNet:
    case HeadKind::SimNet: {
      auto [x, y] = cca_training_pairs(d);
      m.region.relu_between = m.phrase.relu_between = cfg.relu;
      if (cfg.cca_init || first_layer) {
        std::vector<LayerPair> stack;
        Mat hx = x, hy = y;
        std::vector<Eigen::Index> rest = cfg.widths;
        if (first_layer) {
          stack.push_back(layers_from_cca(*first_layer));
          hx = forward_rows(stack.back().region, x);
          hy = forward_rows(stack.back().phrase, y);
          if (cfg.relu) hx = relu(hx), hy = relu(hy);
          rest.erase(rest.begin());
        }
        for (auto& p : init_stack_from_cca(hx, hy, rest, cca_options(cfg), cfg.relu)) stack.push_back(std::move(p));
        m.region = detail::branch_from(stack, true, cfg.relu);
        m.phrase = detail::branch_from(stack, false, cfg.relu);
      } else {
        Mat hx = x, hy = y;
        for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
          if (i > 0 && cfg.relu) hx = relu(hx), hy = relu(hy);
          m.region.layers.push_back(detail::centered_random_layer(hx, cfg.widths[i], rng));
          m.phrase.layers.push_back(detail::centered_random_layer(hy, cfg.widths[i], rng));
          hx = forward_rows(m.region.layers.back(), hx);
          hy = forward_rows(m.phrase.layers.back(), hy);
        }
      }
      break;
    }
    case HeadKind::Qa:
      break;
  }
  detail::add_heads(m, cfg, rng);
  return m;
}

// ---------------------------------------------------------------------------
// Training

class TrainingAborted : public NumericalError {
 public:
  TrainingAborted(std::size_t step, AlignmentModel last_good)
      : NumericalError("non-finite loss at step " + std::to_string(step)), step(step), last_good(std::move(last_good)) {}
  std::size_t step;
  AlignmentModel last_good;
};

struct TrainResult {
  AlignmentModel model;
  std::vector<double> history;  // per-step loss
  std::size_t skipped_queries = 0;
  std::size_t npa_rebuilds = 0;
  std::size_t confusion_warnings = 0;
  std::string rng_state;
};

namespace detail {

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline bool has_head_params(const AlignmentModel& m) {
  return m.head == HeadKind::SimNet || m.head == HeadKind::Qa || m.bbreg.has_value();
}

inline ConfusionTable rebuild_confusion(const AlignmentModel& m, const TrainingData& d, const TrainConfig& cfg,
                                        const std::vector<std::size_t>& usable, const CoannotationCounts& coannot,
                                        Rng& rng) {
  std::vector<std::size_t> pick = usable;
  const std::size_t n = std::min(pick.size(), static_cast<std::size_t>(std::max(cfg.npa_sample_images, 1)));
  for (std::size_t i = 0; i < n; ++i) std::swap(pick[i], pick[i + uniform_index(rng, pick.size() - i)]);
  pick.resize(n);
  std::sort(pick.begin(), pick.end());

  std::set<std::string> phrase_set;
  std::vector<std::string> region_ids;
  struct Col {
    std::size_t image;
    BoundingBox box;
  };
  std::vector<Col> cols;
  for (auto i : pick) {
    const auto& img = d.dataset->images[i];
    for (const auto& reg : img.regions)
      for (const auto& p : reg.phrases)
        if (d.phrase_features->contains(p.text)) phrase_set.insert(p.text);
    for (auto& c : image_candidates(d, img)) {
      region_ids.push_back(c.feature_id);
      cols.push_back({i, c.box});
    }
  }
  ConfusionSample sample;
  sample.phrases.assign(phrase_set.begin(), phrase_set.end());
  if (!sample.phrases.empty() && !region_ids.empty())
    sample.scores = score_matrix(m, d.region_features->gather(region_ids), d.phrase_features->gather(sample.phrases));
  for (const auto& p : sample.phrases) {
    std::vector<int> pos;
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const auto& img = d.dataset->images[cols[c].image];
      for (const auto& reg : img.regions) {
        bool labeled = std::any_of(reg.phrases.begin(), reg.phrases.end(), [&](const PhraseLabel& l) { return l.text == p; });
        if (labeled && iou(reg.box, cols[c].box) >= cfg.positive_iou) {
          pos.push_back(static_cast<int>(c));
          break;
        }
      }
    }
    sample.positives.push_back(std::move(pos));
  }
  static const Lexicon kNoLexicon;
  return build_confusion_table(sample, d.lexicon ? *d.lexicon : kNoLexicon, coannot);
}

// Sampled ground-truth and augmented phrases of one image, then NPA hard
// negatives and uniformly drawn random negatives.
inline std::vector<std::string> batch_phrases(const ImageRecord& img, const std::map<std::string, double>& likelihoods,
                                              const std::vector<std::string>& vocab, const ConfusionTable& table,
                                              const TrainConfig& cfg, Rng& rng) {
  auto sampled = sample_image_batch(img, likelihoods, cfg.sampler(), rng);
  std::set<std::string> labeled;
  for (const auto& reg : img.regions)
    for (const auto& l : reg.phrases) labeled.insert(l.text);
  std::vector<std::string> phrases = sampled.all();
  std::set<std::string> chosen(phrases.begin(), phrases.end());
  if (cfg.npa)
    for (const auto& p : sampled.ground_truth) {
      int added = 0;
      for (const auto& e : table.of(p)) {
        if (added >= cfg.npa_per_phrase) break;
        if (labeled.count(e.phrase) || !chosen.insert(e.phrase).second) continue;
        phrases.push_back(e.phrase);
        ++added;
      }
    }
  for (int i = 0, tries = 0; i < cfg.random_negatives && tries < 20 * cfg.random_negatives && !vocab.empty(); ++tries) {
    const auto& p = vocab[uniform_index(rng, vocab.size())];
    if (labeled.count(p) || !chosen.insert(p).second) continue;
    phrases.push_back(p);
    ++i;
  }
  return phrases;
}

// Single-layer Deep-CCA feature training on layer 0 of each branch, then a
// CCA refit of layer 1 on the new features.
inline void train_deep_cca(AlignmentModel& m, const TrainingData& d, const TrainConfig& cfg, Rng& rng,
                           TrainResult& res) {
  auto [x, y] = cca_training_pairs(d);
  auto& lx = m.region.layers.at(0);
  auto& ly = m.phrase.layers.at(0);
  const Eigen::Index k = std::min(cfg.widths.back(), cfg.dcca_dim);
  Mat vx = Mat::Zero(lx.w.rows(), lx.w.cols()), vy = Mat::Zero(ly.w.rows(), ly.w.cols());
  const auto n = static_cast<std::size_t>(x.rows());
  const std::size_t bs = std::min(n, static_cast<std::size_t>(cfg.dcca_batch));
  std::vector<Eigen::Index> idx(n);
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  for (int step = 0; step < cfg.steps; ++step) {
    for (std::size_t i = 0; i < bs; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
    std::vector<Eigen::Index> rows(idx.begin(), idx.begin() + static_cast<long>(bs));
    std::sort(rows.begin(), rows.end());
    const Mat xb = x(rows, Eigen::all), yb = y(rows, Eigen::all);
    auto obj = dcca_objective(forward_rows(lx, xb), forward_rows(ly, yb), cfg.dcca_r, cfg.dcca_r, k);
    if (!std::isfinite(obj.corr)) throw TrainingAborted(static_cast<std::size_t>(step), m);
    res.history.push_back(-obj.corr);
    LayerGrad gx = LayerGrad::zeros_like(lx), gy = LayerGrad::zeros_like(ly);
    backward_rows(lx, xb, -obj.grad_x, gx);
    backward_rows(ly, yb, -obj.grad_y, gy);
    vx = cfg.momentum * vx + gx.w;
    vy = cfg.momentum * vy + gy.w;
    lx.w -= cfg.learning_rate * vx;
    ly.w -= cfg.learning_rate * vy;
    round_to_f32(lx.w);
    round_to_f32(ly.w);
  }
  if (cfg.steps > 0) {
    CcaOptions o = cca_options(cfg);
    o.k = m.region.layers.at(1).out_dim();
    auto top = init_pair_from_cca(forward_rows(lx, x), forward_rows(ly, y), o);
    m.region.layers[1] = top.region;
    m.phrase.layers[1] = top.phrase;
  }
}

// Re-estimates layers above the lowest one by CCA on the current lower-layer
// outputs, resetting their anchors.
inline void refit_upper_layers(AlignmentModel& m, const TrainingData& d, const TrainConfig& cfg) {
  if (m.region.layers.size() < 2) return;
  auto [x, y] = cca_training_pairs(d);
  Mat hx = forward_rows(m.region.layers[0], x), hy = forward_rows(m.phrase.layers[0], y);
  std::vector<Eigen::Index> widths;
  for (std::size_t i = 1; i < m.region.layers.size(); ++i) widths.push_back(m.region.layers[i].out_dim());
  if (m.region.relu_between) hx = relu(hx), hy = relu(hy);
  auto stack = init_stack_from_cca(hx, hy, widths, cca_options(cfg), m.region.relu_between);
  for (std::size_t i = 0; i < stack.size(); ++i) {
    m.region.layers[i + 1] = stack[i].region;
    m.phrase.layers[i + 1] = stack[i].phrase;
  }
}

}  // namespace detail

// Two-phase SGD: the head alone for the leading head_only_fraction of steps,
// then head and branches jointly with the drift penalty applied as a proximal
// step (group soft-threshold of W toward W_init, soft-threshold of b).
inline TrainResult train(AlignmentModel model, const TrainingData& d, const TrainConfig& cfg) {
  cfg.validate();
  if (model.region_dim != d.region_features->dimension() || model.phrase_dim != d.phrase_features->dimension())
    throw ConfigError("model and feature dimensions differ");
  if (model.head != cfg.head) throw ConfigError("model head and configured head differ");
  TrainResult res;
  Rng rng = derived_rng(cfg.seed, 1);

  if (model.head == HeadKind::Cca) {
    res.model = std::move(model);
    res.rng_state = detail::rng_state(rng);
    return res;
  }
  if (model.head == HeadKind::DeepCca) {
    detail::train_deep_cca(model, d, cfg, rng, res);
    res.model = std::move(model);
    res.rng_state = detail::rng_state(rng);
    return res;
  }

  const auto& ds = *d.dataset;
  std::vector<std::size_t> usable;
  std::vector<std::vector<Candidate>> cands(ds.images.size());
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    cands[i] = image_candidates(d, ds.images[i]);
    if (!cands[i].empty()) usable.push_back(i);
  }
  if (usable.empty() && cfg.steps > 0) throw FitError("no training image has region features");
  const auto likelihoods = phrase_likelihoods(ds);
  const auto vocab = ds.vocabulary(true);
  const auto coannot = coannotation_counts(ds);
  const bool drift = cfg.cca_init;
  const int head_steps = detail::has_head_params(model)
                             ? static_cast<int>(std::lround(cfg.head_only_fraction * cfg.steps))
                             : 0;

  for (int round = 0; round < cfg.cca_refits; ++round) {
    if (round > 0) detail::refit_upper_layers(model, d, cfg);
    ModelGrad vel = zero_grad(model);
    ConfusionTable table;
    for (int step = 0; step < cfg.steps; ++step) {
      if (cfg.npa && step % cfg.npa_period == 0) {
        table = detail::rebuild_confusion(model, d, cfg, usable, coannot, rng);
        res.confusion_warnings += table.warnings;
        ++res.npa_rebuilds;
      }
      const bool joint = step >= head_steps;
      ModelGrad grad = zero_grad(model);
      double value = 0;
      for (int b = 0; b < cfg.images_per_step; ++b) {
        const std::size_t pick = usable[uniform_index(rng, usable.size())];
        const auto& img = ds.images[pick];
        const auto phrases = detail::batch_phrases(img, likelihoods, vocab, table, cfg, rng);
        const TrainBatch batch = make_batch(d, img, cands[pick], phrases, cfg.positive_iou);
        auto loss = batch_loss(model, batch, &grad, joint, cfg.lambda1);
        res.skipped_queries += static_cast<std::size_t>(loss.skipped);
        value += loss.value;
      }
      if (joint && drift)
        for (const Branch* br : {&model.region, &model.phrase})
          for (const auto& l : br->layers) value += drift_penalty(l, cfg.lambda2).value;
      if (!std::isfinite(value)) throw TrainingAborted(static_cast<std::size_t>(step), model);
      res.history.push_back(value);

      const double lr = cfg.learning_rate;
      AlignmentModel next = model;
      auto active = [&](ParamGroup group) {
        if (group != ParamGroup::Head && !joint) return false;
        return !(group == ParamGroup::BranchBias && cfg.freeze_bias);
      };
      double clip = 1.0;
      if (cfg.max_grad_norm > 0) {
        double sq = 0;
        visit_params(next, grad, vel, [&](ParamGroup group, LinearAlignLayer*, double*, double* g, double*, Eigen::Index n) {
          if (active(group))
            for (Eigen::Index i = 0; i < n; ++i) sq += g[i] * g[i];
        });
        if (std::sqrt(sq) > cfg.max_grad_norm) clip = cfg.max_grad_norm / std::sqrt(sq);
      }
      visit_params(next, grad, vel, [&](ParamGroup group, LinearAlignLayer*, double* p, double* g, double* v, Eigen::Index n) {
        if (!active(group)) return;
        const bool decay = cfg.weight_decay > 0 && (group == ParamGroup::Head || (group == ParamGroup::BranchWeight && !drift));
        for (Eigen::Index i = 0; i < n; ++i) {
          const double gi = clip * g[i] + (decay ? cfg.weight_decay * p[i] : 0.0);
          v[i] = cfg.momentum * v[i] + gi;
          p[i] -= lr * v[i];
        }
      });
      if (joint && drift)
        for (Branch* br : {&next.region, &next.phrase})
          for (auto& l : br->layers) {
            const Mat diff = l.w - l.w_init;
            const double nrm = diff.norm();
            const double shrink = nrm > 0 ? std::max(0.0, 1.0 - lr * cfg.lambda2 / nrm) : 1.0;
            if (shrink < 1.0) l.w = l.w_init + shrink * diff;
            if (!cfg.freeze_bias && lr > 0)
              l.b = l.b.unaryExpr([lr](double x) { return x > lr ? x - lr : (x < -lr ? x + lr : 0.0); });
          }
      ModelGrad dummy = zero_grad(next), dummy_v = zero_grad(next);
      bool finite = true;
      visit_params(next, dummy, dummy_v, [&](ParamGroup, LinearAlignLayer*, double* p, double*, double*, Eigen::Index n) {
        for (Eigen::Index i = 0; i < n; ++i) {
          p[i] = static_cast<double>(static_cast<float>(p[i]));
          if (!std::isfinite(p[i])) finite = false;
        }
      });
      if (!finite) throw TrainingAborted(static_cast<std::size_t>(step), model);
      model = std::move(next);
    }
  }
  res.model = std::move(model);
  res.rng_state = detail::rng_state(rng);
  return res;
}

inline Checkpoint to_checkpoint(const AlignmentModel& m, const TrainConfig& cfg, const std::string& rng_state) {
  nlohmann::json extra = {{"train_config", to_json(cfg)}, {"rng_state", rng_state}};
  return to_checkpoint(m, extra);
}

}  // namespace opd
