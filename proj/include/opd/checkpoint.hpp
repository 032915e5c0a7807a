#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "opd/cca.hpp"
#include "opd/io.hpp"
#include "opd/model.hpp"

// Checkpoint layout (little-endian):
//   "OPDCKPT1" | u32 tensor count |
//   per tensor: u16 name length, name bytes, u32 rows, u32 cols, rows·cols f32 (row-major) |
//   u64 config length | config JSON bytes
namespace opd {

inline constexpr std::string_view kCheckpointMagic = "OPDCKPT1";

struct NamedTensor {
  std::string name;
  Mat value;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json config = nlohmann::json::object();

  void put(std::string name, const Mat& m) { tensors.push_back({std::move(name), m}); }
  void put(std::string name, const Vec& v) { tensors.push_back({std::move(name), Mat(v)}); }
  void put_scalar(std::string name, double x) { tensors.push_back({std::move(name), Mat::Constant(1, 1, x)}); }

  const Mat& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.value;
    throw FormatError("checkpoint: missing tensor \"" + name + "\"");
  }
  Vec get_vec(const std::string& name) const {
    const Mat& m = get(name);
    if (m.cols() != 1) throw FormatError("checkpoint: tensor \"" + name + "\" is not a column vector");
    return m.col(0);
  }
  double get_scalar(const std::string& name) const { return get(name)(0, 0); }
};

inline void write_checkpoint(const Checkpoint& ck, std::ostream& out) {
  io::put_bytes(out, kCheckpointMagic);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    io::put_short_string(out, t.name);
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rows()));
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.cols()));
    for (Eigen::Index r = 0; r < t.value.rows(); ++r)
      for (Eigen::Index c = 0; c < t.value.cols(); ++c) io::put_le<float>(out, static_cast<float>(t.value(r, c)));
  }
  const std::string blob = ck.config.dump();
  io::put_le<std::uint64_t>(out, blob.size());
  io::put_bytes(out, blob);
}

inline Checkpoint read_checkpoint(std::istream& in) {
  Checkpoint ck;
  io::expect_magic(in, kCheckpointMagic, "checkpoint");
  const auto n = io::get_le<std::uint32_t>(in, "tensor count");
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedTensor t;
    t.name = io::get_short_string(in, "tensor name");
    const auto rows = io::get_le<std::uint32_t>(in, "tensor rows");
    const auto cols = io::get_le<std::uint32_t>(in, "tensor cols");
    t.value.resize(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) t.value(r, c) = io::get_le<float>(in, t.name);
    ck.tensors.push_back(std::move(t));
  }
  const auto len = io::get_le<std::uint64_t>(in, "config length");
  try {
    ck.config = nlohmann::json::parse(io::get_bytes(in, len, "config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  auto out = io::open_out(path);
  write_checkpoint(ck, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  auto in = io::open_in(path);
  return read_checkpoint(in);
}

// ---------------------------------------------------------------------------
// CCA solutions

inline Checkpoint to_checkpoint(const CcaSolution& sol) {
  Checkpoint ck;
  ck.put("cca.wx", sol.wx);
  ck.put("cca.wy", sol.wy);
  ck.put("cca.correlations", sol.correlations);
  ck.put("cca.mu_x", sol.mu_x);
  ck.put("cca.mu_y", sol.mu_y);
  ck.config = {{"kind", "cca_solution"},
               {"scale_exponent", sol.scale_exponent},
               {"eps_x", sol.eps_x},
               {"eps_y", sol.eps_y}};
  return ck;
}

inline bool is_cca_solution(const Checkpoint& ck) { return ck.config.value("kind", "") == "cca_solution"; }

inline CcaSolution cca_from_checkpoint(const Checkpoint& ck) {
  if (!is_cca_solution(ck)) throw FormatError("checkpoint does not hold a CCA solution");
  CcaSolution sol;
  sol.wx = ck.get("cca.wx");
  sol.wy = ck.get("cca.wy");
  sol.correlations = ck.get_vec("cca.correlations");
  sol.mu_x = ck.get_vec("cca.mu_x");
  sol.mu_y = ck.get_vec("cca.mu_y");
  sol.scale_exponent = ck.config.at("scale_exponent").get<double>();
  sol.eps_x = ck.config.value("eps_x", 0.0);
  sol.eps_y = ck.config.value("eps_y", 0.0);
  return sol;
}

// ---------------------------------------------------------------------------
// Models

namespace detail {

inline void put_branch(Checkpoint& ck, const std::string& prefix, const Branch& br) {
  for (std::size_t i = 0; i < br.layers.size(); ++i) {
    const auto& l = br.layers[i];
    const std::string p = prefix + "." + std::to_string(i) + ".";
    ck.put(p + "w", l.w);
    ck.put(p + "b", l.b);
    ck.put(p + "mu", l.mu);
    ck.put(p + "sigma", l.sigma);
    ck.put(p + "w_init", l.w_init);
  }
}

inline Branch get_branch(const Checkpoint& ck, const std::string& prefix, std::size_t layers, bool relu_between) {
  Branch br;
  br.relu_between = relu_between;
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string p = prefix + "." + std::to_string(i) + ".";
    LinearAlignLayer l;
    l.w = ck.get(p + "w");
    l.b = ck.get_vec(p + "b");
    l.mu = ck.get_vec(p + "mu");
    l.sigma = ck.get_vec(p + "sigma");
    l.w_init = ck.get(p + "w_init");
    br.layers.push_back(std::move(l));
  }
  return br;
}

}  // namespace detail

inline Checkpoint to_checkpoint(const AlignmentModel& m, const nlohmann::json& extra = nlohmann::json::object()) {
  Checkpoint ck;
  detail::put_branch(ck, "region", m.region);
  detail::put_branch(ck, "phrase", m.phrase);
  if (m.head == HeadKind::SimNet) {
    ck.put("simnet.w1", m.simnet.w1);
    ck.put("simnet.b1", m.simnet.b1);
    ck.put("simnet.w2", m.simnet.w2);
    ck.put("simnet.b2", m.simnet.b2);
    ck.put("simnet.a", m.simnet.a);
    ck.put_scalar("simnet.b3", m.simnet.b3);
  }
  if (m.head == HeadKind::Qa) {
    ck.put("qa.wc", m.qa.wc);
    ck.put("qa.bias_gen", m.qa.bias_gen);
    ck.put_scalar("qa.b0", m.qa.b0);
  }
  if (m.bbreg) {
    ck.put("bbreg.w", m.bbreg->w);
    ck.put("bbreg.b", m.bbreg->b);
  }
  ck.config = extra;
  ck.config["kind"] = "model";
  ck.config["head"] = std::string(head_name(m.head));
  ck.config["region_dim"] = m.region_dim;
  ck.config["phrase_dim"] = m.phrase_dim;
  ck.config["region_layers"] = m.region.layers.size();
  ck.config["phrase_layers"] = m.phrase.layers.size();
  ck.config["region_relu"] = m.region.relu_between;
  ck.config["phrase_relu"] = m.phrase.relu_between;
  ck.config["embnet"] = {{"margin", m.embnet.margin}, {"w_rr", m.embnet.w_rr}, {"w_pp", m.embnet.w_pp}};
  ck.config["bbreg"] = m.bbreg.has_value();
  return ck;
}

inline AlignmentModel model_from_checkpoint(const Checkpoint& ck) {
  if (ck.config.value("kind", "") != "model") throw FormatError("checkpoint does not hold a model");
  const auto& c = ck.config;
  AlignmentModel m;
  m.head = parse_head(c.at("head").get<std::string>());
  m.region_dim = c.at("region_dim").get<Eigen::Index>();
  m.phrase_dim = c.at("phrase_dim").get<Eigen::Index>();
  m.region = detail::get_branch(ck, "region", c.at("region_layers").get<std::size_t>(), c.at("region_relu").get<bool>());
  m.phrase = detail::get_branch(ck, "phrase", c.at("phrase_layers").get<std::size_t>(), c.at("phrase_relu").get<bool>());
  m.embnet.margin = c.at("embnet").at("margin").get<double>();
  m.embnet.w_rr = c.at("embnet").at("w_rr").get<double>();
  m.embnet.w_pp = c.at("embnet").at("w_pp").get<double>();
  if (m.head == HeadKind::SimNet) {
    m.simnet.w1 = ck.get("simnet.w1");
    m.simnet.b1 = ck.get_vec("simnet.b1");
    m.simnet.w2 = ck.get("simnet.w2");
    m.simnet.b2 = ck.get_vec("simnet.b2");
    m.simnet.a = ck.get_vec("simnet.a");
    m.simnet.b3 = ck.get_scalar("simnet.b3");
  }
  if (m.head == HeadKind::Qa) {
    m.qa.wc = ck.get("qa.wc");
    m.qa.bias_gen = ck.get_vec("qa.bias_gen");
    m.qa.b0 = ck.get_scalar("qa.b0");
  }
  if (c.at("bbreg").get<bool>()) m.bbreg = BbregHead{ck.get("bbreg.w"), ck.get_vec("bbreg.b")};
  return m;
}

}  // namespace opd
