#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "opd/datamodel.hpp"
#include "opd/eval.hpp"

namespace opd {

struct Sentence {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<std::string> phrases;  // normalized
};

// Retrieval database: training sentences with their phrases, and an
// image × sentence similarity matrix whose columns follow `sentences`.
struct SentenceDb {
  std::vector<Sentence> sentences;
  std::vector<std::string> image_ids;
  Mat similarity;

  std::map<std::string, Eigen::Index> image_rows() const {
    std::map<std::string, Eigen::Index> m;
    for (std::size_t i = 0; i < image_ids.size(); ++i) m[image_ids[i]] = static_cast<Eigen::Index>(i);
    return m;
  }
};

inline bool contains_subsequence(const std::vector<std::string>& tokens, const std::vector<std::string>& phrase) {
  if (phrase.empty() || phrase.size() > tokens.size()) return false;
  return std::search(tokens.begin(), tokens.end(), phrase.begin(), phrase.end()) != tokens.end();
}

// Vocabulary phrases occurring verbatim in the token sequence.
inline std::vector<std::string> extract_phrases(const std::vector<std::string>& tokens,
                                                const std::vector<std::string>& vocabulary) {
  std::vector<std::string> out;
  for (const auto& p : vocabulary)
    if (contains_subsequence(tokens, tokenize_phrase(p))) out.push_back(p);
  return out;
}

inline Sentence parse_sentence_line(const nlohmann::json& j) {
  Sentence s;
  s.id = j.at("sentence_id").get<std::string>();
  for (const auto& t : j.at("tokens"))
    for (auto& w : tokenize_phrase(t.get<std::string>())) s.tokens.push_back(std::move(w));
  for (const auto& p : j.at("phrases")) {
    auto text = normalize_phrase(p.get<std::string>());
    if (!contains_subsequence(s.tokens, tokenize_phrase(text)))
      throw FormatError("sentence \"" + s.id + "\": phrase \"" + text + "\" not found in its tokens");
    s.phrases.push_back(std::move(text));
  }
  return s;
}

inline std::vector<Sentence> read_sentences(std::istream& in) {
  std::vector<Sentence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_sentence_line(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw IngestError("sentence line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// Similarity rows come from a feature store keyed by image id; `column_ids`
// names the sentence of each column.
inline SentenceDb make_sentence_db(std::vector<Sentence> sentences, const FeatureStore& similarity,
                                   const std::vector<std::string>& column_ids) {
  if (column_ids.size() != similarity.dimension())
    throw IngestError("similarity manifest lists " + std::to_string(column_ids.size()) + " sentences but rows have " +
                      std::to_string(similarity.dimension()) + " columns");
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < sentences.size(); ++i) by_id[sentences[i].id] = i;
  SentenceDb db;
  for (const auto& cid : column_ids) {
    auto it = by_id.find(cid);
    if (it == by_id.end()) throw IngestError("similarity manifest names unknown sentence \"" + cid + "\"");
    db.sentences.push_back(sentences[it->second]);
  }
  db.image_ids = similarity.ids();
  db.similarity.resize(static_cast<Eigen::Index>(db.image_ids.size()), similarity.dimension());
  for (std::size_t r = 0; r < db.image_ids.size(); ++r) {
    auto row = similarity.row(r);
    for (std::uint32_t c = 0; c < similarity.dimension(); ++c) db.similarity(static_cast<Eigen::Index>(r), c) = row[c];
  }
  return db;
}

// Union of the phrases of the top_n most similar sentences; ties by sentence id.
inline std::set<std::string> filter_phrases(const std::string& image_id, const SentenceDb& db, std::size_t top_n = 100) {
  auto rows = db.image_rows();
  auto it = rows.find(image_id);
  if (it == rows.end()) throw Error("filter_phrases: no similarity row for image \"" + image_id + "\"");
  const Eigen::Index row = it->second;
  std::vector<std::size_t> order(db.sentences.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = db.similarity(row, static_cast<Eigen::Index>(a));
    const double sb = db.similarity(row, static_cast<Eigen::Index>(b));
    if (sa != sb) return sa > sb;
    return db.sentences[a].id < db.sentences[b].id;
  });
  std::set<std::string> out;
  for (std::size_t i = 0; i < std::min(top_n, order.size()); ++i)
    out.insert(db.sentences[order[i]].phrases.begin(), db.sentences[order[i]].phrases.end());
  return out;
}

using FilterSets = std::map<std::string, std::set<std::string>>;

// Detection mAP where a candidate survives only if its phrase is in its
// image's filter set. Ground truth is untouched, so filtered-away instances
// remain misses.
inline EvalReport filtered_detection(const std::vector<ScoredPrediction>& predictions, const FilterSets& filters,
                                     const GroundTruthDataset& gt,
                                     const std::map<std::string, std::int64_t>& train_counts,
                                     const EvalOptions& opt = {}) {
  std::vector<ScoredPrediction> kept;
  std::size_t unfiltered_images = 0;
  std::set<std::string> seen_missing;
  for (const auto& p : predictions) {
    auto it = filters.find(p.image_id);
    if (it == filters.end()) {
      if (seen_missing.insert(p.image_id).second) ++unfiltered_images;
      continue;
    }
    if (it->second.count(p.phrase)) kept.push_back(p);
  }
  auto rep = detection_map(kept, gt, train_counts, opt);
  rep.metric = "filtered_detection_map";
  rep.warnings += unfiltered_images;
  return rep;
}

}  // namespace opd
