#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "opd/augment.hpp"
#include "opd/common.hpp"
#include "opd/datamodel.hpp"

// Negative phrase augmentation: hard negatives mined from a periodically
// rebuilt phrase confusion table.
namespace opd {

inline constexpr std::size_t kConfusionCapacity = 500;
inline constexpr int kConfusionRebuildPeriod = 10000;

struct ConfusionEntry {
  std::string phrase;
  double score = 0.0;
};

struct ConfusionTable {
  std::map<std::string, std::vector<ConfusionEntry>> negatives;
  std::size_t capacity = kConfusionCapacity;
  std::size_t warnings = 0;

  const std::vector<ConfusionEntry>& of(const std::string& phrase) const {
    static const std::vector<ConfusionEntry> kEmpty;
    auto it = negatives.find(phrase);
    return it == negatives.end() ? kEmpty : it->second;
  }
};

// Model scores for a phrase sample on a region sample.
struct ConfusionSample {
  std::vector<std::string> phrases;
  Mat scores;                               // phrases × regions
  std::vector<std::vector<int>> positives;  // per phrase, region columns it labels
};

// Unordered phrase pair → number of boxes annotated with both.
using CoannotationCounts = std::map<std::pair<std::string, std::string>, std::int64_t>;

inline std::pair<std::string, std::string> unordered_key(const std::string& a, const std::string& b) {
  return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
}

inline CoannotationCounts coannotation_counts(const GroundTruthDataset& ds) {
  CoannotationCounts c;
  for (const auto& img : ds.images)
    for (const auto& reg : img.regions)
      for (std::size_t i = 0; i < reg.phrases.size(); ++i)
        for (std::size_t j = i + 1; j < reg.phrases.size(); ++j)
          if (reg.phrases[i].text != reg.phrases[j].text) ++c[unordered_key(reg.phrases[i].text, reg.phrases[j].text)];
  return c;
}

struct ConfusionOptions {
  std::size_t capacity = kConfusionCapacity;
  std::int64_t min_coannotation = 1;  // pairs co-annotated this often are never negatives
};

// For each phrase p, every other phrase q ranked by its mean score on p's
// positive regions. Lexicon parent/child pairs and co-annotated pairs are
// dropped; ties by phrase text.
inline ConfusionTable build_confusion_table(const ConfusionSample& sample, const Lexicon& lexicon,
                                            const CoannotationCounts& coannotated, const ConfusionOptions& opt = {}) {
  ConfusionTable table;
  table.capacity = opt.capacity;
  if (sample.phrases.empty() || sample.scores.cols() == 0) {
    ++table.warnings;
    return table;
  }
  std::vector<std::vector<std::string>> tokens;
  for (const auto& p : sample.phrases) tokens.push_back(tokenize_phrase(p));
  for (std::size_t p = 0; p < sample.phrases.size(); ++p) {
    auto& list = table.negatives[sample.phrases[p]];
    const auto& pos = sample.positives[p];
    if (pos.empty()) continue;
    for (std::size_t q = 0; q < sample.phrases.size(); ++q) {
      if (q == p || sample.phrases[q] == sample.phrases[p]) continue;
      if (lexicon.related(tokens[p], tokens[q])) continue;
      auto it = coannotated.find(unordered_key(sample.phrases[p], sample.phrases[q]));
      if (it != coannotated.end() && it->second >= opt.min_coannotation) continue;
      double s = 0;
      for (int r : pos) s += sample.scores(static_cast<Eigen::Index>(q), r);
      list.push_back({sample.phrases[q], s / static_cast<double>(pos.size())});
    }
    std::sort(list.begin(), list.end(), [](const ConfusionEntry& a, const ConfusionEntry& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.phrase < b.phrase;
    });
    if (list.size() > opt.capacity) list.resize(opt.capacity);
  }
  return table;
}

}  // namespace opd
