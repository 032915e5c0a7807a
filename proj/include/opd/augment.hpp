#pragma once

#include <istream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "opd/datamodel.hpp"

namespace opd {

// Word-level replacement table (synonyms and hypernyms) plus words that must
// never be substituted.
struct Lexicon {
  std::map<std::string, std::set<std::string>> replacements;
  std::set<std::string> protected_words;

  const std::set<std::string>* find(const std::string& word) const {
    auto it = replacements.find(word);
    return it == replacements.end() ? nullptr : &it->second;
  }

  void add(const std::string& word, const std::string& replacement) {
    auto w = normalize_phrase(word), r = normalize_phrase(replacement);
    if (w.empty() || r.empty() || w == r) return;
    replacements[w].insert(r);
  }

  // True if one phrase becomes the other through a single word replacement
  // (in either direction), e.g. "a man" / "a person" when man → person.
  bool related(const std::vector<std::string>& a, const std::vector<std::string>& b) const {
    auto one_way = [this](const std::vector<std::string>& src, const std::vector<std::string>& dst) {
      for (std::size_t i = 0; i < src.size(); ++i) {
        const auto* reps = find(src[i]);
        if (!reps) continue;
        for (const auto& r : *reps) {
          auto rt = tokenize_phrase(r);
          if (dst.size() != src.size() - 1 + rt.size()) continue;
          if (!std::equal(src.begin(), src.begin() + static_cast<long>(i), dst.begin())) continue;
          if (!std::equal(rt.begin(), rt.end(), dst.begin() + static_cast<long>(i))) continue;
          if (std::equal(src.begin() + static_cast<long>(i) + 1, src.end(),
                         dst.begin() + static_cast<long>(i + rt.size())))
            return true;
        }
      }
      return false;
    };
    return one_way(a, b) || one_way(b, a);
  }
};

// TSV: "word<TAB>r1,r2,...". A line starting with "#nosub" lists protected
// words (comma or whitespace separated); other '#' lines are comments.
inline Lexicon read_lexicon(std::istream& in) {
  Lexicon lex;
  std::string line;
  std::size_t lineno = 0;
  auto split_words = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
      if (c == ',' || c == '\t') {
        out.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    out.push_back(cur);
    return out;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (line.rfind("#nosub", 0) == 0) {
      for (const auto& item : split_words(line.substr(6)))
        for (auto& w : tokenize_phrase(item)) lex.protected_words.insert(w);
      continue;
    }
    if (line[0] == '#') continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw IngestError("lexicon line " + std::to_string(lineno) + ": missing tab");
    auto word = normalize_phrase(line.substr(0, tab));
    if (word.empty()) throw IngestError("lexicon line " + std::to_string(lineno) + ": empty word");
    for (const auto& r : split_words(line.substr(tab + 1))) lex.add(word, r);
  }
  return lex;
}

inline Lexicon read_lexicon(const std::string& path) {
  auto in = io::open_in(path);
  return read_lexicon(in);
}

inline bool is_article(const std::string& w) { return w == "a" || w == "an" || w == "the"; }

inline constexpr std::size_t kMaxSubphraseTokens = 6;

inline std::set<std::string> protected_words_for(const Lexicon& lex, DatasetMode mode) {
  auto out = lex.protected_words;
  if (mode == DatasetMode::ReferItLike) out.insert({"left", "right"});
  return out;
}

// Candidate positive phrases for one phrase: one lexicon substitution per
// candidate, plus (FlickrLike only) every order-preserving sub-phrase that is
// not made purely of articles.
inline std::set<std::string> expand_phrase(const std::vector<std::string>& tokens, const Lexicon& lex,
                                           DatasetMode mode) {
  std::set<std::string> out;
  if (tokens.empty()) return out;
  const auto guarded = protected_words_for(lex, mode);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (guarded.count(tokens[i])) continue;
    const auto* reps = lex.find(tokens[i]);
    if (!reps) continue;
    for (const auto& r : *reps) {
      auto cand = tokens;
      cand[i] = r;
      out.insert(join_tokens(cand));
    }
  }
  if (mode == DatasetMode::FlickrLike && tokens.size() <= kMaxSubphraseTokens) {
    const std::size_t n = tokens.size();
    const std::uint32_t full = (1u << n) - 1;
    for (std::uint32_t mask = 1; mask < full; ++mask) {
      std::vector<std::string> sub;
      bool content = false;
      for (std::size_t i = 0; i < n; ++i)
        if (mask & (1u << i)) {
          sub.push_back(tokens[i]);
          content |= !is_article(tokens[i]);
        }
      if (content) out.insert(join_tokens(sub));
    }
  }
  out.erase(join_tokens(tokens));
  return out;
}

inline std::set<std::string> expand_phrase(const std::string& phrase, const Lexicon& lex, DatasetMode mode) {
  return expand_phrase(tokenize_phrase(phrase), lex, mode);
}

// Adds every in-vocabulary candidate of each ground-truth label to its region,
// flagged as augmented. Only ground-truth labels are expanded, so a second
// application adds nothing.
inline GroundTruthDataset apply_ppa(const GroundTruthDataset& ds, const Lexicon& lex,
                                    const std::set<std::string>& split_vocabulary) {
  GroundTruthDataset out = ds;
  for (auto& img : out.images)
    for (auto& reg : img.regions) {
      std::set<std::string> present;
      for (const auto& p : reg.phrases) present.insert(p.text);
      std::set<std::string> added;
      for (const auto& p : reg.phrases) {
        if (p.augmented) continue;
        for (const auto& cand : expand_phrase(p.text, lex, ds.mode))
          if (split_vocabulary.count(cand) && !present.count(cand)) added.insert(cand);
      }
      for (const auto& a : added) reg.phrases.push_back({a, true});
    }
  return out;
}

inline std::set<std::string> split_vocabulary(const GroundTruthDataset& ds) {
  auto v = ds.vocabulary(false);
  return {v.begin(), v.end()};
}

}  // namespace opd
