#include <sstream>

#include <gtest/gtest.h>

#include "opd/augment.hpp"
#include "support.hpp"

namespace opd {
namespace {

using Set = std::set<std::string>;

TEST(Expand, ReplacementsInReferItMode) {
  EXPECT_EQ(expand_phrase("blue jacket", testing::jacket_lexicon(), DatasetMode::ReferItLike),
            (Set{"blue apparel", "blue coat", "blue cover"}));
}

TEST(Expand, SubphrasesInFlickrMode) {
  const auto got = expand_phrase("a large red house", Lexicon{}, DatasetMode::FlickrLike);
  for (const char* s : {"a large house", "a red house", "house", "red", "large red house"})
    EXPECT_TRUE(got.count(s)) << s;
  EXPECT_FALSE(got.count("a"));
  EXPECT_FALSE(got.count("a large red house"));
}

TEST(Expand, EmptyLexiconInReferItModeGivesNothing) {
  EXPECT_TRUE(expand_phrase("a large red house", Lexicon{}, DatasetMode::ReferItLike).empty());
  EXPECT_TRUE(expand_phrase("", testing::jacket_lexicon(), DatasetMode::FlickrLike).empty());
}

TEST(Expand, ProtectedWordsAreNeverReplaced) {
  Lexicon lex;
  lex.add("left", "port");
  lex.add("man", "person");
  EXPECT_EQ(expand_phrase("left man", lex, DatasetMode::ReferItLike), (Set{"left person"}));
  EXPECT_TRUE(expand_phrase("left man", lex, DatasetMode::GenomeLike).count("port man"));
  lex.protected_words.insert("man");
  EXPECT_TRUE(expand_phrase("left man", lex, DatasetMode::ReferItLike).empty());
}

TEST(Expand, LongPhrasesUseReplacementsOnly) {
  Lexicon lex;
  lex.add("dog", "animal");
  const auto got = expand_phrase("one two three four five six dog", lex, DatasetMode::FlickrLike);
  EXPECT_EQ(got, (Set{"one two three four five six animal"}));
}

TEST(Expand, SingleSubstitutionProperty) {
  Lexicon lex;
  lex.add("dog", "animal");
  lex.add("dog", "pet");
  lex.add("brown", "dark");
  const auto src = tokenize_phrase("brown dog on grass");
  for (const auto& c : expand_phrase(src, lex, DatasetMode::ReferItLike)) {
    const auto t = tokenize_phrase(c);
    ASSERT_EQ(t.size(), src.size());
    int diff = 0;
    for (std::size_t i = 0; i < t.size(); ++i) diff += t[i] != src[i];
    EXPECT_EQ(diff, 1) << c;
  }
}

TEST(Lexicon, ReadsTsvAndProtectedLines) {
  std::istringstream in("# comment\nJacket\tcoat, cover\n#nosub left,right\n\nman\tperson\n");
  const auto lex = read_lexicon(in);
  ASSERT_NE(lex.find("jacket"), nullptr);
  EXPECT_EQ(*lex.find("jacket"), (Set{"coat", "cover"}));
  EXPECT_EQ(lex.protected_words, (Set{"left", "right"}));
  EXPECT_TRUE(lex.related(tokenize_phrase("a man"), tokenize_phrase("a person")));
  EXPECT_TRUE(lex.related(tokenize_phrase("a person"), tokenize_phrase("a man")));
  EXPECT_FALSE(lex.related(tokenize_phrase("a man"), tokenize_phrase("the person")));

  std::istringstream bad("jacket coat\n");
  EXPECT_THROW(read_lexicon(bad), IngestError);
}

GroundTruthDataset toy_referit() {
  GroundTruthDataset ds;
  ds.split = Split::Train;
  ds.mode = DatasetMode::ReferItLike;
  ds.images.push_back({"i1", {{{0, 0, 5, 5}, {{"blue jacket", false}}}}});
  ds.images.push_back({"i2", {{{0, 0, 5, 5}, {{"blue coat", false}}}, {{1, 1, 4, 4}, {{"jacket", false}}}}});
  ds.images.push_back({"i3", {{{0, 0, 5, 5}, {{"cover", false}, {"blue cover", false}}}}});
  return ds;
}

TEST(Ppa, MatchesBruteForceOnToyDataset) {
  const auto ds = toy_referit();
  const auto lex = testing::jacket_lexicon();
  const auto vocab = split_vocabulary(ds);
  const auto out = apply_ppa(ds, lex, vocab);

  // Oracle: every in-vocabulary single replacement of every gt label that the
  // region does not already carry.
  for (std::size_t i = 0; i < ds.images.size(); ++i)
    for (std::size_t r = 0; r < ds.images[i].regions.size(); ++r) {
      Set have, expect;
      for (const auto& p : ds.images[i].regions[r].phrases) have.insert(p.text);
      for (const auto& p : ds.images[i].regions[r].phrases) {
        auto t = tokenize_phrase(p.text);
        for (std::size_t k = 0; k < t.size(); ++k)
          if (const auto* reps = lex.find(t[k]))
            for (const auto& rep : *reps) {
              auto c = t;
              c[k] = rep;
              const auto s = join_tokens(c);
              if (vocab.count(s) && !have.count(s)) expect.insert(s);
            }
      }
      Set got;
      const auto& reg = out.images[i].regions[r];
      for (std::size_t k = 0; k < reg.phrases.size(); ++k) {
        if (k < ds.images[i].regions[r].phrases.size()) {
          EXPECT_EQ(reg.phrases[k].text, ds.images[i].regions[r].phrases[k].text);
          EXPECT_FALSE(reg.phrases[k].augmented);
        } else {
          EXPECT_TRUE(reg.phrases[k].augmented);
          got.insert(reg.phrases[k].text);
        }
      }
      EXPECT_EQ(got, expect) << ds.images[i].image_id;
    }
  EXPECT_EQ(out.images[0].regions[0].phrases.size(), 3u);  // blue coat and blue cover, not blue apparel
}

TEST(Ppa, NoOpWithoutMatches) {
  const auto ds = toy_referit();
  std::ostringstream a, b;
  write_dataset(ds, a);
  write_dataset(apply_ppa(ds, Lexicon{}, split_vocabulary(ds)), b);
  EXPECT_EQ(a.str(), b.str());
}

TEST(Ppa, Idempotent) {
  auto ds = toy_referit();
  ds.mode = DatasetMode::FlickrLike;
  const auto vocab = split_vocabulary(ds);
  const auto once = apply_ppa(ds, testing::jacket_lexicon(), vocab);
  const auto twice = apply_ppa(once, testing::jacket_lexicon(), vocab);
  std::ostringstream a, b;
  write_dataset(once, a);
  write_dataset(twice, b);
  EXPECT_EQ(a.str(), b.str());
}

}  // namespace
}  // namespace opd
