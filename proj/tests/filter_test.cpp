#include <sstream>

#include <gtest/gtest.h>

#include "opd/filter.hpp"
#include "support.hpp"

namespace opd {
namespace {

Sentence sentence(const std::string& id, const std::string& text, std::vector<std::string> phrases) {
  return {id, tokenize_phrase(text), std::move(phrases)};
}

SentenceDb toy_db() {
  SentenceDb db;
  db.sentences = {sentence("s0", "a dog on grass", {"a dog", "grass"}),
                  sentence("s1", "a man with a hat", {"a man", "a hat"}),
                  sentence("s2", "a cat", {"a cat"}),
                  sentence("s3", "a man and a dog", {"a man", "a dog"}),
                  sentence("s4", "red car", {"red car"})};
  db.image_ids = {"x", "y"};
  db.similarity = Mat(2, 5);
  db.similarity << 0.9, 0.1, 0.5, 0.5, -1, 0, 0, 0, 0, 0;
  return db;
}

TEST(Filter, ZeroBudgetIsEmpty) { EXPECT_TRUE(filter_phrases("x", toy_db(), 0).empty()); }

TEST(Filter, SaturatingSentence) {
  auto db = toy_db();
  db.sentences[0].phrases = {"a dog", "grass", "a man", "a hat", "a cat", "red car"};
  EXPECT_EQ(filter_phrases("x", db, 1).size(), 6u);
}

TEST(Filter, MatchesBruteForceSortAndUnion) {
  const auto db = toy_db();
  for (const std::string img : {"x", "y"}) {
    const Eigen::Index row = img == "x" ? 0 : 1;
    std::vector<std::pair<double, std::string>> order;
    for (std::size_t s = 0; s < 5; ++s) order.push_back({-db.similarity(row, static_cast<Eigen::Index>(s)), db.sentences[s].id});
    std::sort(order.begin(), order.end());
    for (std::size_t n = 0; n <= 6; ++n) {
      std::set<std::string> expect;
      for (std::size_t i = 0; i < std::min<std::size_t>(n, 5); ++i)
        for (const auto& s : db.sentences)
          if (s.id == order[i].second) expect.insert(s.phrases.begin(), s.phrases.end());
      EXPECT_EQ(filter_phrases(img, db, n), expect) << img << " " << n;
    }
  }
  EXPECT_THROW(filter_phrases("z", db, 3), Error);
}

TEST(Filter, SentencesParseAndValidate) {
  std::istringstream in(R"({"sentence_id": "s", "tokens": ["A", "Dog."], "phrases": ["a dog"]})" "\n");
  const auto s = read_sentences(in);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].tokens, (std::vector<std::string>{"a", "dog"}));
  std::istringstream bad(R"({"sentence_id": "s", "tokens": ["a", "dog"], "phrases": ["a cat"]})" "\n");
  EXPECT_THROW(read_sentences(bad), IngestError);
  EXPECT_EQ(extract_phrases(tokenize_phrase("a big red car"), {"red car", "big car", "a"}),
            (std::vector<std::string>{"red car", "a"}));
}

TEST(Filter, SimilarityStoreBecomesDb) {
  FeatureStore sim(2);
  sim.add("img", Vec((Vec(2) << 0.25, 0.75).finished()));
  const auto db = make_sentence_db({sentence("a", "a dog", {"a dog"}), sentence("b", "a cat", {"a cat"})}, sim, {"b", "a"});
  EXPECT_EQ(db.sentences[0].id, "b");
  EXPECT_EQ(filter_phrases("img", db, 1), std::set<std::string>{"a dog"});
  EXPECT_THROW(make_sentence_db({}, sim, {"a"}), IngestError);
}

TEST(FilteredDetection, FullVocabularyIsNoOp) {
  Rng rng = derived_rng(6, 0);
  for (int t = 0; t < 30; ++t) {
    auto inst = testing::random_detection_instance(rng);
    FilterSets all;
    for (const auto& img : inst.gt.images)
      for (int p = 0; p < 5; ++p) all[img.image_id].insert("phrase" + std::to_string(p));
    const auto a = detection_map(inst.preds, inst.gt, inst.counts), b = filtered_detection(inst.preds, all, inst.gt, inst.counts);
    EXPECT_EQ(a.per_phrase, b.per_phrase);
    EXPECT_EQ(a.bucket_mean, b.bucket_mean);
  }
}

TEST(FilteredDetection, ExcludingEverythingGivesZero) {
  Rng rng = derived_rng(7, 0);
  auto inst = testing::random_detection_instance(rng);
  FilterSets none;
  for (const auto& img : inst.gt.images) none[img.image_id] = {};
  EXPECT_EQ(filtered_detection(inst.preds, none, inst.gt, inst.counts).overall, 0.0);
}

TEST(FilteredDetection, RemovingFalsePositivesHelps) {
  GroundTruthDataset gt;
  gt.split = Split::Test;
  gt.images.push_back({"a", {{{0, 0, 10, 10}, {{"cat", false}}}}});
  gt.images.push_back({"b", {{{0, 0, 10, 10}, {{"dog", false}}}}});
  std::vector<ScoredPrediction> preds{{"cat", "a", 0, {0, 0, 10, 10}, 0.5}, {"cat", "b", 0, {0, 0, 10, 10}, 0.9},
                                      {"dog", "b", 0, {0, 0, 10, 10}, 0.8}};
  const FilterSets f{{"a", {"cat"}}, {"b", {"dog"}}};
  const double before = detection_map(preds, gt, {}).overall, after = filtered_detection(preds, f, gt, {}).overall;
  EXPECT_EQ(before, 0.75);
  EXPECT_EQ(after, 1.0);
  const auto missing = filtered_detection(preds, {{"a", {"cat"}}}, gt, {});
  EXPECT_EQ(missing.warnings, 1u);
}

}  // namespace
}  // namespace opd
