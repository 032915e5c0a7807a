#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "opd/checkpoint.hpp"
#include "opd/datamodel.hpp"
#include "opd/scoring.hpp"
#include "opd/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace opd;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("opd_cli_" + std::to_string(::getpid()) + "_" +
                                       ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  // Exit status of `opd <args>`; stdout goes to out.txt, stderr to err.txt.
  int run(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + " " OPD_BINARY " " + args + " > " + path("out.txt") + " 2> " + path("err.txt");
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  }

  std::string out() const { return io::read_file(path("out.txt")); }
  std::string err() const { return io::read_file(path("err.txt")); }
  json out_json() const { return json::parse(out()); }

  void write(const std::string& name, const std::string& text) const { std::ofstream(path(name)) << text; }

  fs::path dir;
};

GroundTruthDataset two_image_gt() {
  GroundTruthDataset gt;
  gt.split = Split::Test;
  gt.images.push_back({"a", {{{0, 0, 10, 10}, {{"red car", false}}}}});
  gt.images.push_back({"b", {{{20, 20, 40, 40}, {{"red car", false}}}, {{0, 0, 5, 5}, {{"dog", false}}}}});
  return gt;
}

}  // namespace

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("train --help"), 0);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("eval-det --no-such-flag 1"), 2);
  EXPECT_EQ(run("eval-det --scores x"), 2);
  EXPECT_NE(err().find("\"exit_code\":2"), std::string::npos);
  EXPECT_EQ(run("eval-det --gt " + path("missing.jsonl") + " --scores " + path("missing.bin")), 2);
  EXPECT_NE(err().find("input file not found"), std::string::npos);

  write_dataset(two_image_gt(), path("gt.jsonl"));
  write("garbage.bin", "not a score file");
  EXPECT_EQ(run("eval-det --gt " + path("gt.jsonl") + " --scores " + path("garbage.bin")), 1);
  EXPECT_NE(err().find("\"error\":\"format\""), std::string::npos);

  write("bad.json", R"({"iou": 0.5, "no_such_key": 1})");
  EXPECT_EQ(run("eval-det --config " + path("bad.json") + " --gt " + path("gt.jsonl") + " --scores " + path("garbage.bin")), 2);
  write("typed.json", R"({"iou": "high"})");
  EXPECT_EQ(run("eval-det --config " + path("typed.json") + " --gt " + path("gt.jsonl") + " --scores " + path("garbage.bin")), 2);
  EXPECT_EQ(run("eval-det --iou abc --gt " + path("gt.jsonl") + " --scores " + path("garbage.bin")), 2);
}

TEST_F(Cli, EvalDetReport) {
  const auto gt = two_image_gt();
  write_dataset(gt, path("gt.jsonl"));
  std::vector<ScoredPrediction> preds;
  preds.push_back({"red car", "a", 0, {0, 0, 10, 10}, 0.9});
  preds.push_back({"red car", "b", 0, {20, 20, 40, 40}, 0.8});
  preds.push_back({"red car", "b", 1, {60, 60, 70, 70}, 0.95});
  preds.push_back({"dog", "b", 0, {0, 0, 5, 5}, 0.1});
  write_scores(preds, path("s.bin"));
  ASSERT_EQ(run("eval-det --gt " + path("gt.jsonl") + " --scores " + path("s.bin") + " --report " + path("r.json")), 0)
      << err();
  EXPECT_NE(out().find("Detection mAP"), std::string::npos);
  const json r = json::parse(io::read_file(path("r.json")));
  // red car: false positive first, then two hits: AP = 0.5·0.5 + 0.5·(2/3).
  EXPECT_NEAR(r["per_phrase"]["red car"].get<double>(), 0.5 * 0.5 + 0.5 * 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r["per_phrase"]["dog"].get<double>(), 1.0, 1e-12);
  EXPECT_EQ(r["run"]["command"], "eval-det");
  EXPECT_EQ(r["run"]["params"]["iou"], 0.5);

  ASSERT_EQ(run("eval-det --top-k 1 --gt " + path("gt.jsonl") + " --scores " + path("s.bin") + " --report " + path("r1.json")), 0);
  const json r1 = json::parse(io::read_file(path("r1.json")));
  // Only the false positive survives in b: one hit at rank 2 of 2, recall 0.5.
  EXPECT_NEAR(r1["per_phrase"]["red car"].get<double>(), 0.5 * 0.5, 1e-12);
}

TEST_F(Cli, ConfigPrecedenceAndSeed) {
  GroundTruthDataset ds;
  ds.split = Split::Train;
  ds.images.push_back({"a", {{{0, 0, 10, 10}, {{"cat", false}, {"pet", true}, {"animal", true}}}}});
  ds.images.push_back({"b", {{{0, 0, 10, 10}, {{"pet", false}, {"animal", false}}}}});
  write_dataset(ds, path("d.jsonl"));
  write("c.json", R"({"budget": 1, "draws": 10})");
  const std::string base = "sample-debug --dataset " + path("d.jsonl") + " --config " + path("c.json");

  ASSERT_EQ(run(base, "OPD_SEED=7"), 0) << err();
  json j = out_json();
  EXPECT_EQ(j["run"]["params"]["budget"], 1);
  EXPECT_EQ(j["run"]["params"]["gt_subsample"], 5);
  EXPECT_EQ(j["run"]["seed"], 7);
  EXPECT_EQ(j["run"]["seed_source"], "OPD_SEED");
  EXPECT_EQ(j["batches"][0]["augmented"].size(), 1u);

  ASSERT_EQ(run(base + " --budget 2 --seed 3", "OPD_SEED=7"), 0) << err();
  j = out_json();
  EXPECT_EQ(j["run"]["params"]["budget"], 2);
  EXPECT_EQ(j["run"]["seed"], 3);
  EXPECT_EQ(j["batches"][0]["augmented"].size(), 2u);

  ASSERT_EQ(run(base + " --seed 3"), 0);
  const std::string first = out();
  ASSERT_EQ(run(base + " --seed 3"), 0);
  EXPECT_EQ(out(), first);
  EXPECT_EQ(run(base, "OPD_SEED=abc"), 2);
}

TEST_F(Cli, CcaFitTrainScoreRoundTrip) {
  SynthConfig c;
  c.clusters = 3;
  c.phrases_per_cluster = 3;
  c.train_regions = 120;
  c.test_regions = 30;
  c.region_dim = 10;
  c.phrase_dim = 8;
  c.latent_dim = 4;
  c.nuisance_rank = 2;
  c.seed = 5;
  ASSERT_EQ(run("synth --out-dir " + path("s") + " --clusters 3 --phrases-per-cluster 3 --train-regions 120 "
                "--test-regions 30 --region-dim 10 --phrase-dim 8 --latent-dim 4 --nuisance-rank 2 --seed 5"),
            0)
      << err();
  const auto b = make_synthetic_benchmark(c);
  std::ostringstream expect;
  write_features(b.region_features, expect);
  EXPECT_EQ(io::read_file(path("s/regions.feats")), expect.str());

  const std::string data = " --regions " + path("s/regions.feats") + " --phrases " + path("s/phrases.feats");
  ASSERT_EQ(run("fit-cca --x " + path("s/regions.feats") + " --y " + path("s/phrases.feats") + " --k 4 --dataset " +
                path("s/train.jsonl") + " --out " + path("cca.ckpt")),
            0)
      << err();
  ASSERT_EQ(run("train --dataset " + path("s/train.jsonl") + data + " --proposals " + path("s/train_proposals.jsonl") +
                " --head cca --steps 0 --init " + path("cca.ckpt") + " --out " + path("m.ckpt")),
            0)
      << err();
  const auto ck = load_checkpoint(path("m.ckpt"));
  EXPECT_EQ(ck.config["run"]["command"], "train");
  EXPECT_EQ(ck.config["run"]["params"]["steps"], 0);

  const std::string test = " --dataset " + path("s/test.jsonl") + data + " --proposals " + path("s/test_proposals.jsonl");
  ASSERT_EQ(run("score --model " + path("cca.ckpt") + test + " --out " + path("a.bin")), 0) << err();
  ASSERT_EQ(run("score --model " + path("m.ckpt") + test + " --threads 3 --out " + path("b.bin")), 0) << err();
  EXPECT_EQ(io::read_file(path("a.bin")), io::read_file(path("b.bin")));
  EXPECT_FALSE(read_scores(path("a.bin")).empty());
  EXPECT_EQ(json::parse(io::read_file(path("b.bin.run.json")))["params"]["threads"], 3);

  EXPECT_EQ(run("train --dataset " + path("s/train.jsonl") + data + " --head cca --steps 3 --out " + path("x.ckpt")), 2);
  EXPECT_NE(err().find("\"error\":\"config\""), std::string::npos);
}

TEST_F(Cli, AugmentBlueJacket) {
  write("lex.tsv", "jacket\tcoat\njacket\tcover\njacket\tapparel\n");
  GroundTruthDataset ds;
  ds.split = Split::Train;
  ds.mode = DatasetMode::ReferItLike;
  ds.images.push_back({"a", {{{0, 0, 10, 10}, {{"blue jacket", false}}}}});
  ds.images.push_back({"b", {{{0, 0, 10, 10}, {{"blue coat", false}, {"blue cover", false}, {"blue apparel", false}}}}});
  write_dataset(ds, path("d.jsonl"));
  ASSERT_EQ(run("augment --mode referit --dataset " + path("d.jsonl") + " --lexicon " + path("lex.tsv") + " --out " +
                path("aug.jsonl")),
            0)
      << err();
  const auto aug = read_dataset(path("aug.jsonl"), Split::Train, DatasetMode::ReferItLike);
  std::set<std::string> labels;
  for (const auto& l : aug.images[0].regions[0].phrases) {
    labels.insert(l.text);
    EXPECT_EQ(l.augmented, l.text != "blue jacket");
  }
  EXPECT_EQ(labels, (std::set<std::string>{"blue jacket", "blue coat", "blue cover", "blue apparel"}));
  EXPECT_TRUE(fs::exists(path("aug.jsonl.run.json")));

  ASSERT_EQ(run("augment --mode referit --phrase 'Blue  Jacket' --lexicon " + path("lex.tsv")), 0);
  EXPECT_EQ(out_json()["candidates"], json({"blue apparel", "blue coat", "blue cover"}));
}

TEST_F(Cli, FilterFromSentences) {
  write("sent.jsonl",
        R"({"sentence_id": "s0", "tokens": ["a", "red", "car", "parked"], "phrases": ["red car"]})"
        "\n"
        R"({"sentence_id": "s1", "tokens": ["a", "dog", "runs"], "phrases": ["dog"]})"
        "\n");
  write("cols.txt", "s0\ns1\n");
  FeatureStore sim(2);
  sim.add("img1", Vec(Eigen::Vector2d(0.9, 0.1)));
  sim.add("img2", Vec(Eigen::Vector2d(0.2, 0.7)));
  write_features(sim, path("sim.feats"));
  ASSERT_EQ(run("filter --sentences " + path("sent.jsonl") + " --similarity " + path("sim.feats") + " --columns " +
                path("cols.txt") + " --top-n 1"),
            0)
      << err();
  const json j = out_json();
  EXPECT_EQ(j["filters"]["img1"], json({"red car"}));
  EXPECT_EQ(j["filters"]["img2"], json({"dog"}));
  EXPECT_EQ(j["run"]["params"]["top_n"], 1);
}

TEST_F(Cli, IngestSummary) {
  write_dataset(two_image_gt(), path("gt.jsonl"));
  ASSERT_EQ(run("ingest --split test --dataset " + path("gt.jsonl")), 0) << err();
  const json j = out_json();
  EXPECT_EQ(j["dataset"]["images"], 2);
  EXPECT_EQ(j["dataset"]["regions"], 3);
  EXPECT_EQ(j["dataset"]["phrases"], 2);
  write("broken.jsonl", "{\"image_id\": \"a\", \"regions\": [{\"box\": [5, 5, 1, 1], \"phrases\": [\"x\"]}]}\n");
  EXPECT_EQ(run("ingest --dataset " + path("broken.jsonl")), 1);
  EXPECT_NE(err().find("\"error\":\"ingest\""), std::string::npos);
}
