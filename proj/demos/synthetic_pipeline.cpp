// Fits CCA on the synthetic benchmark, fine-tunes a SimNet head on top of it
// and prints detection mAP for both models.
//
//   synthetic_pipeline [steps]

#include <cstdlib>
#include <iostream>

#include "opd/scoring.hpp"
#include "opd/synth.hpp"
#include "opd/trainer.hpp"

int main(int argc, char** argv) {
  using namespace opd;
  const int steps = argc > 1 ? std::atoi(argv[1]) : 3000;

  SynthConfig sc;
  sc.seed = 1;
  const auto bench = make_synthetic_benchmark(sc);
  const auto counts = count_train_occurrences(bench.train);
  const TrainingData train{&bench.train, &bench.region_features, &bench.phrase_features, &bench.train_proposals, nullptr};
  const ScoringInputs test{&bench.test, &bench.region_features, &bench.phrase_features, &bench.test_proposals};
  const auto phrases = bench.phrase_features.ids();

  auto evaluate = [&](const AlignmentModel& m, const std::string& label) {
    const auto scored = score_images(m, test, phrases, {5, nullptr, 1});
    std::cout << to_text(detection_map(scored.predictions, bench.test, counts), label);
  };

  TrainConfig cfg;
  cfg.head = HeadKind::Cca;
  cfg.steps = 0;
  cfg.widths = {24};
  const auto cca = initialize_model(train, cfg);
  evaluate(cca, "CCA");

  cfg.head = HeadKind::SimNet;
  cfg.steps = steps;
  cfg.widths = {24, 16};
  cfg.simnet_hidden = 32;
  cfg.images_per_step = 4;
  cfg.max_grad_norm = 10;
  const auto res = opd::train(initialize_model(train, cfg), train, cfg);
  evaluate(res.model, "CCA + SimNet");
  return 0;
}
