#pragma once

// Toy-scale robustness experiment: train the tiny model on corrupted toy
// stems with and without loss masking and score both on clean held-out
// tracks.

#include <chrono>
#include <vector>

#include "demix/eval.hpp"
#include "demix/inference.hpp"
#include "demix/noise.hpp"
#include "demix/synth.hpp"
#include "demix/training.hpp"

namespace test {

struct RobustnessSetup {
  std::size_t train_tracks = 8;
  double train_seconds = 60;
  std::size_t valid_tracks = 4;
  double valid_seconds = 20;
  std::size_t steps = 2000;
  std::size_t batch_size = 6;
  std::size_t chunk_frames = 64;
  double learning_rate = 3e-3;
  // sources always audible, so chunk losses rank by label noise rather than
  // by whether the target happens to be silent
  double active_probability = 1.0;
  std::uint64_t data_seed = 11;
  std::uint64_t model_seed = 5;
};

struct RunOutcome {
  double valid_sdr = 0;
  double final_loss = 0;
  double seconds = 0;
};

inline double validation_sdr(const demix::model::Model<float>& m, const std::vector<demix::StemSet>& valid) {
  using namespace demix;
  std::vector<eval::TrackScore> scores;
  for (const auto& t : valid) {
    const auto est = inference::separate(m, t.sum(), {64, 2});
    scores.push_back(eval::evaluate_track(t, est));
  }
  return eval::aggregate(std::move(scores)).global_mean;
}

inline RunOutcome train_and_score(const RobustnessSetup& s, const std::vector<demix::StemSet>& pool,
                                  const std::vector<demix::StemSet>& valid, demix::training::LossMaskSpec mask) {
  using namespace demix;
  const auto t0 = std::chrono::steady_clock::now();
  auto m = model::Model<float>::build(model::presets::tiny(), s.model_seed);
  training::TrainConfig cfg;
  cfg.learning_rate = s.learning_rate;
  cfg.batch_size = s.batch_size;
  cfg.chunk_frames = s.chunk_frames;
  cfg.mask = mask;
  cfg.steps_per_epoch = s.steps;
  auto state = training::initial_state(m, s.model_seed + 1);
  const auto sum = training::train(m, pool, cfg, state, s.steps);
  RunOutcome r;
  r.final_loss = sum.last_loss;
  r.valid_sdr = validation_sdr(m, valid);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

struct ToyData {
  std::vector<demix::StemSet> clean, valid;
};

inline ToyData toy_data(const RobustnessSetup& s) {
  demix::synth::ToyConfig tc;
  tc.seconds = s.train_seconds;
  tc.active_probability = s.active_probability;
  ToyData d;
  d.clean = demix::synth::make_dataset(tc, s.train_tracks, s.data_seed);
  tc.seconds = s.valid_seconds;
  d.valid = demix::synth::make_dataset(tc, s.valid_tracks, s.data_seed + 1000);
  return d;
}

}  // namespace test
