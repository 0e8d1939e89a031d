#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "demix/gradcheck.hpp"
#include "demix/synth.hpp"
#include "demix/training.hpp"

using namespace demix;
using namespace demix::training;
using model::Model;

namespace {

StemSet random_stems(std::size_t length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-0.5f, 0.5f);
  StemSet s;
  for (Source c : kSources) {
    Waveform w(2, length, 8000);
    for (auto& v : w.samples()) v = u(rng);
    s.set(c, std::move(w));
  }
  return s;
}

model::ModelConfig tiny() { return model::presets::tiny(); }

TrainConfig tiny_train() {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.batch_size = 2;
  c.chunk_frames = 16;
  c.mask = {MaskDims::batch, 0.5};
  return c;
}

Tensor<float> values(std::initializer_list<float> v) { return Tensor<float>({v.size()}, std::vector<float>(v)); }

}  // namespace

// ---------------------------------------------------------------------------
// sample_batch

TEST(SampleBatch, SingleTrackIndependentOffsets) {
  const std::vector<StemSet> pool{random_stems(5000, 1)};
  std::mt19937_64 rng(2);
  const auto b = sample_batch(pool, 4, 16, tiny().stft, rng);
  EXPECT_EQ(b.stems.shape(), (Shape{4, 4, 2, 512}));
  bool differ = false;
  for (const auto& picks : b.picks)
    for (const auto& p : picks) {
      EXPECT_EQ(p.track, 0u);
      differ |= p.offset != picks[0].offset;
    }
  EXPECT_TRUE(differ);
}

TEST(SampleBatch, ChunksAreSlicesAndMixtureIsTheirSum) {
  const std::vector<StemSet> pool{random_stems(3000, 3), random_stems(4000, 4)};
  std::mt19937_64 rng(5);
  const auto b = sample_batch(pool, 3, 16, tiny().stft, rng);
  const std::size_t L = 512;
  for (std::size_t i = 0; i < 3; ++i) {
    for (Source s : kSources) {
      const auto p = b.picks[i][index_of(s)];
      const Waveform& w = pool[p.track].at(s);
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t k = 0; k < L; k += 17)
          ASSERT_EQ(b.stems[((i * 4 + index_of(s)) * 2 + c) * L + k], w.at(c, p.offset + k));
    }
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t k = 0; k < L; ++k) {
        float sum = 0;
        for (std::size_t s = 0; s < 4; ++s) sum += b.stems[((i * 4 + s) * 2 + c) * L + k];
        ASSERT_EQ(b.mixture[(i * 2 + c) * L + k], sum);
      }
  }
}

TEST(SampleBatch, FixedSeedIsBitIdentical) {
  const std::vector<StemSet> pool{random_stems(3000, 6), random_stems(3000, 7)};
  std::mt19937_64 a(8), b(8);
  EXPECT_EQ(sample_batch(pool, 3, 16, tiny().stft, a).mixture, sample_batch(pool, 3, 16, tiny().stft, b).mixture);
}

// Counts of (class, track) over 10,000 draws against Binomial(n, 1/4).
TEST(SampleBatch, TrackChoiceIsUniform) {
  std::vector<StemSet> pool;
  for (int t = 0; t < 4; ++t) pool.push_back(random_stems(600, 10 + t));
  std::mt19937_64 rng(11);
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> counts;
  const std::size_t draws = 10000;
  for (std::size_t i = 0; i < draws / 100; ++i) {
    const auto b = sample_batch(pool, 100, 16, tiny().stft, rng);
    for (const auto& picks : b.picks)
      for (std::size_t s = 0; s < 4; ++s) ++counts[{s, picks[s].track}];
  }
  const double mean = draws / 4.0, sigma = std::sqrt(draws * 0.25 * 0.75);
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t t = 0; t < 4; ++t)
      EXPECT_LT(std::abs(double(counts[{s, t}]) - mean), 5 * sigma) << s << "," << t;
}

TEST(SampleBatch, Errors) {
  std::mt19937_64 rng(0);
  EXPECT_THROW(sample_batch({}, 1, 16, tiny().stft, rng), ShapeError);
  EXPECT_THROW(sample_batch({random_stems(100, 1)}, 1, 16, tiny().stft, rng), ShapeError);
  // short tracks are skipped when a long one exists
  const auto b = sample_batch({random_stems(100, 1), random_stems(600, 2)}, 5, 16, tiny().stft, rng);
  for (const auto& picks : b.picks)
    for (const auto& p : picks) EXPECT_EQ(p.track, 1u);
}

// ---------------------------------------------------------------------------
// per_element_losses

TEST(Losses, ZeroWhenEqual) {
  Tensor<double> t({2, 4, 2, 64}, 0.25);
  for (MaskDims d : {MaskDims::none, MaskDims::batch, MaskDims::batch_time}) {
    const auto l = per_element_losses(ad::constant(t), t, d, 16);
    for (double v : l.value().values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Losses, ConstantOffsetOnOneClass) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  Tensor<double> t({2, 4, 2, 64});
  for (auto& v : t.values()) v = n(rng);
  Tensor<double> e = t;
  const double c = 0.3;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 128; ++i) e[(b * 4 + 2) * 128 + i] += c;
  const auto l = per_element_losses(ad::constant(e), t, MaskDims::batch, 16).value();
  EXPECT_EQ(l.shape(), (Shape{2, 4}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t s = 0; s < 4; ++s) EXPECT_NEAR(l[b * 4 + s], s == 2 ? c * c : 0.0, 1e-12);
}

TEST(Losses, SegmentMeanEqualsBatchLoss) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  Tensor<double> t({3, 2, 2, 96}), e({3, 2, 2, 96});
  for (auto& v : t.values()) v = n(rng);
  for (auto& v : e.values()) v = n(rng);
  const auto whole = per_element_losses(ad::constant(e), t, MaskDims::batch, 32).value();
  const auto segs = per_element_losses(ad::constant(e), t, MaskDims::batch_time, 32).value();
  EXPECT_EQ(segs.shape(), (Shape{3, 2, 3}));
  for (std::size_t i = 0; i < 6; ++i)
    EXPECT_NEAR((segs[i * 3] + segs[i * 3 + 1] + segs[i * 3 + 2]) / 3, whole[i], 1e-12);
}

TEST(Losses, ShapeErrors) {
  EXPECT_THROW(per_element_losses(ad::constant(Tensor<double>({1, 1, 1, 10})), Tensor<double>({1, 1, 1, 11}),
                                  MaskDims::batch, 5),
               ShapeError);
  EXPECT_THROW(per_element_losses(ad::constant(Tensor<double>({1, 1, 1, 10})), Tensor<double>({1, 1, 1, 10}),
                                  MaskDims::batch_time, 3),
               ShapeError);
}

TEST(Losses, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  Tensor<double> t({2, 2, 1, 12}), e({2, 2, 1, 12}), w({2, 2, 3});
  for (auto& v : t.values()) v = n(rng);
  for (auto& v : e.values()) v = n(rng);
  for (auto& v : w.values()) v = n(rng);
  std::vector<ad::Var<double>> p{ad::parameter(e)};
  const auto r = ad::finite_diff_check(
      [&] { return ad::weighted_sum(per_element_losses(p[0], t, MaskDims::batch_time, 4), w); }, p,
      {.probes = 30, .step = 1e-5});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

// ---------------------------------------------------------------------------
// select_keep / masked_loss

TEST(SelectKeep, BatchOfSixDiscardsFour) {
  const std::vector<double> l{5, 1, 4, 2, 6, 3};
  const auto k = select_keep(std::span<const double>(l), 0.4);
  EXPECT_EQ(k, (std::vector<std::uint8_t>{0, 1, 0, 1, 0, 0}));
  for (double q : {1.0 / 3.0, 0.34, 0.4, 0.45, 0.4999})
    EXPECT_EQ(6 - keep_count(6, q), 4u) << q;
}

TEST(SelectKeep, TemporalAnchor) {
  EXPECT_EQ(keep_count(200, 0.93), 186u);
  EXPECT_EQ(200 - keep_count(200, 0.93), 14u);
}

TEST(SelectKeep, SingleElementAlwaysKept) {
  for (double q : {1e-6, 0.1, 0.5, 1.0}) {
    const std::vector<double> l{42};
    EXPECT_EQ(select_keep(std::span<const double>(l), q), (std::vector<std::uint8_t>{1}));
  }
}

TEST(SelectKeep, RejectsBadQuantile) {
  EXPECT_THROW(keep_count(5, 0.0), ConfigError);
  EXPECT_THROW(keep_count(5, 1.5), ConfigError);
  EXPECT_THROW(select_keep(values({1, 2}), LossMaskSpec{MaskDims::batch, -1}), ConfigError);
}

// keep-count law; the oracle floors the exact product in long double.
TEST(SelectKeep, KeepCountLawProperty) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> N(1, 500);
  std::uniform_real_distribution<double> Q(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = N(rng);
    const double q = trial == 0 ? 1.0 : std::max(1e-9, Q(rng));
    std::vector<double> l(n);
    for (auto& v : l) v = Q(rng);
    const auto k = select_keep(std::span<const double>(l), q);
    const std::size_t kept = std::count(k.begin(), k.end(), 1);
    const auto expected = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor((long double)q * n)));
    ASSERT_EQ(kept, expected) << n << " " << q;
    // kept elements are exactly the smallest ones
    double max_kept = -1, min_dropped = 2;
    for (std::size_t i = 0; i < n; ++i) (k[i] ? max_kept : min_dropped) = k[i] ? std::max(max_kept, l[i]) : std::min(min_dropped, l[i]);
    ASSERT_LE(max_kept, min_dropped);
  }
}

TEST(SelectKeep, TiesGoToLowerIndex) {
  const std::vector<double> l{3, 1, 1, 1, 2};
  EXPECT_EQ(select_keep(std::span<const double>(l), 0.4), (std::vector<std::uint8_t>{0, 1, 1, 0, 0}));
}

TEST(SelectKeep, ShiftInvarianceAndBatchEquivariance) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<float> l({6, 4, 5});
    for (auto& v : l.values()) v = u(rng);
    for (const LossMaskSpec spec : {LossMaskSpec{MaskDims::batch, 0.4}, LossMaskSpec{MaskDims::batch_time, 0.93}}) {
      Tensor<float> lb = spec.dims == MaskDims::batch ? Tensor<float>({6, 4}) : l;
      if (spec.dims == MaskDims::batch)
        for (std::size_t i = 0; i < 24; ++i) lb[i] = l[i * 5];
      const auto k = select_keep(lb, spec);
      Tensor<float> shifted = lb;
      for (auto& v : shifted.values()) v += 3.5f;
      EXPECT_EQ(select_keep(shifted, spec), k);

      if (spec.dims == MaskDims::batch) {
        std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
        Tensor<float> p(lb.shape());
        for (std::size_t b = 0; b < 6; ++b)
          for (std::size_t s = 0; s < 4; ++s) p[b * 4 + s] = lb[perm[b] * 4 + s];
        const auto kp = select_keep(p, spec);
        for (std::size_t b = 0; b < 6; ++b)
          for (std::size_t s = 0; s < 4; ++s) EXPECT_EQ(kp[b * 4 + s], k[perm[b] * 4 + s]);
      }
    }
  }
}

TEST(SelectKeep, PoolsPerClass) {
  // class 0 has large losses everywhere; it must still keep its own share
  Tensor<float> l({6, 2});
  for (std::size_t b = 0; b < 6; ++b) {
    l[b * 2] = 100.0f + float(b);
    l[b * 2 + 1] = float(b);
  }
  const auto k = select_keep(l, {MaskDims::batch, 0.4});
  EXPECT_EQ(k[0], 1);
  EXPECT_EQ(k[2], 1);
  EXPECT_EQ(k[1], 1);
  EXPECT_EQ(k[3], 1);
  EXPECT_EQ(std::count(k.values().begin(), k.values().end(), 1), 4);
}

TEST(MaskedLoss, AllKeptIsPlainMean) {
  Tensor<double> l({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const auto keep = select_keep(l, {MaskDims::none, 0.1});
  EXPECT_NEAR(masked_loss(ad::constant(l), keep).value().item(), 3.5, 1e-15);
}

TEST(MaskedLoss, SixItemsKeepTwoSmallest) {
  Tensor<double> l({6, 1}, std::vector<double>{5, 1, 4, 2, 6, 3});
  const auto keep = select_keep(l, {MaskDims::batch, 0.4});
  EXPECT_DOUBLE_EQ(masked_loss(ad::constant(l), keep).value().item(), 1.5);
}

TEST(MaskedLoss, DiscardedEstimateGetsZeroGradient) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n;
  Tensor<double> t({6, 2, 1, 32}), e({6, 2, 1, 32});
  for (auto& v : t.values()) v = n(rng);
  for (auto& v : e.values()) v = n(rng) * 0.1;
  for (std::size_t i = 0; i < 32; ++i) e[(4 * 2 + 1) * 32 + i] += 5.0;  // item 4, class 1: worst loss
  auto est = ad::parameter(e);
  const auto losses = per_element_losses(est, t, MaskDims::batch, 32);
  const auto keep = select_keep(losses.value(), {MaskDims::batch, 0.4});
  ASSERT_EQ(keep[4 * 2 + 1], 0);
  const auto g = ad::grad(masked_loss(losses, keep), std::vector{est})[0];
  for (std::size_t b = 0; b < 6; ++b)
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t i = 0; i < 32; ++i) {
        const double gv = g[(b * 2 + s) * 32 + i];
        if (!keep[b * 2 + s]) ASSERT_EQ(gv, 0.0);
      }
  // and the loss is flat in that element
  auto bumped = e;
  bumped[(4 * 2 + 1) * 32 + 7] += 1e-3;
  const auto l2 = per_element_losses(ad::constant(bumped), t, MaskDims::batch, 32);
  EXPECT_EQ(masked_loss(l2, keep).value().item(), masked_loss(losses, keep).value().item());
}

// ---------------------------------------------------------------------------
// train_step

TEST(TrainStep, ZeroLearningRateLeavesWeightsUnchanged) {
  auto m = Model<float>::build(tiny(), 1);
  const auto before = m.weights();
  auto cfg = tiny_train();
  cfg.learning_rate = 0;
  auto st = initial_state(m, 2);
  const std::vector<StemSet> pool{random_stems(2000, 3)};
  const auto b = sample_batch(pool, 2, 16, tiny().stft, st.rng);
  const auto r = train_step(m, b, cfg, st);
  EXPECT_EQ(m.weights(), before);
  EXPECT_EQ(st.step, 1u);
  EXPECT_GT(r.raw_loss, 0);
}

TEST(TrainStep, NoneEqualsBatchWithFullQuantile) {
  const std::vector<StemSet> pool{random_stems(2000, 4), random_stems(2000, 5)};
  auto run = [&](LossMaskSpec spec) {
    auto m = Model<float>::build(tiny(), 1);
    auto cfg = tiny_train();
    cfg.mask = spec;
    auto st = initial_state(m, 6);
    std::vector<double> losses;
    for (int i = 0; i < 2; ++i) {
      const auto b = sample_batch(pool, 2, 16, tiny().stft, st.rng);
      losses.push_back(train_step(m, b, cfg, st).masked_loss);
    }
    return std::pair{losses, m.weights()};
  };
  const auto a = run({MaskDims::none, 0.5});
  const auto b = run({MaskDims::batch, 1.0});
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(TrainStep, DeterministicTrajectory) {
  const std::vector<StemSet> pool{random_stems(2000, 7)};
  auto run = [&] {
    auto m = Model<float>::build(tiny(), 3);
    auto st = initial_state(m, 4);
    train(m, pool, tiny_train(), st, 3);
    return m.weights();
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainStep, LossDecreasesOnNoiselessToy) {
  synth::ToyConfig toy;
  toy.seconds = 4;
  const std::vector<StemSet> pool{synth::make_track(toy, 1)};
  auto m = Model<float>::build(tiny(), 5);
  auto st = initial_state(m, 6);
  auto cfg = tiny_train();
  cfg.mask = {MaskDims::none, 1.0};
  std::ostringstream log;
  train(m, pool, cfg, st, 50, {.log = &log});

  std::istringstream in(log.str());
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step\traw_loss\tmasked_loss\tkept_fraction");
  std::vector<double> loss;
  std::size_t step;
  double raw, masked, kept;
  while (in >> step >> raw >> masked >> kept) loss.push_back(masked);
  ASSERT_EQ(loss.size(), 50u);
  const double first = std::accumulate(loss.begin(), loss.begin() + 10, 0.0) / 10;
  const double last = std::accumulate(loss.end() - 10, loss.end(), 0.0) / 10;
  EXPECT_LT(last, first);
}

TEST(TrainStep, NonFiniteLossIsReported) {
  auto m = Model<float>::build(tiny(), 1);
  m.param("head.weight").mutable_value()[0] = std::numeric_limits<float>::infinity();
  auto st = initial_state(m, 2);
  const std::vector<StemSet> pool{random_stems(2000, 3)};
  const auto b = sample_batch(pool, 2, 16, tiny().stft, st.rng);
  try {
    train_step(m, b, tiny_train(), st);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("training step 1"), std::string::npos) << e.what();
  }
}

// Masked waveform loss through forward and istft, 32-bit analytic against a
// 64-bit central difference, on a 16-frame chunk.
TEST(TrainStep, EndToEndGradientMatchesFiniteDifferences) {
  const auto cfg = tiny();
  const std::vector<StemSet> pool{random_stems(3000, 8), random_stems(3000, 9)};
  std::mt19937_64 rng(10);
  // 15 hops -> 16 STFT frames, no frame padding needed
  auto batch = sample_batch(pool, 3, 15, cfg.stft, rng);
  const auto targets = batch.targets(cfg.sources);
  const LossMaskSpec spec{MaskDims::batch, 0.4};

  auto m = Model<float>::build(cfg, 11);
  ASSERT_EQ(pipeline::encode<float>(batch.mixture, pipeline::FrontEnd::of(cfg)).input.dim(3), 16u);
  const auto r = ad::finite_diff_check(
      [&] { return batch_loss(m, batch.mixture, targets, spec).objective; }, m.params(),
      [&](const std::vector<Tensor<double>>& vals) {
        model::NamedTensors<double> w;
        for (std::size_t i = 0; i < vals.size(); ++i) w.emplace_back(m.layout()[i].name, vals[i]);
        return batch_loss(Model<double>::from_weights(cfg, w), batch.mixture, targets, spec).objective.value().item();
      },
      {.probes = 24, .seed = 13});
  EXPECT_LT(r.max_rel_error, 1e-3);
}

// ---------------------------------------------------------------------------
// early_stop

TEST(EarlyStop, RisingHistoryNeverStops) {
  std::vector<double> h;
  for (int e = 0; e < 40; ++e) {
    h.push_back(0.2 * e);
    EXPECT_FALSE(early_stop(h, 10, 0.1)) << e;
  }
}

TEST(EarlyStop, ElevenIdenticalValuesStop) {
  std::vector<double> h(10, 5.0);
  EXPECT_FALSE(early_stop(h, 10, 0.1));
  h.push_back(5.0);
  EXPECT_TRUE(early_stop(h, 10, 0.1));
}

TEST(EarlyStop, PlateauAfterEpochSevenStopsAtSeventeen) {
  std::vector<double> h;
  std::size_t stopped = 0;
  for (std::size_t epoch = 1; epoch <= 30 && !stopped; ++epoch) {
    h.push_back(0.5 * double(std::min<std::size_t>(epoch, 7)));
    if (early_stop(h, 10, 0.1)) stopped = epoch;
  }
  EXPECT_EQ(stopped, 17u);
}
