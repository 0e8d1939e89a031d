#pragma once

// Synthetic four-class toy stems: tonal bass and vocals, band-limited noise
// for other and drums, each gated on and off in random segments so that
// chunks differ in which classes are audible.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "demix/audio.hpp"

namespace demix::synth {

struct ToyConfig {
  int sample_rate = 8000;
  std::size_t channels = 2;
  double seconds = 60.0;
  double segment_seconds = 0.5;  // gating granularity
  double active_probability = 0.6;
  double level = 0.1;  // rms of an always-on source
};

namespace detail {

/// White noise shaped to [lo, hi] Hz through a frequency-domain mask.
inline std::vector<double> band_noise(std::size_t n, int rate, double lo, double hi, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(n);
  for (auto& v : x) v = g(rng);
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<std::complex<double>> X;
  fft.fwd(X, x);
  for (std::size_t k = 0; k < X.size(); ++k) {
    const double f = static_cast<double>(k) * rate / static_cast<double>(n);
    if (f < lo || f > hi) X[k] = 0.0;
  }
  fft.inv(x, X);
  x.resize(n);
  return x;
}

/// Per-segment on/off envelope with 10 ms linear fades.
inline std::vector<double> gate(std::size_t n, const ToyConfig& cfg, std::mt19937_64& rng) {
  std::bernoulli_distribution on(cfg.active_probability);
  const std::size_t seg = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.segment_seconds * cfg.sample_rate));
  std::vector<double> target(n);
  for (std::size_t s = 0; s < n; s += seg) {
    const double v = on(rng) ? 1.0 : 0.0;
    std::fill(target.begin() + static_cast<std::ptrdiff_t>(s), target.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + seg)), v);
  }
  const double step = 1.0 / std::max(1.0, 0.01 * cfg.sample_rate);
  std::vector<double> env(n);
  double cur = target.empty() ? 0.0 : target[0];
  for (std::size_t i = 0; i < n; ++i) {
    cur = target[i] > cur ? std::min(target[i], cur + step) : std::max(target[i], cur - step);
    env[i] = cur;
  }
  return env;
}

inline void normalise(std::vector<double>& x, double rms) {
  double e = 0;
  for (double v : x) e += v * v;
  const double cur = std::sqrt(e / std::max<std::size_t>(1, x.size()));
  if (cur > 0)
    for (auto& v : x) v *= rms / cur;
}

/// Harmonic tone whose pitch changes every segment, drawn from [f_lo, f_hi].
inline std::vector<double> tone(std::size_t n, const ToyConfig& cfg, double f_lo, double f_hi, int harmonics,
                                double vibrato, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pitch(f_lo, f_hi);
  const std::size_t seg = static_cast<std::size_t>(cfg.segment_seconds * cfg.sample_rate);
  std::vector<double> x(n);
  double phase = 0, f0 = pitch(rng);
  for (std::size_t i = 0; i < n; ++i) {
    if (seg && i % seg == 0) f0 = pitch(rng);
    const double t = static_cast<double>(i) / cfg.sample_rate;
    const double f = f0 * (1.0 + vibrato * std::sin(2 * std::numbers::pi * 5.0 * t));
    phase += 2 * std::numbers::pi * f / cfg.sample_rate;
    double v = 0;
    for (int h = 1; h <= harmonics; ++h) v += std::sin(h * phase) / h;
    x[i] = v;
  }
  return x;
}

/// Decaying noise bursts on a random beat grid.
inline std::vector<double> hits(std::size_t n, const ToyConfig& cfg, double lo, double hi, std::mt19937_64& rng) {
  auto noise = band_noise(n, cfg.sample_rate, lo, hi, rng);
  std::uniform_real_distribution<double> tempo(2.0, 5.0);
  const double period = cfg.sample_rate / tempo(rng);
  const double decay = 0.06 * cfg.sample_rate;
  for (std::size_t i = 0; i < n; ++i) {
    const double since = std::fmod(static_cast<double>(i), period);
    noise[i] *= std::exp(-since / decay);
  }
  return noise;
}

}  // namespace detail

/// One track's stems; the mixture is their sum.
inline StemSet make_track(const ToyConfig& cfg, std::uint64_t seed) {
  const std::size_t n = static_cast<std::size_t>(cfg.seconds * cfg.sample_rate);
  if (n == 0) throw ShapeError("synth", "toy track must have at least one sample");
  std::mt19937_64 rng(seed);
  const double nyq = cfg.sample_rate / 2.0;
  StemSet stems;
  for (Source s : kSources) {
    std::vector<double> x;
    switch (s) {
      case Source::bass: x = detail::tone(n, cfg, 0.010 * nyq, 0.025 * nyq, 2, 0.0, rng); break;
      case Source::vocals: x = detail::tone(n, cfg, 0.070 * nyq, 0.100 * nyq, 3, 0.02, rng); break;
      case Source::other: x = detail::band_noise(n, cfg.sample_rate, 0.35 * nyq, 0.55 * nyq, rng); break;
      case Source::drums: x = detail::hits(n, cfg, 0.65 * nyq, 0.90 * nyq, rng); break;
    }
    detail::normalise(x, cfg.level);
    const auto env = detail::gate(n, cfg, rng);
    std::uniform_real_distribution<double> pan(0.6, 1.0);
    Waveform w(cfg.channels, n, cfg.sample_rate);
    for (std::size_t c = 0; c < cfg.channels; ++c) {
      const double g = pan(rng);
      for (std::size_t i = 0; i < n; ++i) w.at(c, i) = static_cast<float>(g * env[i] * x[i]);
    }
    stems.set(s, std::move(w));
  }
  return stems;
}

inline std::vector<StemSet> make_dataset(const ToyConfig& cfg, std::size_t tracks, std::uint64_t seed) {
  std::vector<StemSet> out;
  for (std::size_t t = 0; t < tracks; ++t) out.push_back(make_track(cfg, seed * 1000003ULL + t));
  return out;
}

}  // namespace demix::synth
