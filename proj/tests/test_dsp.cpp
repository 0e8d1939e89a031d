#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <numbers>
#include <random>

#include "demix/stft.hpp"

using namespace demix;
using namespace demix::dsp;

namespace {

Waveform random_wave(std::size_t channels, std::size_t length, std::uint64_t seed, int rate = 44100) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Waveform w(channels, length, rate);
  for (auto& v : w.samples()) v = u(rng);
  return w;
}

double max_abs(const Waveform& w) {
  double m = 0;
  for (float v : w.samples()) m = std::max(m, std::abs(double(v)));
  return m;
}

double max_err(const Waveform& a, const Waveform& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.samples().size(); ++i)
    m = std::max(m, std::abs(double(a.samples()[i]) - b.samples()[i]));
  return m;
}

double spec_energy(const Spectrogram<float>& s) {
  double e = 0;
  for (const auto& v : s.values) e += std::norm(std::complex<double>(v));
  return e;
}

}  // namespace

TEST(StftConfig, Validation) {
  EXPECT_NO_THROW((StftConfig{8192, 1024}.validate()));
  EXPECT_NO_THROW((StftConfig{12288, 2048}.validate()));
  EXPECT_THROW((StftConfig{8191, 1024}.validate()), ShapeError);
  EXPECT_THROW((StftConfig{8192, 0}.validate()), ShapeError);
  EXPECT_THROW((StftConfig{8192, 8192}.validate()), ShapeError);
  EXPECT_THROW((StftConfig{8192, 3000}.validate()), ShapeError);
}

TEST(Stft, ZeroInputGivesZeroSpectrogram) {
  const auto s = stft(Waveform(2, 5000, 44100), {1024, 256});
  for (const auto& v : s.values) EXPECT_EQ(v, std::complex<float>{});
}

TEST(Stft, BinAndFrameCounts) {
  const auto s = stft(random_wave(1, 10000, 1), {8192, 1024});
  EXPECT_EQ(s.bins, 4097u);
  EXPECT_EQ(s.frames, 1u + (10000u + 1023u) / 1024u);
  EXPECT_EQ(stft(random_wave(1, 4096, 1), {8192, 1024}).frames, 5u);
}

TEST(Stft, EmptyInputRejected) { EXPECT_THROW(stft(Waveform(), {256, 64}), ShapeError); }

// One interior frame against a direct O(N^2) DFT of the same windowed slice.
TEST(Stft, MatchesDirectDftOnOneFrame) {
  const std::size_t N = 256, H = 64;
  const auto x = random_wave(1, 2000, 3);
  const auto s = stft(x, {N, H});
  const std::size_t t = 10;
  for (std::size_t k = 0; k <= N / 2; k += 7) {
    std::complex<double> acc{};
    for (std::size_t n = 0; n < N; ++n) {
      const double w = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * n / N);
      const double v = x.at(0, t * H + n - N / 2);
      acc += w * v * std::exp(std::complex<double>(0, -2 * std::numbers::pi * k * n / N));
    }
    EXPECT_NEAR(std::abs(std::complex<double>(s.at(0, k, t)) - acc), 0.0, 1e-4) << "bin " << k;
  }
}

TEST(Stft, BinCentredSinusoidConcentratesEnergy) {
  const std::size_t N = 1024, H = 256, k0 = 37;
  Waveform x(1, 20000, 44100);
  for (std::size_t i = 0; i < x.length(); ++i)
    x.at(0, i) = static_cast<float>(std::sin(2 * std::numbers::pi * k0 * i / N));
  const auto s = stft(x, {N, H});
  for (std::size_t t = 4; t + 4 < s.frames; ++t) {
    double total = 0, near = 0;
    for (std::size_t k = 0; k < s.bins; ++k) {
      const double e = std::norm(std::complex<double>(s.at(0, k, t)));
      total += e;
      if (k + 1 >= k0 && k <= k0 + 1) near += e;
    }
    EXPECT_GE(near / total, 0.9) << "frame " << t;
  }
}

TEST(Stft, Linear) {
  const StftConfig cfg{512, 128};
  const auto a = random_wave(2, 3000, 4), b = random_wave(2, 3000, 5);
  Waveform c(2, 3000, 44100);
  for (std::size_t i = 0; i < c.samples().size(); ++i) c.samples()[i] = 0.5f * a.samples()[i] - 2.0f * b.samples()[i];
  const auto sa = stft(a, cfg), sb = stft(b, cfg), sc = stft(c, cfg);
  double m = 0, scale = 0;
  for (std::size_t i = 0; i < sc.values.size(); ++i) {
    const auto expect = 0.5 * std::complex<double>(sa.values[i]) - 2.0 * std::complex<double>(sb.values[i]);
    m = std::max(m, std::abs(std::complex<double>(sc.values[i]) - expect));
    scale = std::max(scale, std::abs(expect));
  }
  EXPECT_LT(m / scale, 1e-6);
}

TEST(Istft, ZeroSpectrogramGivesZeroWaveform) {
  const auto s = stft(Waveform(2, 3000, 44100), {512, 128});
  const auto y = istft(s, 3000);
  for (float v : y.samples()) EXPECT_EQ(v, 0.0f);
}

TEST(Istft, RoundTripTableConfigs) {
  for (const StftConfig cfg : {StftConfig{8192, 1024}, StftConfig{8192, 2048}, StftConfig{12288, 2048}}) {
    const auto x = random_wave(2, 3 * 44100, 6);
    const auto t0 = std::chrono::steady_clock::now();
    const auto y = istft(stft(x, cfg), x.length());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EXPECT_LT(max_err(x, y), 1e-6 * max_abs(x)) << cfg.n_fft << "/" << cfg.hop_length;
    EXPECT_LT(secs, 1.0);
  }
}

// Round trip over random valid configurations and lengths, including
// signals shorter than half a window.
TEST(Istft, RoundTripProperty) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> log_n(3, 10), ratio_pick(0, 3), len(1, 5000);
  const std::size_t ratios[] = {2, 4, 6, 8};
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t ratio = ratios[ratio_pick(rng)];
    const std::size_t hop = std::size_t{1} << log_n(rng);
    const StftConfig cfg{hop * ratio, hop};
    const auto x = random_wave(2, static_cast<std::size_t>(len(rng)), 100 + trial);
    const auto y = istft(stft(x, cfg), x.length());
    EXPECT_LT(max_err(x, y), 1e-6 * max_abs(x)) << cfg.n_fft << "/" << cfg.hop_length << " len " << x.length();
  }
}

TEST(Istft, TargetLengthPadsWithZeros) {
  const auto x = random_wave(1, 1000, 8);
  const auto y = istft(stft(x, {256, 64}), 1500);
  EXPECT_EQ(y.length(), 1500u);
  for (std::size_t i = 1000 + 256; i < 1500; ++i) EXPECT_EQ(y.at(0, i), 0.0f);
}

TEST(FreqTruncate, DropsNyquistOnly) {
  const auto s = stft(random_wave(2, 9000, 9), {8192, 1024});
  const auto t = freq_truncate(s, 4096);
  EXPECT_EQ(t.bins, 4096u);
  EXPECT_EQ(t.truncated_from, 4097u);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t f = 0; f < t.frames; ++f) EXPECT_EQ(t.at(c, 4095, f), s.at(c, 4095, f));
}

TEST(FreqTruncate, VocalsConfigKeepsLowest4096) {
  const auto s = stft(random_wave(1, 13000, 10), {12288, 2048});
  EXPECT_EQ(s.bins, 6145u);
  const auto t = freq_truncate(s, 4096);
  EXPECT_EQ(t.bins, 4096u);
  EXPECT_EQ(t.at(0, 17, 2), s.at(0, 17, 2));
}

TEST(FreqTruncate, FullWidthIsIdentityAndRestorable) {
  const auto s = stft(random_wave(1, 3000, 11), {512, 128});
  const auto t = freq_truncate(s, s.bins);
  EXPECT_EQ(t.values, s.values);
  EXPECT_EQ(freq_restore(t).values, s.values);
}

TEST(FreqTruncate, Errors) {
  const auto s = stft(random_wave(1, 3000, 11), {512, 128});
  EXPECT_THROW(freq_truncate(s, 0), ShapeError);
  EXPECT_THROW(freq_truncate(s, s.bins + 1), ShapeError);
  EXPECT_THROW(freq_restore(s), ShapeError);
}

TEST(FreqRestore, ZeroFillsAndPreservesEnergy) {
  const auto s = stft(random_wave(2, 9000, 12), {8192, 1024});
  const auto t = freq_truncate(s, 4096);
  const auto r = freq_restore(t);
  EXPECT_EQ(r.bins, 4097u);
  EXPECT_FALSE(r.truncated_from.has_value());
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t f = 0; f < r.frames; ++f) {
      EXPECT_EQ(r.at(c, 4096, f), std::complex<float>{});
      EXPECT_EQ(r.at(c, 100, f), s.at(c, 100, f));
    }
  EXPECT_NEAR(spec_energy(r), spec_energy(t), 1e-9 * spec_energy(t));
}

TEST(Pack, RoundTrip) {
  const auto s = stft(random_wave(2, 3000, 13), {256, 64});
  const auto p = pack<float>(s);
  EXPECT_EQ(p.shape(), (Shape{4, s.bins, s.frames}));
  EXPECT_EQ(p[1 * s.bins * s.frames + 5], s.values[5].imag());
  EXPECT_EQ(unpack(p, s).values, s.values);
}

TEST(Subband, FourBandsOf4096Bins) {
  Tensor<float> x({4, 4096, 3});
  EXPECT_EQ(subband_split(x, 4).shape(), (Shape{16, 1024, 3}));
  EXPECT_EQ(subband_merge(subband_split(x, 4), 4).shape(), x.shape());
}

TEST(Subband, SingleBandIsIdentity) {
  Tensor<float> x({3, 8, 5});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = float(i);
  EXPECT_EQ(subband_split(x, 1), x);
  EXPECT_EQ(subband_merge(x, 1), x);
}

// Exhaustive index oracle: out[i*k + j][f][t] == in[i][j*F/k + f][t].
TEST(Subband, IndexLawAndInverse) {
  const std::size_t C = 3, F = 12, T = 5;
  for (std::size_t k : {1u, 2u, 3u, 4u, 6u}) {
    Tensor<double> x({C, F, T});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = double(i) * 1.5 - 7;
    const auto y = subband_split(x, k);
    const std::size_t Fk = F / k;
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t f = 0; f < Fk; ++f)
          for (std::size_t t = 0; t < T; ++t)
            ASSERT_EQ(y[((i * k + j) * Fk + f) * T + t], x[(i * F + j * Fk + f) * T + t]);
    EXPECT_EQ(subband_merge(y, k), x);
  }
}

TEST(Subband, BatchedLeadingAxis) {
  Tensor<float> x({2, 4, 8, 3});
  EXPECT_EQ(subband_split(x, 2).shape(), (Shape{2, 8, 4, 3}));
}

TEST(Subband, IndivisibleErrors) {
  EXPECT_THROW(subband_split(Tensor<float>({2, 10, 3}), 4), ShapeError);
  EXPECT_THROW(subband_merge(Tensor<float>({6, 10, 3}), 4), ShapeError);
}
