#pragma once

// STFT analysis and synthesis, frequency truncation, complex packing and
// channel-wise sub-bands. Transforms run in double precision internally.
//
// Conventions: periodic Hann window of length n_fft; the signal is
// reflect-padded by n_fft/2 on both sides and analysed with
// 1 + ceil(length / hop) frames; synthesis divides the overlap-added
// windowed frames by the overlap-added squared window.

#include <unsupported/Eigen/FFT>
#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <vector>

#include "demix/audio.hpp"
#include "demix/autograd.hpp"
#include "demix/tensor.hpp"

namespace demix::dsp {

struct StftConfig {
  std::size_t n_fft = 8192;
  std::size_t hop_length = 1024;

  std::size_t bins() const { return n_fft / 2 + 1; }

  void validate() const {
    if (n_fft < 2 || n_fft % 2)
      throw ShapeError("dsp", "n_fft must be even and >= 2, got " + std::to_string(n_fft));
    if (hop_length == 0 || hop_length > n_fft / 2)
      throw ShapeError("dsp", "hop_length must be in (0, n_fft/2], got " + std::to_string(hop_length));
    if (n_fft % hop_length)
      throw ShapeError("dsp", "n_fft " + std::to_string(n_fft) + " is not a multiple of hop_length " +
                                  std::to_string(hop_length));
  }

  std::size_t frames_for(std::size_t length) const { return 1 + (length + hop_length - 1) / hop_length; }

  friend bool operator==(const StftConfig&, const StftConfig&) = default;
};

/// Complex values laid out [channel][bin][frame].
template <class T = float>
struct Spectrogram {
  std::size_t channels = 0;
  std::size_t bins = 0;
  std::size_t frames = 0;
  std::vector<std::complex<T>> values;
  StftConfig config;
  std::size_t original_length = 0;
  int sample_rate = 0;
  /// Full bin count before freq_truncate; empty when never truncated.
  std::optional<std::size_t> truncated_from;

  std::complex<T>& at(std::size_t c, std::size_t k, std::size_t t) { return values[(c * bins + k) * frames + t]; }
  const std::complex<T>& at(std::size_t c, std::size_t k, std::size_t t) const {
    return values[(c * bins + k) * frames + t];
  }
};

namespace detail {

inline std::vector<double> hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

inline Eigen::FFT<double>& fft() {
  thread_local Eigen::FFT<double> f = [] {
    Eigen::FFT<double> e;
    e.SetFlag(Eigen::FFT<double>::HalfSpectrum);
    return e;
  }();
  return f;
}

inline long reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

/// Overlap-added squared window over the padded axis.
inline std::vector<double> window_norm(const StftConfig& cfg, const std::vector<double>& w, std::size_t frames) {
  std::vector<double> norm((frames - 1) * cfg.hop_length + cfg.n_fft, 0.0);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t n = 0; n < cfg.n_fft; ++n) norm[t * cfg.hop_length + n] += w[n] * w[n];
  return norm;
}

/// Analyses one channel. `emit(k, t, value)` receives every bin.
template <class Emit>
void analyse(std::span<const float> x, const StftConfig& cfg, const std::vector<double>& w, std::size_t frames,
             Emit&& emit) {
  const std::size_t N = cfg.n_fft, H = cfg.hop_length, half = N / 2;
  std::vector<double> buf(N);
  std::vector<std::complex<double>> spec(N / 2 + 1);
  const long len = static_cast<long>(x.size());
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      const long src = static_cast<long>(t * H + n) - static_cast<long>(half);
      buf[n] = w[n] * static_cast<double>(x[static_cast<std::size_t>(reflect_index(src, len))]);
    }
    fft().fwd(spec.data(), buf.data(), static_cast<Eigen::Index>(N));
    for (std::size_t k = 0; k <= N / 2; ++k) emit(k, t, spec[k]);
  }
}

/// Synthesises one channel of `length` samples. `bin(k, t)` supplies bins
/// for k < available_bins; higher bins are zero.
template <class Bin>
std::vector<double> synthesise(const StftConfig& cfg, std::size_t frames, std::size_t available_bins,
                               std::size_t length, const std::vector<double>& w, const std::vector<double>& norm,
                               Bin&& bin) {
  const std::size_t N = cfg.n_fft, H = cfg.hop_length, half = N / 2;
  std::vector<double> acc(norm.size(), 0.0), frame(N);
  std::vector<std::complex<double>> spec(N / 2 + 1);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k <= N / 2; ++k) spec[k] = k < available_bins ? bin(k, t) : std::complex<double>{};
    spec[0].imag(0.0);
    spec[N / 2].imag(0.0);
    fft().inv(frame.data(), spec.data(), static_cast<Eigen::Index>(N));
    for (std::size_t n = 0; n < N; ++n) acc[t * H + n] += w[n] * frame[n];
  }
  std::vector<double> out(length, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    const std::size_t j = i + half;
    if (j >= norm.size()) break;
    if (norm[j] < 1e-8)
      throw ShapeError("dsp", "istft window normalisation vanishes at sample " + std::to_string(i) +
                                  " (non-COLA configuration)");
    out[i] = acc[j] / norm[j];
  }
  return out;
}

}  // namespace detail

inline Spectrogram<float> stft(const Waveform& x, const StftConfig& cfg) {
  cfg.validate();
  if (x.length() == 0) throw ShapeError("dsp", "stft of an empty waveform");
  Spectrogram<float> s;
  s.channels = x.channels();
  s.bins = cfg.bins();
  s.frames = cfg.frames_for(x.length());
  s.config = cfg;
  s.original_length = x.length();
  s.sample_rate = x.sample_rate();
  s.values.resize(s.channels * s.bins * s.frames);
  const auto w = detail::hann(cfg.n_fft);
  for (std::size_t c = 0; c < x.channels(); ++c)
    detail::analyse(x.channel(c), cfg, w, s.frames, [&](std::size_t k, std::size_t t, std::complex<double> v) {
      s.at(c, k, t) = std::complex<float>(v);
    });
  return s;
}

/// Inverse STFT trimmed or zero-padded to `target_length`. Truncated
/// spectrograms are treated as if restored (missing bins are zero).
template <class T>
Waveform istft(const Spectrogram<T>& s, std::size_t target_length) {
  s.config.validate();
  const auto w = detail::hann(s.config.n_fft);
  const auto norm = detail::window_norm(s.config, w, s.frames);
  std::vector<float> out;
  out.reserve(s.channels * target_length);
  for (std::size_t c = 0; c < s.channels; ++c) {
    const auto y = detail::synthesise(s.config, s.frames, s.bins, target_length, w, norm,
                                      [&](std::size_t k, std::size_t t) { return std::complex<double>(s.at(c, k, t)); });
    for (double v : y) out.push_back(static_cast<float>(v));
  }
  return Waveform(s.channels, s.sample_rate > 0 ? s.sample_rate : 1, std::move(out));
}

/// Keeps the lowest `keep_bins` bins (drops the high end).
template <class T>
Spectrogram<T> freq_truncate(const Spectrogram<T>& s, std::size_t keep_bins) {
  if (keep_bins == 0) throw ShapeError("dsp", "freq_truncate to zero bins");
  if (keep_bins > s.bins)
    throw ShapeError("dsp", "freq_truncate to " + std::to_string(keep_bins) + " bins exceeds the " +
                                std::to_string(s.bins) + " available");
  Spectrogram<T> out = s;
  out.bins = keep_bins;
  out.values.assign(s.channels * keep_bins * s.frames, {});
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t k = 0; k < keep_bins; ++k)
      for (std::size_t t = 0; t < s.frames; ++t) out.at(c, k, t) = s.at(c, k, t);
  out.truncated_from = s.truncated_from.value_or(s.bins);
  return out;
}

/// Zero-fills the bins removed by freq_truncate.
template <class T>
Spectrogram<T> freq_restore(const Spectrogram<T>& s) {
  if (!s.truncated_from) throw ShapeError("dsp", "freq_restore of a spectrogram with no truncation record");
  Spectrogram<T> out = s;
  out.bins = *s.truncated_from;
  out.truncated_from.reset();
  out.values.assign(s.channels * out.bins * s.frames, {});
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t k = 0; k < s.bins; ++k)
      for (std::size_t t = 0; t < s.frames; ++t) out.at(c, k, t) = s.at(c, k, t);
  return out;
}

/// Complex [C, F, T] -> real [2C, F, T] with planes (re, im) per channel.
template <class T, class S>
Tensor<T> pack(const Spectrogram<S>& s) {
  Tensor<T> out({2 * s.channels, s.bins, s.frames});
  const std::size_t plane = s.bins * s.frames;
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      out[(2 * c) * plane + i] = static_cast<T>(s.values[c * plane + i].real());
      out[(2 * c + 1) * plane + i] = static_cast<T>(s.values[c * plane + i].imag());
    }
  return out;
}

/// Inverse of pack; `like` supplies config and bookkeeping fields.
template <class T, class S>
Spectrogram<S> unpack(const Tensor<T>& packed, const Spectrogram<S>& like) {
  if (packed.rank() != 3 || packed.dim(0) % 2)
    throw ShapeError("dsp", "unpack expects [2C, F, T], got " + shape_str(packed.shape()));
  Spectrogram<S> s = like;
  s.channels = packed.dim(0) / 2;
  s.bins = packed.dim(1);
  s.frames = packed.dim(2);
  const std::size_t plane = s.bins * s.frames;
  s.values.assign(s.channels * plane, {});
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      s.values[c * plane + i] = {static_cast<S>(packed[(2 * c) * plane + i]), static_cast<S>(packed[(2 * c + 1) * plane + i])};
  return s;
}

// ---------------------------------------------------------------------------
// Channel-wise sub-bands. With row-major [.., C, F, T] storage, sub-band j of
// channel i (frequencies [j F/k, (j+1) F/k)) is already the contiguous block
// that becomes output channel i k + j, so both directions are reshapes.

inline Shape subband_split_shape(const Shape& s, std::size_t k) {
  if (s.size() < 3) throw ShapeError("dsp", "subband_split expects [.., C, F, T], got " + shape_str(s));
  if (k == 0 || s[s.size() - 2] % k)
    throw ShapeError("dsp", "frequency dimension " + std::to_string(s[s.size() - 2]) + " is not divisible into " +
                                std::to_string(k) + " sub-bands");
  Shape out = s;
  out[s.size() - 3] *= k;
  out[s.size() - 2] /= k;
  return out;
}

inline Shape subband_merge_shape(const Shape& s, std::size_t k) {
  if (s.size() < 3) throw ShapeError("dsp", "subband_merge expects [.., C, F, T], got " + shape_str(s));
  if (k == 0 || s[s.size() - 3] % k)
    throw ShapeError("dsp", "channel dimension " + std::to_string(s[s.size() - 3]) + " is not divisible by " +
                                std::to_string(k) + " sub-bands");
  Shape out = s;
  out[s.size() - 3] /= k;
  out[s.size() - 2] *= k;
  return out;
}

template <class T>
Tensor<T> subband_split(const Tensor<T>& x, std::size_t k) {
  return x.reshaped(subband_split_shape(x.shape(), k));
}

template <class T>
Tensor<T> subband_merge(const Tensor<T>& x, std::size_t k) {
  return x.reshaped(subband_merge_shape(x.shape(), k));
}

template <class T>
ad::Var<T> subband_split(const ad::Var<T>& x, std::size_t k) {
  return ad::reshape(x, subband_split_shape(x.shape(), k));
}

template <class T>
ad::Var<T> subband_merge(const ad::Var<T>& x, std::size_t k) {
  return ad::reshape(x, subband_merge_shape(x.shape(), k));
}

}  // namespace demix::dsp

namespace demix::ad {

/// Differentiable inverse STFT. x: [N, 2 Ch, F, T] packed complex with F full
/// bins (n_fft/2 + 1) -> [N, Ch, length].
template <class T>
Var<T> istft(const Var<T>& x, const dsp::StftConfig& cfg, std::size_t length) {
  cfg.validate();
  if (x.shape().size() != 4 || x.dim(1) % 2 || x.dim(2) != cfg.bins())
    throw ShapeError("dsp", "istft expects [N, 2C, " + std::to_string(cfg.bins()) + ", T], got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), ch = x.dim(1) / 2, F = x.dim(2), frames = x.dim(3);
  const std::size_t plane = F * frames;
  auto w = dsp::detail::hann(cfg.n_fft);
  auto norm = dsp::detail::window_norm(cfg, w, frames);

  Tensor<T> out({N, ch, length});
  for (std::size_t s = 0; s < N * ch; ++s) {
    const T* re = x.value().data() + (2 * s) * plane;
    const T* im = re + plane;
    const auto y = dsp::detail::synthesise(cfg, frames, F, length, w, norm, [&](std::size_t k, std::size_t t) {
      return std::complex<double>(re[k * frames + t], im[k * frames + t]);
    });
    for (std::size_t i = 0; i < length; ++i) out[s * length + i] = static_cast<T>(y[i]);
  }

  return make_result<T>(
      "istft", std::move(out), {x},
      [cfg, N, ch, F, frames, length, plane, w = std::move(w), norm = std::move(norm)](Node<T>& self) {
        auto* gx = detail::grad_of(*self.parents[0]);
        if (!gx) return;
        const std::size_t nfft = cfg.n_fft, hop = cfg.hop_length, half = nfft / 2;
        std::vector<double> gpad(norm.size()), gframe(nfft);
        std::vector<std::complex<double>> spec(nfft / 2 + 1);
        for (std::size_t s = 0; s < N * ch; ++s) {
          std::fill(gpad.begin(), gpad.end(), 0.0);
          for (std::size_t i = 0; i < length && i + half < norm.size(); ++i)
            gpad[i + half] = static_cast<double>(self.grad[s * length + i]) / norm[i + half];
          T* gre = gx->data() + (2 * s) * plane;
          T* gim = gre + plane;
          for (std::size_t t = 0; t < frames; ++t) {
            for (std::size_t n = 0; n < nfft; ++n) gframe[n] = w[n] * gpad[t * hop + n];
            dsp::detail::fft().fwd(spec.data(), gframe.data(), static_cast<Eigen::Index>(nfft));
            for (std::size_t k = 0; k < F; ++k) {
              const bool edge = (k == 0 || k == nfft / 2);
              const double c = (edge ? 1.0 : 2.0) / static_cast<double>(nfft);
              gre[k * frames + t] += static_cast<T>(c * spec[k].real());
              if (!edge) gim[k * frames + t] += static_cast<T>(c * spec[k].imag());
            }
          }
        }
      });
}

}  // namespace demix::ad
