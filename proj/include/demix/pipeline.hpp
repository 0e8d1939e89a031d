#pragma once

// Waveform batch <-> model tensor bridges shared by training and inference.
// The model needs a frame count divisible by 2^scales; a chunk of L samples
// has 1 + ceil(L / hop) frames, so frames are zero-padded up to the next
// multiple and cropped again before synthesis.

#include "demix/model.hpp"
#include "demix/stft.hpp"

namespace demix::pipeline {

using ad::Var;
using model::Model;
using model::ModelConfig;

inline std::size_t padded_frames(std::size_t frames, std::size_t multiple) {
  return (frames + multiple - 1) / multiple * multiple;
}

/// The parts of a model configuration that shape its input and output.
struct FrontEnd {
  dsp::StftConfig stft;
  std::size_t freq_bins = 0;
  std::size_t channels = 2;
  std::size_t time_multiple = 1;
  std::size_t sources = 1;

  static FrontEnd of(const ModelConfig& c) {
    return {c.stft, c.freq_bins, c.audio_channels, c.time_multiple(), c.sources.size()};
  }
};

/// Packed, truncated, frame-padded model input for a waveform batch.
template <class T>
struct Encoded {
  Tensor<T> input;         // [B, 2 Ch, F, T_pad]
  std::size_t frames = 0;  // STFT frames before padding
  std::size_t length = 0;  // samples
};

/// wave: [B, Ch, L] -> model input.
template <class T>
Encoded<T> encode(const Tensor<float>& wave, const FrontEnd& cfg) {
  if (wave.rank() != 3 || wave.dim(1) != cfg.channels || wave.dim(2) == 0)
    throw ShapeError("pipeline", "expected waveform batch [B, " + std::to_string(cfg.channels) + ", L], got " +
                                     shape_str(wave.shape()));
  const std::size_t B = wave.dim(0), ch = wave.dim(1), L = wave.dim(2);
  Encoded<T> e;
  e.length = L;
  e.frames = cfg.stft.frames_for(L);
  const std::size_t Tp = padded_frames(e.frames, cfg.time_multiple), F = cfg.freq_bins;
  e.input = Tensor<T>({B, 2 * ch, F, Tp});
  for (std::size_t b = 0; b < B; ++b) {
    Waveform w(ch, 1, std::vector<float>(wave.data() + b * ch * L, wave.data() + (b + 1) * ch * L));
    const auto spec = dsp::freq_truncate(dsp::stft(w, cfg.stft), F);
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t t = 0; t < e.frames; ++t) {
          const auto v = spec.at(c, f, t);
          const std::size_t base = ((b * 2 * ch + 2 * c) * F + f) * Tp + t;
          e.input[base] = static_cast<T>(v.real());
          e.input[base + F * Tp] = static_cast<T>(v.imag());
        }
  }
  return e;
}

/// Differentiable synthesis of model output [B, S, 2 Ch, F, T_pad] into
/// waveforms [B, S, Ch, length]: crop frames, restore bins, inverse STFT.
template <class T>
Var<T> decode(const Var<T>& out, const dsp::StftConfig& stft, std::size_t frames, std::size_t length) {
  const auto& s = out.shape();
  if (s.size() != 5) throw ShapeError("pipeline", "decode expects [B, S, 2Ch, F, T], got " + shape_str(s));
  const std::size_t B = s[0], S = s[1], ch2 = s[2];
  Var<T> y = ad::reshape(out, {B * S, ch2, s[3], s[4]});
  if (s[4] != frames) y = ad::resize_axis(y, 3, frames);
  if (s[3] != stft.bins()) y = ad::resize_axis(y, 2, stft.bins());
  return ad::reshape(ad::istft(y, stft, length), {B, S, ch2 / 2, length});
}

/// Mixture waveforms [B, Ch, L] -> per-source estimates [B, S, Ch, L].
template <class T>
Var<T> separate_batch(const Model<T>& m, const Tensor<float>& mixture) {
  const auto e = encode<T>(mixture, FrontEnd::of(m.config()));
  return decode(m.forward(ad::constant(e.input)), m.config().stft, e.frames, e.length);
}

}  // namespace demix::pipeline
