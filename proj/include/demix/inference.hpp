#pragma once

// Full-track separation by chunked overlap-add, and weighted blending of
// several estimates.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <future>
#include <string>
#include <vector>

#include "demix/audio.hpp"
#include "demix/model.hpp"
#include "demix/pipeline.hpp"

namespace demix::inference {

struct SeparationPlan {
  std::size_t chunk_frames = 1024;
  std::size_t overlap = 8;

  std::size_t chunk_samples(std::size_t hop) const { return chunk_frames * hop; }
  std::size_t stride(std::size_t hop) const { return chunk_samples(hop) / overlap; }

  void validate(std::size_t hop, std::size_t time_multiple = 1) const {
    if (overlap == 0) throw ConfigError("overlap must be at least 1");
    if (chunk_frames == 0) throw ConfigError("chunk_frames must be positive");
    if (chunk_samples(hop) % overlap)
      throw ConfigError("chunk of " + std::to_string(chunk_samples(hop)) + " samples is not divisible by overlap " +
                        std::to_string(overlap));
    if (chunk_frames % time_multiple)
      throw ConfigError("chunk_frames " + std::to_string(chunk_frames) + " is not a multiple of " +
                        std::to_string(time_multiple));
  }
};

/// Half-open span in original-signal coordinates; parts outside [0, length)
/// read as zeros.
struct Span {
  long long start;
  long long end;
};

/// Spans at multiples of the stride over the signal padded by
/// (chunk - stride) on both sides; each original sample lies in exactly
/// `overlap` spans.
inline std::vector<Span> plan_chunks(std::size_t length, const SeparationPlan& plan, std::size_t hop) {
  plan.validate(hop);
  if (length == 0) throw ShapeError("inference", "mixture must have at least one sample");
  const auto C = static_cast<long long>(plan.chunk_samples(hop)), S = static_cast<long long>(plan.stride(hop));
  const long long pad = C - S;
  const long long last = (static_cast<long long>(length) - 1 + pad) / S;
  std::vector<Span> spans;
  for (long long k = 0; k <= last; ++k) spans.push_back({k * S - pad, k * S - pad + C});
  return spans;
}

/// Maps a packed spectrogram batch [B, 2 Ch, F, T_pad] to per-source
/// estimates [B, S, 2 Ch, F, T_pad].
using SpectralOperator = std::function<Tensor<float>(const Tensor<float>&)>;

inline SpectralOperator model_operator(const model::Model<float>& m) {
  return [&m](const Tensor<float>& x) { return m.forward(x); };
}

/// Output := input, once per source.
inline SpectralOperator identity_operator(std::size_t sources) {
  return [sources](const Tensor<float>& x) {
    const std::size_t B = x.dim(0), per = x.size() / B;
    Tensor<float> y({B, sources, x.dim(1), x.dim(2), x.dim(3)});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < sources; ++s) std::copy_n(x.data() + b * per, per, y.data() + (b * sources + s) * per);
    return y;
  };
}

struct SeparateOptions {
  std::size_t threads = 1;
};

/// Per chunk: stft -> truncate -> operator -> restore -> istft; chunk
/// outputs are summed per sample and divided by the coverage count.
inline std::vector<Waveform> separate(const SpectralOperator& op, const pipeline::FrontEnd& fe, const Waveform& mixture,
                                      const SeparationPlan& plan, const SeparateOptions& opt = {}) {
  plan.validate(fe.stft.hop_length, fe.time_multiple);
  if (mixture.empty()) throw ShapeError("inference", "mixture must have at least one sample");
  if (mixture.channels() != fe.channels)
    throw ShapeError("inference", "mixture has " + std::to_string(mixture.channels()) + " channels, model expects " +
                                      std::to_string(fe.channels));
  const std::size_t L = mixture.length(), ch = fe.channels, C = plan.chunk_samples(fe.stft.hop_length);
  const auto spans = plan_chunks(L, plan, fe.stft.hop_length);

  auto run_chunk = [&](const Span& sp) {
    const Waveform piece = mixture.slice(sp.start, C);
    const Tensor<float> batch({1, ch, C}, piece.samples());
    const auto e = pipeline::encode<float>(batch, fe);
    const Tensor<float> out = op(e.input);
    if (out.rank() != 5 || out.dim(0) != 1 || out.dim(1) != fe.sources || out.dim(2) != 2 * ch)
      throw ShapeError("inference", "operator returned " + shape_str(out.shape()));
    return pipeline::decode(ad::constant(out), fe.stft, e.frames, C).value();  // [1, S, Ch, C]
  };

  std::vector<std::vector<double>> acc(fe.sources, std::vector<double>(ch * L, 0.0));
  std::vector<std::uint32_t> count(L, 0);
  auto accumulate = [&](const Span& sp, const Tensor<float>& y) {
    const long long lo = std::max<long long>(sp.start, 0), hi = std::min<long long>(sp.end, static_cast<long long>(L));
    for (long long i = lo; i < hi; ++i) ++count[static_cast<std::size_t>(i)];
    for (std::size_t s = 0; s < fe.sources; ++s)
      for (std::size_t c = 0; c < ch; ++c) {
        const float* src = y.data() + (s * ch + c) * C;
        double* dst = acc[s].data() + c * L;
        for (long long i = lo; i < hi; ++i) dst[i] += src[i - sp.start];
      }
  };

  const std::size_t threads = std::max<std::size_t>(1, opt.threads);
  for (std::size_t first = 0; first < spans.size(); first += threads) {
    const std::size_t n = std::min(threads, spans.size() - first);
    if (n == 1) {
      accumulate(spans[first], run_chunk(spans[first]));
      continue;
    }
    std::vector<std::future<Tensor<float>>> jobs;
    for (std::size_t j = 0; j < n; ++j) jobs.push_back(std::async(std::launch::async, run_chunk, spans[first + j]));
    for (std::size_t j = 0; j < n; ++j) accumulate(spans[first + j], jobs[j].get());  // fixed summation order
  }

  std::vector<Waveform> out;
  for (std::size_t s = 0; s < fe.sources; ++s) {
    Waveform w(ch, L, mixture.sample_rate());
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < L; ++i) w.at(c, i) = static_cast<float>(acc[s][c * L + i] / count[i]);
    out.push_back(std::move(w));
  }
  return out;
}

/// Model separation into a StemSet holding the model's classes.
inline StemSet separate(const model::Model<float>& m, const Waveform& mixture, const SeparationPlan& plan,
                        const SeparateOptions& opt = {}) {
  const auto& cfg = m.config();
  const auto fe = pipeline::FrontEnd::of(cfg);
  const Waveform input = mixture.channels() == 1 ? ensure_channels(mixture, cfg.audio_channels) : mixture;
  auto waves = separate(model_operator(m), fe, input, plan, opt);
  StemSet out;
  for (std::size_t s = 0; s < cfg.sources.size(); ++s) out.set(cfg.sources[s], std::move(waves[s]));
  return out;
}

// ---------------------------------------------------------------------------
// Blending

/// One estimate's weight per class (class order); classes the estimate does
/// not contain are ignored.
struct BlendEntry {
  std::string id;
  std::array<double, kNumSources> weights{1, 1, 1, 1};
};

struct BlendSpec {
  std::vector<BlendEntry> entries;
};

/// Per class, the weighted sample-wise average over the estimates holding
/// that class, with weights normalised to sum to one.
inline StemSet blend(const std::vector<StemSet>& estimates, const BlendSpec& spec) {
  if (estimates.empty()) throw ShapeError("inference", "nothing to blend");
  if (spec.entries.size() != estimates.size())
    throw ConfigError("blend needs one weight entry per estimate (" + std::to_string(estimates.size()) + "), got " +
                      std::to_string(spec.entries.size()));
  const Waveform* layout = nullptr;
  for (const auto& e : estimates)
    for (Source s : e.sources()) {
      if (!layout) layout = &e.at(s);
      if (!e.at(s).same_layout(*layout)) throw ShapeError("inference", "blend inputs are misaligned");
    }
  if (!layout) throw ShapeError("inference", "blend inputs hold no stems");

  StemSet out;
  for (Source s : kSources) {
    double total = 0;
    bool present = false;
    for (std::size_t i = 0; i < estimates.size(); ++i) {
      if (!estimates[i].has(s)) continue;
      present = true;
      const double w = spec.entries[i].weights[index_of(s)];
      if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("blend weights must be finite and non-negative");
      total += w;
    }
    if (!present) continue;
    if (total <= 0) throw ConfigError("all blend weights are zero for " + std::string(source_name(s)));
    std::vector<double> acc(layout->samples().size(), 0.0);
    for (std::size_t i = 0; i < estimates.size(); ++i) {
      if (!estimates[i].has(s)) continue;
      const double w = spec.entries[i].weights[index_of(s)] / total;
      const auto& x = estimates[i].at(s).samples();
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += w * x[j];
    }
    Waveform w(layout->channels(), layout->length(), layout->sample_rate());
    for (std::size_t j = 0; j < acc.size(); ++j) w.samples()[j] = static_cast<float>(acc[j]);
    out.set(s, std::move(w));
  }
  return out;
}

}  // namespace demix::inference
