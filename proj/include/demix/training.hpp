#pragma once

// Random-mix batch sampling, waveform L2 with quantile loss masking, the
// optimisation step and the early-stopping rule.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "demix/adam.hpp"
#include "demix/audio.hpp"
#include "demix/model.hpp"
#include "demix/pipeline.hpp"

namespace demix::training {

using ad::Var;
using model::Model;

enum class MaskDims { none, batch, batch_time };

inline std::string_view mask_dims_name(MaskDims d) {
  switch (d) {
    case MaskDims::none: return "none";
    case MaskDims::batch: return "batch";
    case MaskDims::batch_time: return "batch_time";
  }
  return "?";
}

inline std::optional<MaskDims> parse_mask_dims(std::string_view s) {
  if (s == "none") return MaskDims::none;
  if (s == "batch") return MaskDims::batch;
  if (s == "batch_time" || s == "batch,time" || s == "batch, time") return MaskDims::batch_time;
  return std::nullopt;
}

struct LossMaskSpec {
  MaskDims dims = MaskDims::none;
  double q = 1.0;

  void validate() const {
    if (dims != MaskDims::none && !(q > 0.0 && q <= 1.0))
      throw ConfigError("loss mask quantile q must lie in (0, 1], got " + std::to_string(q));
  }
  friend bool operator==(const LossMaskSpec&, const LossMaskSpec&) = default;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 6;
  std::size_t chunk_frames = 256;
  LossMaskSpec mask{MaskDims::batch, 0.4};
  std::size_t steps_per_epoch = 10000;
  std::size_t early_stop_window = 10;
  double early_stop_delta = 0.1;
  std::uint64_t seed = 0;

  void validate(const model::ModelConfig& m) const {
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (chunk_frames == 0 || chunk_frames % m.time_multiple())
      throw ConfigError("chunk_frames " + std::to_string(chunk_frames) + " must be a positive multiple of " +
                        std::to_string(m.time_multiple()));
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
    if (steps_per_epoch == 0) throw ConfigError("steps_per_epoch must be positive");
    mask.validate();
  }
  std::size_t chunk_samples(const dsp::StftConfig& s) const { return chunk_frames * s.hop_length; }
};

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  ad::AdamState<float> adam;
  std::mt19937_64 rng;
  std::vector<double> sdr_history;

  std::string rng_state() const {
    std::ostringstream os;
    os << rng;
    return os.str();
  }
  void set_rng_state(const std::string& s) {
    std::istringstream is(s);
    is >> rng;
    if (!is) throw ConfigError("unreadable rng state");
  }
};

inline TrainState initial_state(const Model<float>& m, std::uint64_t seed) {
  TrainState s;
  s.adam = ad::AdamState<float>::for_params(m.params());
  s.rng.seed(seed);
  return s;
}

// ---------------------------------------------------------------------------
// Sampling

struct Pick {
  std::size_t track;
  std::size_t offset;
};

struct Batch {
  Tensor<float> stems;    // [B, 4, Ch, L] in class order
  Tensor<float> mixture;  // [B, Ch, L]
  std::vector<std::array<Pick, kNumSources>> picks;

  /// Target chunks for the given sources: [B, S, Ch, L].
  Tensor<float> targets(const std::vector<Source>& sources) const {
    const std::size_t B = stems.dim(0), per = stems.dim(2) * stems.dim(3);
    Tensor<float> t({B, sources.size(), stems.dim(2), stems.dim(3)});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < sources.size(); ++s)
        std::copy_n(stems.data() + (b * kNumSources + index_of(sources[s])) * per, per,
                    t.data() + (b * sources.size() + s) * per);
    return t;
  }
};

/// For every batch item and class independently: a uniform track among those
/// long enough, and a uniform chunk start. The mixture is the sum of the four
/// chosen chunks.
inline Batch sample_batch(const std::vector<StemSet>& pool, std::size_t batch_size, std::size_t chunk_frames,
                          const dsp::StftConfig& stft, std::mt19937_64& rng) {
  if (pool.empty()) throw ShapeError("training", "dataset is empty");
  const std::size_t L = chunk_frames * stft.hop_length;
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (!pool[i].complete()) throw ShapeError("training", "track " + std::to_string(i) + " lacks some stems");
    if (pool[i].any().length() >= L) eligible.push_back(i);
  }
  if (eligible.empty())
    throw ShapeError("training", "every track is shorter than the " + std::to_string(L) + "-sample chunk");
  const std::size_t ch = pool[eligible[0]].any().channels();

  Batch batch;
  batch.stems = Tensor<float>({batch_size, kNumSources, ch, L});
  batch.mixture = Tensor<float>({batch_size, ch, L});
  std::uniform_int_distribution<std::size_t> pick_track(0, eligible.size() - 1);
  for (std::size_t b = 0; b < batch_size; ++b) {
    auto& picks = batch.picks.emplace_back();
    for (Source s : kSources) {
      const std::size_t tr = eligible[pick_track(rng)];
      const Waveform& w = pool[tr].at(s);
      if (w.channels() != ch) throw ShapeError("training", "tracks differ in channel count");
      const std::size_t off = std::uniform_int_distribution<std::size_t>(0, w.length() - L)(rng);
      picks[index_of(s)] = {tr, off};
      float* dst = batch.stems.data() + (b * kNumSources + index_of(s)) * ch * L;
      float* mix = batch.mixture.data() + b * ch * L;
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t i = 0; i < L; ++i) {
          const float v = w.at(c, off + i);
          dst[c * L + i] = v;
          mix[c * L + i] += v;
        }
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean squared error of est vs target ([B, S, Ch, L]) per (item, class), or
/// per (item, class, segment of `segment` samples) for batch_time: [B, S] or
/// [B, S, L / segment].
template <class T>
Var<T> per_element_losses(const Var<T>& est, const Tensor<T>& target, MaskDims dims, std::size_t segment) {
  const auto& s = est.shape();
  if (s.size() != 4 || s != target.shape())
    throw ShapeError("training", "loss expects matching [B, S, Ch, L] tensors, got " + shape_str(s) + " and " +
                                     shape_str(target.shape()));
  const std::size_t B = s[0], S = s[1], ch = s[2], L = s[3];
  const std::size_t seg = dims == MaskDims::batch_time ? segment : L;
  if (seg == 0 || L % seg)
    throw ShapeError("training", "chunk of " + std::to_string(L) + " samples does not split into " +
                                     std::to_string(seg) + "-sample segments");
  const std::size_t nseg = L / seg;
  Tensor<T> out(dims == MaskDims::batch_time ? Shape{B, S, nseg} : Shape{B, S});
  const auto& e = est.value();
  const double inv = 1.0 / static_cast<double>(ch * seg);
  for (std::size_t bs = 0; bs < B * S; ++bs)
    for (std::size_t t = 0; t < nseg; ++t) {
      double acc = 0.0;
      for (std::size_t c = 0; c < ch; ++c) {
        const std::size_t base = (bs * ch + c) * L + t * seg;
        for (std::size_t i = 0; i < seg; ++i) {
          const double d = double(e[base + i]) - double(target[base + i]);
          acc += d * d;
        }
      }
      out[bs * nseg + t] = static_cast<T>(acc * inv);
    }
  return ad::make_result<T>("per_element_losses", std::move(out), {est},
                            [target, ch, L, seg, nseg, inv](ad::Node<T>& self) {
                              auto* g = ad::detail::grad_of(*self.parents[0]);
                              if (!g) return;
                              const auto& e = self.parents[0]->value;
                              for (std::size_t i = 0; i < g->size(); ++i) {
                                const std::size_t bs = i / (ch * L), t = (i % L) / seg;
                                const T go = self.grad[bs * nseg + t];
                                if (go != T(0)) (*g)[i] += static_cast<T>(2.0 * inv) * go * (e[i] - target[i]);
                              }
                            });
}

/// max(1, floor(q N)).
inline std::size_t keep_count(std::size_t n, double q) {
  if (!(q > 0.0 && q <= 1.0)) throw ConfigError("quantile q must lie in (0, 1], got " + std::to_string(q));
  if (n == 0) throw ShapeError("training", "nothing to select from");
  // guard against q N landing a rounding step below an integer
  const double k = std::floor(q * static_cast<double>(n) + 1e-9);
  return std::max<std::size_t>(1, static_cast<std::size_t>(k));
}

/// Keeps the keep_count smallest values; ties go to the lower index.
template <class V>
std::vector<std::uint8_t> select_keep(std::span<const V> losses, double q) {
  const std::size_t k = keep_count(losses.size(), q);
  std::vector<std::size_t> order(losses.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return losses[a] < losses[b]; });
  std::vector<std::uint8_t> keep(losses.size(), 0);
  for (std::size_t i = 0; i < k; ++i) keep[order[i]] = 1;
  return keep;
}

/// Keep mask for per-element losses [B, S] or [B, S, T]: one pool per class
/// over the batch (and time) axes. dims=none keeps everything.
template <class T>
Tensor<std::uint8_t> select_keep(const Tensor<T>& losses, const LossMaskSpec& spec) {
  spec.validate();
  if (losses.rank() < 2) throw ShapeError("training", "losses must be [B, S] or [B, S, T]");
  const std::size_t B = losses.dim(0), S = losses.dim(1), Tn = losses.rank() == 3 ? losses.dim(2) : 1;
  Tensor<std::uint8_t> keep(losses.shape(), std::uint8_t{1});
  if (spec.dims == MaskDims::none) return keep;
  std::vector<T> pool(B * Tn);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < Tn; ++t) pool[b * Tn + t] = losses[(b * S + s) * Tn + t];
    const auto k = select_keep(std::span<const T>(pool), spec.q);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < Tn; ++t) keep[(b * S + s) * Tn + t] = k[b * Tn + t];
  }
  return keep;
}

/// Mean of kept losses per class, averaged over classes. Discarded elements
/// receive exactly zero gradient.
template <class T>
Var<T> masked_loss(const Var<T>& losses, const Tensor<std::uint8_t>& keep) {
  if (losses.shape() != keep.shape()) throw ShapeError("training", "mask shape differs from losses");
  const std::size_t B = losses.dim(0), S = losses.dim(1), Tn = losses.shape().size() == 3 ? losses.dim(2) : 1;
  Tensor<T> w(losses.shape());
  for (std::size_t s = 0; s < S; ++s) {
    std::size_t kept = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < Tn; ++t) kept += keep[(b * S + s) * Tn + t];
    if (kept == 0) throw ShapeError("training", "mask keeps nothing for class " + std::to_string(s));
    const T ws = static_cast<T>(1.0 / (static_cast<double>(kept) * static_cast<double>(S)));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < Tn; ++t) w[(b * S + s) * Tn + t] = keep[(b * S + s) * Tn + t] ? ws : T(0);
  }
  return ad::weighted_sum(losses, std::move(w));
}

// ---------------------------------------------------------------------------
// Optimisation

struct StepResult {
  double raw_loss = 0;     // unmasked mean of per-element losses
  double masked_loss = 0;  // the optimised objective
  double kept_fraction = 1;
};

template <class T>
struct LossTerms {
  Var<T> objective;
  StepResult stats;
};

/// forward -> synthesis -> per-element losses -> mask -> masked mean.
template <class T>
LossTerms<T> batch_loss(const Model<T>& m, const Tensor<float>& mixture, const Tensor<float>& targets,
                        const LossMaskSpec& spec) {
  const Var<T> est = pipeline::separate_batch(m, mixture);
  const Var<T> losses =
      per_element_losses(est, targets.template cast<T>(), spec.dims, m.config().stft.hop_length);
  const auto keep = select_keep(losses.value(), spec);
  LossTerms<T> out{masked_loss(losses, keep), {}};
  double raw = 0;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    raw += losses.value()[i];
    kept += keep[i];
  }
  out.stats.raw_loss = raw / static_cast<double>(keep.size());
  out.stats.masked_loss = out.objective.value().item();
  out.stats.kept_fraction = static_cast<double>(kept) / static_cast<double>(keep.size());
  return out;
}

/// One Adam update on `batch`. Non-finite values abort with the step number
/// and the producing operation.
inline StepResult train_step(Model<float>& m, const Batch& batch, const TrainConfig& cfg, TrainState& state) {
  m.set_trainable(true);
  try {
    auto terms = batch_loss(m, batch.mixture, batch.targets(m.config().sources), cfg.mask);
    const auto grads = ad::grad(terms.objective, m.params());
    terms.objective = Var<float>();
    ad::adam_step(m.params(), grads, state.adam, static_cast<float>(cfg.learning_rate));
    ++state.step;
    return terms.stats;
  } catch (const NumericError& e) {
    throw NumericError(e.op(), "training step " + std::to_string(state.step + 1) + " diverged: " + e.what());
  }
}

/// True iff the history holds more than `window` epochs and the best of the
/// last `window` beats the best before them by less than `delta`.
inline bool early_stop(std::span<const double> history, std::size_t window = 10, double delta = 0.1) {
  if (window == 0 || history.size() < window + 1) return false;
  const auto split = history.end() - static_cast<std::ptrdiff_t>(window);
  const double before = *std::max_element(history.begin(), split);
  const double recent = *std::max_element(split, history.end());
  return recent - before < delta;
}

struct TrainHooks {
  std::ostream* log = nullptr;  // TSV: step, raw loss, masked loss, kept fraction
  std::size_t checkpoint_every = 0;
  std::function<void(const Model<float>&, const TrainState&)> checkpoint;
  /// Mean validation SDR, evaluated at every epoch boundary.
  std::function<double(const Model<float>&)> validate;
};

struct TrainSummary {
  std::size_t steps_run = 0;
  bool stopped_early = false;
  double last_loss = 0;
};

/// Runs until `state.step == total_steps` or early stopping fires.
inline TrainSummary train(Model<float>& m, const std::vector<StemSet>& pool, const TrainConfig& cfg,
                          TrainState& state, std::size_t total_steps, const TrainHooks& hooks = {}) {
  cfg.validate(m.config());
  TrainSummary sum;
  if (hooks.log && state.step == 0) *hooks.log << "step\traw_loss\tmasked_loss\tkept_fraction\n";
  while (state.step < total_steps) {
    const Batch batch = sample_batch(pool, cfg.batch_size, cfg.chunk_frames, m.config().stft, state.rng);
    const StepResult r = train_step(m, batch, cfg, state);
    ++sum.steps_run;
    sum.last_loss = r.masked_loss;
    if (hooks.log)
      *hooks.log << state.step << '\t' << r.raw_loss << '\t' << r.masked_loss << '\t' << r.kept_fraction << '\n';
    if (state.step % cfg.steps_per_epoch == 0) {
      ++state.epoch;
      if (hooks.validate) {
        state.sdr_history.push_back(hooks.validate(m));
        sum.stopped_early = early_stop(state.sdr_history, cfg.early_stop_window, cfg.early_stop_delta);
      }
    }
    if (hooks.checkpoint && hooks.checkpoint_every && state.step % hooks.checkpoint_every == 0)
      hooks.checkpoint(m, state);
    if (sum.stopped_early) break;
  }
  m.set_trainable(false);
  return sum;
}

}  // namespace demix::training
