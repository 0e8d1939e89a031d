#pragma once

// TFC-TDF-UNet v3: residual U-Net over channel-wise sub-banded complex
// spectrograms, with a time-distributed fully-connected (TDF) bottleneck in
// every residual block, a multi-source head and an input skip-connection.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "demix/audio.hpp"
#include "demix/layers.hpp"
#include "demix/stft.hpp"

namespace demix::model {

using ad::Var;

struct ModelConfig {
  dsp::StftConfig stft{8192, 1024};
  std::size_t freq_bins = 4096;
  std::size_t audio_channels = 2;
  std::size_t initial_channels = 64;
  std::size_t growth = 64;
  std::size_t scales = 5;
  std::size_t blocks_per_scale = 2;
  std::size_t subbands = 4;
  std::size_t tdf_bottleneck = 4;
  std::string normalization = "InstanceNorm";
  std::string activation = "GELU";
  std::vector<Source> sources{kSources.begin(), kSources.end()};

  /// Real input channels: (re, im) per audio channel.
  std::size_t packed_channels() const { return 2 * audio_channels; }
  std::size_t band_width() const { return freq_bins / subbands; }
  std::size_t width_at(std::size_t scale) const { return initial_channels + scale * growth; }
  std::size_t freq_at(std::size_t scale) const { return band_width() >> scale; }
  /// Frame counts fed to the model must be multiples of this.
  std::size_t time_multiple() const { return std::size_t{1} << scales; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ShapeError("model", m); };
    stft.validate();
    if (!freq_bins || !audio_channels || !initial_channels || !scales || !blocks_per_scale || !subbands ||
        !tdf_bottleneck)
      fail("all counts must be positive");
    if (freq_bins > stft.bins())
      fail("freq_bins " + std::to_string(freq_bins) + " exceeds n_fft/2+1 = " + std::to_string(stft.bins()));
    if (freq_bins % subbands)
      fail("freq_bins " + std::to_string(freq_bins) + " is not divisible by " + std::to_string(subbands) +
           " sub-bands");
    if (band_width() % time_multiple())
      fail("sub-band width " + std::to_string(band_width()) + " is not divisible by 2^scales = " +
           std::to_string(time_multiple()));
    if (freq_at(scales) % tdf_bottleneck)
      fail("deepest frequency width " + std::to_string(freq_at(scales)) +
           " is not divisible by the TDF bottleneck factor " + std::to_string(tdf_bottleneck));
    if (normalization != "InstanceNorm") fail("unsupported normalization " + normalization);
    if (activation != "GELU") fail("unsupported activation " + activation);
    if (sources.empty()) fail("source list is empty");
    for (std::size_t i = 0; i < sources.size(); ++i)
      for (std::size_t j = i + 1; j < sources.size(); ++j)
        if (sources[i] == sources[j]) fail("duplicate source " + std::string(source_name(sources[i])));
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Column configurations of the published hyperparameter table.
namespace presets {

inline ModelConfig modelA() { return ModelConfig{}; }
inline ModelConfig modelB() { return ModelConfig{}; }

inline ModelConfig model1() {
  ModelConfig c;
  c.stft = {8192, 2048};
  c.initial_channels = 128;
  return c;
}

inline ModelConfig model2() {
  ModelConfig c = model1();
  c.initial_channels = 256;
  return c;
}

inline ModelConfig model3() {
  ModelConfig c = model1();
  c.stft = {12288, 2048};
  c.sources = {Source::vocals};
  return c;
}

/// Desk-scale configuration used by tests and toy experiments.
inline ModelConfig tiny() {
  ModelConfig c;
  c.stft = {128, 32};
  c.freq_bins = 64;
  c.initial_channels = 8;
  c.growth = 8;
  c.scales = 2;
  c.blocks_per_scale = 2;
  c.subbands = 2;
  c.tdf_bottleneck = 4;
  return c;
}

}  // namespace presets

struct ParamSpec {
  std::string name;
  Shape shape;
  enum class Init { he, ones, zeros } init;
  std::size_t fan_in;
};

/// Every parameter's name, shape and initializer, in storage order. Shapes
/// depend only on the config.
inline std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  using Init = ParamSpec::Init;
  std::vector<ParamSpec> out;
  const std::size_t in_c = cfg.packed_channels() * cfg.subbands;

  auto norm = [&](const std::string& p, std::size_t c) {
    out.push_back({p + ".gamma", {c}, Init::ones, 0});
    out.push_back({p + ".beta", {c}, Init::zeros, 0});
  };
  auto block = [&](const std::string& p, std::size_t c, std::size_t f) {
    const std::size_t fb = f / cfg.tdf_bottleneck;
    norm(p + ".norm1", c);
    out.push_back({p + ".conv1.weight", {c, c, 3, 3}, Init::he, 9 * c});
    norm(p + ".norm2", c);
    out.push_back({p + ".tdf.lin1.weight", {fb, f}, Init::he, f});
    norm(p + ".tdf.norm", c);
    out.push_back({p + ".tdf.lin2.weight", {f, fb}, Init::he, fb});
    out.push_back({p + ".conv2.weight", {c, c, 3, 3}, Init::he, 9 * c});
  };

  out.push_back({"stem.weight", {cfg.initial_channels, in_c, 1, 1}, Init::he, in_c});
  for (std::size_t i = 0; i < cfg.scales; ++i) {
    const std::size_t c = cfg.width_at(i), f = cfg.freq_at(i);
    for (std::size_t j = 0; j < cfg.blocks_per_scale; ++j)
      block("enc" + std::to_string(i) + ".block" + std::to_string(j), c, f);
    out.push_back({"enc" + std::to_string(i) + ".down.weight", {cfg.width_at(i + 1), c, 2, 2}, Init::he, 4 * c});
  }
  for (std::size_t j = 0; j < cfg.blocks_per_scale; ++j)
    block("bottleneck.block" + std::to_string(j), cfg.width_at(cfg.scales), cfg.freq_at(cfg.scales));
  for (std::size_t i = cfg.scales; i-- > 0;) {
    const std::size_t c = cfg.width_at(i), f = cfg.freq_at(i);
    out.push_back({"dec" + std::to_string(i) + ".up.weight", {cfg.width_at(i + 1), c, 2, 2}, Init::he,
                   cfg.width_at(i + 1)});
    for (std::size_t j = 0; j < cfg.blocks_per_scale; ++j)
      block("dec" + std::to_string(i) + ".block" + std::to_string(j), c, f);
  }
  const std::size_t head_in = cfg.initial_channels + in_c;
  out.push_back({"head.weight", {cfg.sources.size() * in_c, head_in, 1, 1}, Init::he, head_in});
  return out;
}

/// Ordered name -> tensor store.
template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
class Model {
 public:
  /// He-initialised convolution and linear weights, unit norm scale, zero
  /// shift. Identical seeds give bit-identical weights.
  static Model build(const ModelConfig& cfg, std::uint64_t seed) {
    Model m(cfg);
    std::mt19937_64 rng(seed);
    for (const auto& spec : m.layout_) {
      Tensor<T> t(spec.shape);
      switch (spec.init) {
        case ParamSpec::Init::ones: t.fill(T(1)); break;
        case ParamSpec::Init::zeros: break;
        case ParamSpec::Init::he: {
          std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(spec.fan_in)));
          for (auto& v : t.values()) v = static_cast<T>(n(rng));
          break;
        }
      }
      m.params_.push_back(ad::parameter(std::move(t)));
    }
    return m;
  }

  /// Adopts stored weights; names and shapes must match the config's layout.
  static Model from_weights(const ModelConfig& cfg, const NamedTensors<T>& weights) {
    Model m(cfg);
    std::unordered_map<std::string, const Tensor<T>*> by_name;
    for (const auto& [name, t] : weights) by_name[name] = &t;
    for (const auto& spec : m.layout_) {
      auto it = by_name.find(spec.name);
      if (it == by_name.end()) throw ShapeError("model", "missing weight " + spec.name);
      if (it->second->shape() != spec.shape)
        throw ShapeError("model", "weight " + spec.name + " has shape " + shape_str(it->second->shape()) +
                                      ", config expects " + shape_str(spec.shape));
      m.params_.push_back(ad::parameter(*it->second));
    }
    return m;
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  std::vector<Var<T>>& params() noexcept { return params_; }
  const std::vector<Var<T>>& params() const noexcept { return params_; }
  const std::vector<ParamSpec>& layout() const noexcept { return layout_; }

  NamedTensors<T> weights() const {
    NamedTensors<T> out;
    for (std::size_t i = 0; i < params_.size(); ++i) out.emplace_back(layout_[i].name, params_[i].value());
    return out;
  }

  Var<T>& param(const std::string& name) { return params_.at(index_.at(name)); }
  const Var<T>& param(const std::string& name) const { return params_.at(index_.at(name)); }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value().size();
    return n;
  }

  /// Whether forward passes record a gradient graph.
  void set_trainable(bool on) {
    for (auto& p : params_) p.set_requires_grad(on);
  }

  template <class U>
  Model<U> cast() const {
    NamedTensors<U> w;
    for (std::size_t i = 0; i < params_.size(); ++i)
      w.emplace_back(layout_[i].name, params_[i].value().template cast<U>());
    return Model<U>::from_weights(cfg_, w);
  }

  /// x: [B, 2 Ch, F, T] packed mixture spectrogram -> [B, S, 2 Ch, F, T]
  /// packed per-source spectrogram estimates.
  Var<T> forward(const Var<T>& x) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != cfg_.packed_channels() || s[2] != cfg_.freq_bins || s[3] == 0 ||
        s[3] % cfg_.time_multiple())
      throw ShapeError("model", "forward expects [B, " + std::to_string(cfg_.packed_channels()) + ", " +
                                    std::to_string(cfg_.freq_bins) + ", T] with T a multiple of " +
                                    std::to_string(cfg_.time_multiple()) + ", got " + shape_str(s));
    const std::size_t B = s[0], T_ = s[3], k = cfg_.subbands;

    const Var<T> input = dsp::subband_split(x, k);
    Var<T> h = ad::conv2d(input, p("stem.weight"));
    std::vector<Var<T>> skips;
    for (std::size_t i = 0; i < cfg_.scales; ++i) {
      for (std::size_t j = 0; j < cfg_.blocks_per_scale; ++j)
        h = block(h, "enc" + std::to_string(i) + ".block" + std::to_string(j));
      skips.push_back(h);
      h = ad::conv2d(h, p("enc" + std::to_string(i) + ".down.weight"), 2, 0);
    }
    for (std::size_t j = 0; j < cfg_.blocks_per_scale; ++j) h = block(h, "bottleneck.block" + std::to_string(j));
    for (std::size_t i = cfg_.scales; i-- > 0;) {
      h = ad::add(ad::conv_transpose2d(h, p("dec" + std::to_string(i) + ".up.weight")), skips[i]);
      skips[i] = Var<T>();
      for (std::size_t j = 0; j < cfg_.blocks_per_scale; ++j)
        h = block(h, "dec" + std::to_string(i) + ".block" + std::to_string(j));
    }
    h = ad::conv2d(ad::concat(h, input, 1), p("head.weight"));
    // [B, S * 2Ch * k, F/k, T] -> per-source sub-band merge -> [B, S, 2Ch, F, T]
    const Shape merged = dsp::subband_merge_shape({B, cfg_.sources.size(), cfg_.packed_channels() * k, cfg_.band_width(), T_}, k);
    return ad::reshape(h, merged);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return forward(ad::constant(x)).value(); }

 private:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)), layout_(parameter_layout(cfg_)) {
    for (std::size_t i = 0; i < layout_.size(); ++i) index_[layout_[i].name] = i;
  }

  const Var<T>& p(const std::string& name) const { return params_[index_.at(name)]; }

  Var<T> norm(const Var<T>& x, const std::string& prefix) const {
    return ad::instance_norm(x, p(prefix + ".gamma"), p(prefix + ".beta"), T(1e-5));
  }

  // IN -> GELU -> conv3x3 -> IN -> GELU -> (u + TDF(u)) -> conv3x3, plus identity.
  Var<T> block(const Var<T>& x, const std::string& pre) const {
    Var<T> a = ad::conv2d(ad::gelu(norm(x, pre + ".norm1")), p(pre + ".conv1.weight"), 1, 1);
    Var<T> u = ad::gelu(norm(a, pre + ".norm2"));
    Var<T> t = ad::linear_freq(u, p(pre + ".tdf.lin1.weight"));
    t = ad::linear_freq(ad::gelu(norm(t, pre + ".tdf.norm")), p(pre + ".tdf.lin2.weight"));
    u = ad::add(u, t);
    return ad::add(ad::conv2d(u, p(pre + ".conv2.weight"), 1, 1), x);
  }

  ModelConfig cfg_;
  std::vector<ParamSpec> layout_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Var<T>> params_;

  template <class U>
  friend class Model;
};

template <class T>
std::size_t param_count(const Model<T>& m) {
  return m.param_count();
}

}  // namespace demix::model
