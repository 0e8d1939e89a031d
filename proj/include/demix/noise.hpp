#pragma once

// Label-noise and bleeding corruption of clean stems, with a manifest that
// replays the corruption exactly.

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "demix/audio.hpp"

namespace demix::noise {

using json = nlohmann::ordered_json;

enum class Mode { label_noise, bleeding };

inline std::string_view mode_name(Mode m) { return m == Mode::label_noise ? "label-noise" : "bleeding"; }

inline std::optional<Mode> parse_mode(std::string_view s) {
  if (s == "label-noise" || s == "label_noise") return Mode::label_noise;
  if (s == "bleeding") return Mode::bleeding;
  return std::nullopt;
}

struct CorruptionSpec {
  Mode mode = Mode::label_noise;
  double bleed_gain_db = -10.0;
  double p = 1.0;  // label noise: probability that a (track, class) stem is affected
  std::uint64_t seed = 0;

  void validate() const {
    if (!(bleed_gain_db < 0.0)) throw ConfigError("bleed gain must be negative dB, got " + std::to_string(bleed_gain_db));
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("affected fraction p must lie in [0, 1], got " + std::to_string(p));
  }
  double bleed_gain() const { return std::pow(10.0, bleed_gain_db / 20.0); }
};

/// Root mean square over all channels and samples.
inline double rms(const Waveform& w) {
  if (w.samples().empty()) return 0.0;
  double e = 0.0;
  for (float v : w.samples()) e += static_cast<double>(v) * v;
  return std::sqrt(e / static_cast<double>(w.samples().size()));
}

/// What was added to one stem.
struct ManifestEntry {
  std::size_t track = 0;
  Source source = Source::vocals;
  bool corrupted = false;
  std::vector<std::pair<std::size_t, Source>> donors;  // (track, class)
  double gain = 0.0;
  std::string note;
};

struct Manifest {
  CorruptionSpec spec;
  std::vector<std::string> track_names;
  std::vector<ManifestEntry> entries;
};

/// `donor` aligned at sample 0, cropped or zero-padded to `like`.
inline Waveform align(const Waveform& donor, const Waveform& like) {
  if (donor.channels() != like.channels() && donor.channels() != 1)
    throw ShapeError("noise-sim", "donor and target differ in channel count");
  Waveform d = ensure_channels(donor, like.channels());
  return d.slice(0, like.length());
}

/// stem + gain * sum(donors), computed identically on replay.
inline Waveform inject(const Waveform& clean, const std::vector<const Waveform*>& donors, double gain) {
  Waveform out = clean;
  const float g = static_cast<float>(gain);
  for (const Waveform* d : donors) {
    const Waveform a = align(*d, clean);
    for (std::size_t i = 0; i < out.samples().size(); ++i) out.samples()[i] += g * a.samples()[i];
  }
  return out;
}

struct Corrupted {
  std::vector<StemSet> stems;
  std::vector<Waveform> mixtures;
  Manifest manifest;
};

namespace detail {

inline std::vector<std::string> names_or_indices(const std::vector<std::string>& names, std::size_t n) {
  if (!names.empty()) {
    if (names.size() != n) throw ShapeError("noise-sim", "track name count differs from track count");
    return names;
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(std::to_string(i));
  return out;
}

inline void check_complete(const std::vector<StemSet>& clean) {
  for (std::size_t t = 0; t < clean.size(); ++t)
    if (!clean[t].complete()) throw ShapeError("noise-sim", "track " + std::to_string(t) + " lacks some stems");
}

}  // namespace detail

/// Rebuilds the corrupted dataset from clean stems and a manifest.
inline Corrupted apply_manifest(const std::vector<StemSet>& clean, const Manifest& m) {
  detail::check_complete(clean);
  Corrupted out;
  out.manifest = m;
  out.stems = clean;
  for (const auto& e : m.entries) {
    if (!e.corrupted) continue;
    if (e.track >= clean.size()) throw ShapeError("noise-sim", "manifest names a missing track");
    std::vector<const Waveform*> donors;
    for (const auto& [t, s] : e.donors) {
      if (t >= clean.size()) throw ShapeError("noise-sim", "manifest names a missing donor track");
      donors.push_back(&clean[t].at(s));
    }
    out.stems[e.track].set(e.source, inject(clean[e.track].at(e.source), donors, e.gain));
  }
  for (std::size_t t = 0; t < clean.size(); ++t)
    out.mixtures.push_back(m.spec.mode == Mode::label_noise ? out.stems[t].sum() : clean[t].sum());
  return out;
}

/// Each (track, class) is affected with probability p; an affected stem gets
/// one instrument of another class from another track at equal RMS.
inline Corrupted simulate_label_noise(const std::vector<StemSet>& clean, CorruptionSpec spec,
                                      const std::vector<std::string>& names = {}) {
  spec.mode = Mode::label_noise;
  spec.validate();
  detail::check_complete(clean);
  if (clean.size() < 2) throw ShapeError("noise-sim", "label noise needs at least two tracks");
  Manifest m{spec, detail::names_or_indices(names, clean.size()), {}};
  std::mt19937_64 rng(spec.seed);
  std::bernoulli_distribution affected(spec.p);
  std::uniform_int_distribution<std::size_t> other_class(0, kNumSources - 2), other_track(0, clean.size() - 2);
  for (std::size_t t = 0; t < clean.size(); ++t)
    for (Source s : kSources) {
      ManifestEntry e{t, s, false, {}, 0.0, ""};
      if (affected(rng)) {
        const Waveform& target = clean[t].at(s);
        for (int attempt = 0; attempt < 8 && !e.corrupted; ++attempt) {
          std::size_t dc = other_class(rng), dt = other_track(rng);
          if (dc >= index_of(s)) ++dc;
          if (dt >= t) ++dt;
          const Source ds = kSources[dc];
          const double donor_rms = rms(align(clean[dt].at(ds), target));
          if (donor_rms > 0.0) {
            e.corrupted = true;
            e.donors = {{dt, ds}};
            e.gain = rms(target) / donor_rms;
          }
        }
        if (!e.corrupted) e.note = "skipped: silent donor after 8 attempts";
      }
      m.entries.push_back(std::move(e));
    }
  return apply_manifest(clean, m);
}

/// Every stem gets all other classes of its own track at `bleed_gain_db`.
inline Corrupted simulate_bleeding(const std::vector<StemSet>& clean, CorruptionSpec spec,
                                   const std::vector<std::string>& names = {}) {
  spec.mode = Mode::bleeding;
  spec.validate();
  detail::check_complete(clean);
  Manifest m{spec, detail::names_or_indices(names, clean.size()), {}};
  const double g = spec.bleed_gain();
  for (std::size_t t = 0; t < clean.size(); ++t)
    for (Source s : kSources) {
      ManifestEntry e{t, s, true, {}, g, ""};
      for (Source o : kSources)
        if (o != s) e.donors.emplace_back(t, o);
      m.entries.push_back(std::move(e));
    }
  return apply_manifest(clean, m);
}

inline Corrupted simulate(const std::vector<StemSet>& clean, const CorruptionSpec& spec,
                          const std::vector<std::string>& names = {}) {
  return spec.mode == Mode::label_noise ? simulate_label_noise(clean, spec, names)
                                        : simulate_bleeding(clean, spec, names);
}

// ---------------------------------------------------------------------------
// manifest.json

inline json to_json(const Manifest& m) {
  json j;
  j["mode"] = mode_name(m.spec.mode);
  j["seed"] = m.spec.seed;
  j["p"] = m.spec.p;
  j["bleed_gain_db"] = m.spec.bleed_gain_db;
  j["tracks"] = m.track_names;
  j["stems"] = json::array();
  for (const auto& e : m.entries) {
    json s;
    s["track"] = m.track_names.at(e.track);
    s["class"] = source_name(e.source);
    s["corrupted"] = e.corrupted;
    s["gain"] = e.gain;
    s["donors"] = json::array();
    for (const auto& [t, c] : e.donors) s["donors"].push_back({{"track", m.track_names.at(t)}, {"class", source_name(c)}});
    if (!e.note.empty()) s["note"] = e.note;
    j["stems"].push_back(std::move(s));
  }
  return j;
}

inline Manifest manifest_from_json(const json& j) {
  try {
    Manifest m;
    const auto mode = parse_mode(j.at("mode").get<std::string>());
    if (!mode) throw ConfigError("manifest: unknown mode");
    m.spec.mode = *mode;
    m.spec.seed = j.at("seed").get<std::uint64_t>();
    m.spec.p = j.at("p").get<double>();
    m.spec.bleed_gain_db = j.at("bleed_gain_db").get<double>();
    m.track_names = j.at("tracks").get<std::vector<std::string>>();
    auto track_index = [&](const std::string& name) {
      for (std::size_t i = 0; i < m.track_names.size(); ++i)
        if (m.track_names[i] == name) return i;
      throw ConfigError("manifest: unknown track " + name);
    };
    auto source = [](const std::string& name) {
      const auto s = parse_source(name);
      if (!s) throw ConfigError("manifest: unknown class " + name);
      return *s;
    };
    for (const auto& s : j.at("stems")) {
      ManifestEntry e;
      e.track = track_index(s.at("track").get<std::string>());
      e.source = source(s.at("class").get<std::string>());
      e.corrupted = s.at("corrupted").get<bool>();
      e.gain = s.at("gain").get<double>();
      for (const auto& d : s.at("donors"))
        e.donors.emplace_back(track_index(d.at("track").get<std::string>()), source(d.at("class").get<std::string>()));
      if (s.contains("note")) e.note = s.at("note").get<std::string>();
      m.entries.push_back(std::move(e));
    }
    return m;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
}

}  // namespace demix::noise
