#pragma once

// Energy-ratio SDR, chunked cSDR and leaderboard-style aggregation.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "demix/audio.hpp"

namespace demix::eval {

using json = nlohmann::ordered_json;

inline constexpr double kEpsilon = 1e-7;

/// 10 log10((sum s^2 + eps) / (sum (s - est)^2 + eps)) over all channels.
inline double sdr(std::span<const float> ref, std::span<const float> est) {
  if (ref.size() != est.size())
    throw ShapeError("eval", "reference and estimate differ in size: " + std::to_string(ref.size()) + " vs " +
                                 std::to_string(est.size()));
  double num = 0, den = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double s = ref[i], d = s - static_cast<double>(est[i]);
    num += s * s;
    den += d * d;
  }
  return 10.0 * std::log10((num + kEpsilon) / (den + kEpsilon));
}

inline double sdr(const Waveform& ref, const Waveform& est) {
  if (!ref.same_layout(est)) throw ShapeError("eval", "reference and estimate differ in layout");
  return sdr(std::span<const float>(ref.samples()), std::span<const float>(est.samples()));
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ShapeError("eval", "median of nothing");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Per-chunk SDRs over non-overlapping chunks (final partial chunk dropped,
/// silent-reference chunks skipped).
inline std::vector<double> chunk_sdrs(const Waveform& ref, const Waveform& est, double chunk_seconds = 1.0) {
  if (!ref.same_layout(est)) throw ShapeError("eval", "reference and estimate differ in layout");
  const auto chunk = static_cast<std::size_t>(std::llround(chunk_seconds * ref.sample_rate()));
  if (chunk == 0) throw ShapeError("eval", "chunk length must be positive");
  std::vector<double> out;
  std::vector<float> r, e;
  for (std::size_t start = 0; start + chunk <= ref.length(); start += chunk) {
    r.clear();
    e.clear();
    double energy = 0;
    for (std::size_t c = 0; c < ref.channels(); ++c)
      for (std::size_t i = start; i < start + chunk; ++i) {
        r.push_back(ref.at(c, i));
        e.push_back(est.at(c, i));
        energy += double(ref.at(c, i)) * ref.at(c, i);
      }
    if (energy < kEpsilon) continue;
    out.push_back(sdr(std::span<const float>(r), std::span<const float>(e)));
  }
  return out;
}

/// Median of per-chunk SDRs; even counts take the midpoint of the middle two.
inline double csdr(const Waveform& ref, const Waveform& est, double chunk_seconds = 1.0) {
  const auto v = chunk_sdrs(ref, est, chunk_seconds);
  if (v.empty()) throw ShapeError("eval", "no usable chunks for cSDR");
  return median(v);
}

struct ClassScore {
  Source source;
  double sdr;
  std::optional<double> csdr;
};

struct TrackScore {
  std::string name;
  std::vector<ClassScore> classes;  // in class order
  double mean = 0;
};

inline TrackScore evaluate_track(const StemSet& ref, const StemSet& est, bool with_csdr = false,
                                 std::string name = {}) {
  if (ref.sources() != est.sources() || ref.count() == 0)
    throw ShapeError("eval", "reference and estimate class sets differ");
  TrackScore t{std::move(name), {}, 0};
  for (Source s : ref.sources()) {
    ClassScore c{s, sdr(ref.at(s), est.at(s)), std::nullopt};
    if (with_csdr) c.csdr = csdr(ref.at(s), est.at(s));
    t.mean += c.sdr;
    t.classes.push_back(c);
  }
  t.mean /= static_cast<double>(t.classes.size());
  return t;
}

struct EvalReport {
  std::vector<TrackScore> tracks;
  std::vector<std::pair<Source, double>> per_class_mean;
  double global_mean = 0;
  std::optional<std::vector<std::pair<Source, double>>> per_class_csdr;  // median over tracks
  std::optional<double> global_csdr;                                     // mean of class medians
};

inline EvalReport aggregate(std::vector<TrackScore> tracks) {
  if (tracks.empty()) throw ShapeError("eval", "nothing to aggregate");
  std::vector<Source> classes;
  for (const auto& c : tracks[0].classes) classes.push_back(c.source);
  bool all_csdr = true;
  for (const auto& t : tracks) {
    if (t.classes.size() != classes.size()) throw ShapeError("eval", "tracks were scored on different classes");
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (t.classes[i].source != classes[i]) throw ShapeError("eval", "tracks were scored on different classes");
      all_csdr = all_csdr && t.classes[i].csdr.has_value();
    }
  }
  EvalReport r;
  r.tracks = std::move(tracks);
  const double n = static_cast<double>(r.tracks.size());
  std::vector<std::pair<Source, double>> csdr_medians;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    double m = 0;
    std::vector<double> cs;
    for (const auto& t : r.tracks) {
      m += t.classes[i].sdr;
      if (all_csdr) cs.push_back(*t.classes[i].csdr);
    }
    r.per_class_mean.emplace_back(classes[i], m / n);
    r.global_mean += m / n;
    if (all_csdr) csdr_medians.emplace_back(classes[i], median(cs));
  }
  r.global_mean /= static_cast<double>(classes.size());
  if (all_csdr) {
    double g = 0;
    for (const auto& [s, v] : csdr_medians) g += v;
    r.global_csdr = g / static_cast<double>(csdr_medians.size());
    r.per_class_csdr = std::move(csdr_medians);
  }
  return r;
}

inline json to_json(const EvalReport& r) {
  auto by_class = [](const std::vector<std::pair<Source, double>>& v) {
    json j = json::object();
    for (const auto& [s, x] : v) j[std::string(source_name(s))] = x;
    return j;
  };
  json j;
  j["metric_variant"] = "energy-ratio";
  j["note"] =
      "SDR = 10 log10((sum s^2 + eps) / (sum (s - est)^2 + eps)), eps = 1e-7; cSDR uses the same ratio per 1 s "
      "chunk without BSS-eval distortion filters, median over chunks, then median over tracks";
  j["epsilon"] = kEpsilon;
  j["tracks"] = json::array();
  for (const auto& t : r.tracks) {
    json jt;
    jt["name"] = t.name;
    jt["per_class_sdr"] = json::object();
    for (const auto& c : t.classes) jt["per_class_sdr"][std::string(source_name(c.source))] = c.sdr;
    jt["mean"] = t.mean;
    if (r.per_class_csdr) {
      jt["per_class_csdr"] = json::object();
      for (const auto& c : t.classes) jt["per_class_csdr"][std::string(source_name(c.source))] = *c.csdr;
    }
    j["tracks"].push_back(std::move(jt));
  }
  j["per_class_mean"] = by_class(r.per_class_mean);
  j["global_mean"] = r.global_mean;
  if (r.per_class_csdr) j["csdr"] = {{"per_class_median", by_class(*r.per_class_csdr)}, {"global", *r.global_csdr}};
  return j;
}

/// Structural check of a report document; returns an empty string when valid.
inline std::string validate_report(const json& j) {
  auto is_class_map = [](const json& m) {
    if (!m.is_object() || m.empty()) return false;
    for (const auto& [k, v] : m.items())
      if (!parse_source(k) || !v.is_number()) return false;
    return true;
  };
  if (!j.is_object()) return "report is not an object";
  if (j.value("metric_variant", "") != "energy-ratio") return "metric_variant missing";
  if (!j.contains("tracks") || !j["tracks"].is_array() || j["tracks"].empty()) return "tracks missing";
  for (const auto& t : j["tracks"]) {
    if (!t.contains("name") || !t["name"].is_string()) return "track name missing";
    if (!t.contains("per_class_sdr") || !is_class_map(t["per_class_sdr"])) return "per_class_sdr malformed";
    if (!t.contains("mean") || !t["mean"].is_number()) return "track mean missing";
  }
  if (!j.contains("per_class_mean") || !is_class_map(j["per_class_mean"])) return "per_class_mean malformed";
  if (!j.contains("global_mean") || !j["global_mean"].is_number()) return "global_mean missing";
  if (j.contains("csdr")) {
    const auto& c = j["csdr"];
    if (!c.contains("per_class_median") || !is_class_map(c["per_class_median"]) || !c.contains("global") ||
        !c["global"].is_number())
      return "csdr malformed";
  }
  return {};
}

}  // namespace demix::eval
