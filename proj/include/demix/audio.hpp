#pragma once

// PCM/float WAV input and output, stem sets, and dataset enumeration for the
// layout <root>/<track>/{mixture,vocals,drums,bass,other}.wav.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "demix/error.hpp"

namespace demix {

enum class Source : std::uint8_t { vocals = 0, drums = 1, bass = 2, other = 3 };

inline constexpr std::array<Source, 4> kSources{Source::vocals, Source::drums, Source::bass, Source::other};
inline constexpr std::size_t kNumSources = kSources.size();

inline constexpr std::string_view source_name(Source s) {
  constexpr std::array<std::string_view, 4> names{"vocals", "drums", "bass", "other"};
  return names[static_cast<std::size_t>(s)];
}

inline std::optional<Source> parse_source(std::string_view name) {
  for (Source s : kSources)
    if (source_name(s) == name) return s;
  return std::nullopt;
}

inline constexpr std::size_t index_of(Source s) { return static_cast<std::size_t>(s); }

/// Multichannel audio, stored channel-major.
class Waveform {
 public:
  Waveform() = default;
  Waveform(std::size_t channels, std::size_t length, int sample_rate)
      : channels_(channels), length_(length), sample_rate_(sample_rate), data_(channels * length, 0.0f) {
    if (sample_rate <= 0) throw ShapeError("audio-io", "sample rate must be positive");
  }
  Waveform(std::size_t channels, int sample_rate, std::vector<float> samples)
      : channels_(channels), sample_rate_(sample_rate), data_(std::move(samples)) {
    if (sample_rate <= 0) throw ShapeError("audio-io", "sample rate must be positive");
    if (channels == 0 || data_.size() % channels)
      throw ShapeError("audio-io", "sample count not divisible by channel count");
    length_ = data_.size() / channels;
  }

  std::size_t channels() const noexcept { return channels_; }
  std::size_t length() const noexcept { return length_; }
  int sample_rate() const noexcept { return sample_rate_; }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> channel(std::size_t c) { return {data_.data() + c * length_, length_}; }
  std::span<const float> channel(std::size_t c) const { return {data_.data() + c * length_, length_}; }
  float& at(std::size_t c, std::size_t i) { return data_[c * length_ + i]; }
  float at(std::size_t c, std::size_t i) const { return data_[c * length_ + i]; }

  std::vector<float>& samples() noexcept { return data_; }
  const std::vector<float>& samples() const noexcept { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  bool same_layout(const Waveform& o) const {
    return channels_ == o.channels_ && length_ == o.length_ && sample_rate_ == o.sample_rate_;
  }

  /// Samples [begin, begin + length) of every channel; positions outside the
  /// signal read as zero.
  Waveform slice(long long begin, std::size_t length) const {
    Waveform out(channels_, length, sample_rate_);
    for (std::size_t c = 0; c < channels_; ++c)
      for (std::size_t i = 0; i < length; ++i) {
        const long long src = begin + static_cast<long long>(i);
        if (src >= 0 && src < static_cast<long long>(length_)) out.at(c, i) = at(c, static_cast<std::size_t>(src));
      }
    return out;
  }

  friend bool operator==(const Waveform&, const Waveform&) = default;

 private:
  std::size_t channels_ = 0;
  std::size_t length_ = 0;
  int sample_rate_ = 0;
  std::vector<float> data_;
};

/// Mono input is duplicated to `channels`; other mismatches are errors.
inline Waveform ensure_channels(Waveform w, std::size_t channels) {
  if (w.channels() == channels) return w;
  if (w.channels() != 1)
    throw ShapeError("audio-io", "cannot map " + std::to_string(w.channels()) + " channels to " +
                                     std::to_string(channels));
  std::vector<float> out;
  out.reserve(w.length() * channels);
  for (std::size_t c = 0; c < channels; ++c) out.insert(out.end(), w.samples().begin(), w.samples().end());
  return Waveform(channels, w.sample_rate(), std::move(out));
}

/// Per-class waveforms sharing rate, channel count and length. A set may hold
/// fewer than four classes (e.g. the output of a single-source model).
class StemSet {
 public:
  bool has(Source s) const { return stems_[index_of(s)].has_value(); }
  bool complete() const {
    return std::all_of(stems_.begin(), stems_.end(), [](const auto& w) { return w.has_value(); });
  }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(stems_.begin(), stems_.end(), [](const auto& w) { return w.has_value(); }));
  }
  std::vector<Source> sources() const {
    std::vector<Source> out;
    for (Source s : kSources)
      if (has(s)) out.push_back(s);
    return out;
  }

  const Waveform& at(Source s) const {
    if (!has(s)) throw ShapeError("audio-io", "stem set has no " + std::string(source_name(s)) + " stem");
    return *stems_[index_of(s)];
  }
  Waveform& at(Source s) {
    if (!has(s)) throw ShapeError("audio-io", "stem set has no " + std::string(source_name(s)) + " stem");
    return *stems_[index_of(s)];
  }

  void set(Source s, Waveform w) {
    for (const auto& other : stems_)
      if (other && !other->same_layout(w))
        throw ShapeError("audio-io", std::string(source_name(s)) + " stem layout differs from the other stems");
    stems_[index_of(s)] = std::move(w);
  }

  /// Layout shared by the stems; requires at least one stem.
  const Waveform& any() const {
    for (const auto& w : stems_)
      if (w) return *w;
    throw ShapeError("audio-io", "empty stem set");
  }

  /// Sample-wise sum of all present stems.
  Waveform sum() const {
    const Waveform& ref = any();
    Waveform out(ref.channels(), ref.length(), ref.sample_rate());
    for (const auto& w : stems_)
      if (w)
        for (std::size_t i = 0; i < out.samples().size(); ++i) out.samples()[i] += w->samples()[i];
    return out;
  }

  friend bool operator==(const StemSet&, const StemSet&) = default;

 private:
  std::array<std::optional<Waveform>, kNumSources> stems_;
};

// ---------------------------------------------------------------------------
// WAV

enum class WavFormat { pcm16, pcm24, float32 };

class WavError : public Error {
 public:
  enum class Kind { io, malformed_header, unsupported_codec, truncated_payload, non_finite };

  WavError(Kind kind, const std::string& what) : Error("audio-io", what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct WavInfo {
  std::size_t channels = 0;
  int sample_rate = 0;
  std::size_t length = 0;  // frames
  WavFormat format = WavFormat::pcm16;
};

namespace wav_detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

inline std::size_t bytes_per_sample(WavFormat f) {
  switch (f) {
    case WavFormat::pcm16: return 2;
    case WavFormat::pcm24: return 3;
    case WavFormat::float32: return 4;
  }
  return 0;
}

struct Parsed {
  WavInfo info;
  std::streamoff data_offset = 0;
  std::uint32_t data_bytes = 0;
};

inline Parsed parse_header(std::ifstream& in, const std::string& path) {
  using Kind = WavError::Kind;
  unsigned char riff[12];
  if (!in.read(reinterpret_cast<char*>(riff), 12) || std::memcmp(riff, "RIFF", 4) || std::memcmp(riff + 8, "WAVE", 4))
    throw WavError(Kind::malformed_header, "not a RIFF/WAVE file: " + path);

  Parsed p;
  bool have_fmt = false;
  std::uint16_t tag = 0, bits = 0, block_align = 0;
  for (;;) {
    unsigned char ch[8];
    if (!in.read(reinterpret_cast<char*>(ch), 8))
      throw WavError(Kind::malformed_header, "missing data chunk in " + path);
    const std::uint32_t size = read_u32(ch + 4);
    if (!std::memcmp(ch, "fmt ", 4)) {
      if (size < 16) throw WavError(Kind::malformed_header, "fmt chunk too short in " + path);
      std::vector<unsigned char> fmt(size);
      if (!in.read(reinterpret_cast<char*>(fmt.data()), size))
        throw WavError(Kind::malformed_header, "truncated fmt chunk in " + path);
      tag = read_u16(fmt.data());
      p.info.channels = read_u16(fmt.data() + 2);
      p.info.sample_rate = static_cast<int>(read_u32(fmt.data() + 4));
      block_align = read_u16(fmt.data() + 12);
      bits = read_u16(fmt.data() + 14);
      if (tag == 0xFFFE && size >= 26) tag = read_u16(fmt.data() + 24);  // extensible: sub-format GUID
      have_fmt = true;
    } else if (!std::memcmp(ch, "data", 4)) {
      if (!have_fmt) throw WavError(Kind::malformed_header, "data chunk before fmt chunk in " + path);
      p.data_offset = in.tellg();
      p.data_bytes = size;
      break;
    } else {
      in.seekg(size + (size & 1u), std::ios::cur);
    }
    if (size & 1u && !std::memcmp(ch, "fmt ", 4)) in.seekg(1, std::ios::cur);
  }

  if (tag == 1 && bits == 16)
    p.info.format = WavFormat::pcm16;
  else if (tag == 1 && bits == 24)
    p.info.format = WavFormat::pcm24;
  else if (tag == 3 && bits == 32)
    p.info.format = WavFormat::float32;
  else
    throw WavError(Kind::unsupported_codec, "unsupported codec (format tag " + std::to_string(tag) + ", " +
                                                std::to_string(bits) + " bits) in " + path);
  if (p.info.channels < 1 || p.info.channels > 2)
    throw WavError(Kind::unsupported_codec, std::to_string(p.info.channels) + " channels unsupported in " + path);
  if (p.info.sample_rate <= 0) throw WavError(Kind::malformed_header, "zero sample rate in " + path);
  const std::size_t frame_bytes = p.info.channels * bytes_per_sample(p.info.format);
  if (block_align != frame_bytes) throw WavError(Kind::malformed_header, "inconsistent block alignment in " + path);
  p.info.length = p.data_bytes / frame_bytes;
  return p;
}

inline std::ifstream open(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WavError(WavError::Kind::io, "cannot open " + path);
  return in;
}

}  // namespace wav_detail

/// Reads only the header.
inline WavInfo probe_wav(const std::string& path) {
  auto in = wav_detail::open(path);
  return wav_detail::parse_header(in, path).info;
}

/// Integer PCM is scaled to [-1, 1) by 2^(bits-1); float payloads pass
/// through unchanged.
inline Waveform load_wav(const std::string& path) {
  using Kind = WavError::Kind;
  auto in = wav_detail::open(path);
  const auto p = wav_detail::parse_header(in, path);
  const std::size_t bps = wav_detail::bytes_per_sample(p.info.format);
  const std::size_t nch = p.info.channels, len = p.info.length;
  if (p.data_bytes % (nch * bps))
    throw WavError(Kind::truncated_payload, "data chunk size not a whole number of frames in " + path);

  std::vector<unsigned char> raw(len * nch * bps);
  in.seekg(p.data_offset);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw WavError(Kind::truncated_payload, "payload shorter than declared in " + path);

  Waveform w(nch, len, p.info.sample_rate);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t c = 0; c < nch; ++c) {
      const unsigned char* s = raw.data() + (i * nch + c) * bps;
      float v = 0.0f;
      switch (p.info.format) {
        case WavFormat::pcm16:
          v = static_cast<float>(static_cast<std::int16_t>(wav_detail::read_u16(s))) / 32768.0f;
          break;
        case WavFormat::pcm24: {
          std::int32_t x = std::int32_t(s[0]) | (std::int32_t(s[1]) << 8) | (std::int32_t(s[2]) << 16);
          if (x & 0x800000) x -= 0x1000000;
          v = static_cast<float>(x) / 8388608.0f;
          break;
        }
        case WavFormat::float32: {
          const std::uint32_t bitsv = wav_detail::read_u32(s);
          std::memcpy(&v, &bitsv, 4);
          if (!std::isfinite(v)) throw WavError(Kind::non_finite, "non-finite sample in " + path);
          break;
        }
      }
      w.at(c, i) = v;
    }
  return w;
}

/// Writes a canonical 44-byte-header WAV file.
inline void save_wav(const std::string& path, const Waveform& w, WavFormat format = WavFormat::float32) {
  using Kind = WavError::Kind;
  if (!w.all_finite()) throw WavError(Kind::non_finite, "refusing to write non-finite samples to " + path);
  const std::size_t bps = wav_detail::bytes_per_sample(format);
  const std::size_t data_bytes = w.channels() * w.length() * bps;
  std::vector<unsigned char> out;
  out.reserve(44 + data_bytes);
  auto tag = [&](const char* t) { out.insert(out.end(), t, t + 4); };
  tag("RIFF");
  wav_detail::put_u32(out, static_cast<std::uint32_t>(36 + data_bytes));
  tag("WAVE");
  tag("fmt ");
  wav_detail::put_u32(out, 16);
  wav_detail::put_u16(out, format == WavFormat::float32 ? 3 : 1);
  wav_detail::put_u16(out, static_cast<std::uint16_t>(w.channels()));
  wav_detail::put_u32(out, static_cast<std::uint32_t>(w.sample_rate()));
  wav_detail::put_u32(out, static_cast<std::uint32_t>(w.sample_rate() * w.channels() * bps));
  wav_detail::put_u16(out, static_cast<std::uint16_t>(w.channels() * bps));
  wav_detail::put_u16(out, static_cast<std::uint16_t>(bps * 8));
  tag("data");
  wav_detail::put_u32(out, static_cast<std::uint32_t>(data_bytes));

  for (std::size_t i = 0; i < w.length(); ++i)
    for (std::size_t c = 0; c < w.channels(); ++c) {
      const float v = w.at(c, i);
      switch (format) {
        case WavFormat::pcm16: {
          const long q = std::clamp(std::lround(static_cast<double>(v) * 32768.0), -32768L, 32767L);
          wav_detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
          break;
        }
        case WavFormat::pcm24: {
          const long q = std::clamp(std::lround(static_cast<double>(v) * 8388608.0), -8388608L, 8388607L);
          const auto u = static_cast<std::uint32_t>(q);
          out.push_back(static_cast<unsigned char>(u));
          out.push_back(static_cast<unsigned char>(u >> 8));
          out.push_back(static_cast<unsigned char>(u >> 16));
          break;
        }
        case WavFormat::float32: {
          std::uint32_t bitsv;
          std::memcpy(&bitsv, &v, 4);
          wav_detail::put_u32(out, bitsv);
          break;
        }
      }
    }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f || !f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size())))
    throw WavError(Kind::io, "cannot write " + path);
}

// ---------------------------------------------------------------------------
// Tracks and datasets

class DatasetError : public Error {
 public:
  enum class Kind { missing_root, missing_file, length_mismatch, rate_mismatch, channel_mismatch };

  DatasetError(Kind kind, const std::string& what) : Error("audio-io", what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct Track {
  Waveform mixture;
  StemSet stems;
};

inline std::filesystem::path stem_path(const std::filesystem::path& dir, Source s) {
  return dir / (std::string(source_name(s)) + ".wav");
}

/// Loads mixture.wav and all four stems. Mono files are widened to
/// `channels` when given. Either everything loads or an error is thrown.
inline Track load_track(const std::filesystem::path& dir, std::optional<std::size_t> channels = std::nullopt) {
  using Kind = DatasetError::Kind;
  const auto mix_path = dir / "mixture.wav";
  if (!std::filesystem::exists(mix_path))
    throw DatasetError(Kind::missing_file, "missing mixture file " + mix_path.string());
  for (Source s : kSources)
    if (!std::filesystem::exists(stem_path(dir, s)))
      throw DatasetError(Kind::missing_file, "missing " + std::string(source_name(s)) + " stem " +
                                                 stem_path(dir, s).string());

  auto load = [&](const std::filesystem::path& p) {
    Waveform w = load_wav(p.string());
    return channels ? ensure_channels(std::move(w), *channels) : w;
  };
  Track t;
  t.mixture = load(mix_path);
  for (Source s : kSources) {
    Waveform w = load(stem_path(dir, s));
    const std::string name(source_name(s));
    if (w.sample_rate() != t.mixture.sample_rate())
      throw DatasetError(Kind::rate_mismatch, name + " sample rate differs from mixture in " + dir.string());
    if (w.length() != t.mixture.length())
      throw DatasetError(Kind::length_mismatch, name + " length " + std::to_string(w.length()) +
                                                    " differs from mixture length " +
                                                    std::to_string(t.mixture.length()) + " in " + dir.string());
    if (w.channels() != t.mixture.channels())
      throw DatasetError(Kind::channel_mismatch, name + " channel count differs from mixture in " + dir.string());
    t.stems.set(s, std::move(w));
  }
  return t;
}

/// Writes mixture.wav (if non-empty) and every present stem into `dir`.
inline void save_track(const std::filesystem::path& dir, const Waveform* mixture, const StemSet& stems,
                       WavFormat format = WavFormat::float32) {
  std::filesystem::create_directories(dir);
  if (mixture) save_wav((dir / "mixture.wav").string(), *mixture, format);
  for (Source s : stems.sources()) save_wav(stem_path(dir, s).string(), stems.at(s), format);
}

/// max |mixture - sum(stems)| over all samples.
inline double mixture_residual(const Waveform& mixture, const StemSet& stems) {
  const Waveform total = stems.sum();
  if (!total.same_layout(mixture)) throw ShapeError("audio-io", "mixture and stems differ in layout");
  double m = 0.0;
  for (std::size_t i = 0; i < total.samples().size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(mixture.samples()[i]) - total.samples()[i]));
  return m;
}

struct TrackRecord {
  std::string name;
  std::filesystem::path dir;
  std::size_t length = 0;  // samples per channel
  int sample_rate = 0;
};

struct DatasetIndex {
  std::vector<TrackRecord> tracks;
  std::vector<std::string> warnings;
};

/// One record per valid track directory, sorted by name. Invalid
/// subdirectories are reported as warnings.
inline DatasetIndex scan_dataset(const std::filesystem::path& root) {
  using Kind = DatasetError::Kind;
  std::error_code ec;
  if (!std::filesystem::is_directory(root, ec))
    throw DatasetError(Kind::missing_root, "dataset root missing or unreadable: " + root.string());

  std::vector<std::filesystem::path> dirs;
  for (const auto& entry : std::filesystem::directory_iterator(root, ec))
    if (entry.is_directory()) dirs.push_back(entry.path());
  if (ec) throw DatasetError(Kind::missing_root, "cannot list " + root.string() + ": " + ec.message());
  std::sort(dirs.begin(), dirs.end(), [](const auto& a, const auto& b) { return a.filename() < b.filename(); });

  DatasetIndex index;
  for (const auto& dir : dirs) {
    try {
      const WavInfo mix = probe_wav((dir / "mixture.wav").string());
      for (Source s : kSources) {
        const auto p = stem_path(dir, s);
        if (!std::filesystem::exists(p)) throw DatasetError(Kind::missing_file, "missing " + p.filename().string());
        const WavInfo info = probe_wav(p.string());
        if (info.length != mix.length)
          throw DatasetError(Kind::length_mismatch, std::string(source_name(s)) + " length differs from mixture");
        if (info.sample_rate != mix.sample_rate)
          throw DatasetError(Kind::rate_mismatch, std::string(source_name(s)) + " sample rate differs from mixture");
      }
      index.tracks.push_back({dir.filename().string(), dir, mix.length, mix.sample_rate});
    } catch (const Error& e) {
      index.warnings.push_back(dir.filename().string() + ": " + e.what());
    }
  }
  return index;
}

}  // namespace demix
