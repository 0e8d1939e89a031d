#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "demix/audio.hpp"
#include "test_util.hpp"

using namespace demix;
namespace fs = std::filesystem;

namespace {

Waveform random_wave(std::size_t channels, std::size_t length, std::uint64_t seed, int rate = 44100) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Waveform w(channels, length, rate);
  for (auto& v : w.samples()) v = u(rng);
  return w;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& p, const std::vector<char>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

void write_track(const fs::path& dir, std::size_t length, std::uint64_t seed) {
  StemSet stems;
  for (Source s : kSources) stems.set(s, random_wave(2, length, seed + index_of(s)));
  const Waveform mix = stems.sum();
  save_track(dir, &mix, stems);
}

template <class E>
typename E::Kind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const E& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no exception";
  return {};
}

}  // namespace

TEST(Wav, ZerosFloat32) {
  test::TempDir dir;
  const auto path = dir.path / "z.wav";
  save_wav(path.string(), Waveform(2, 44100, 44100));
  const Waveform w = load_wav(path.string());
  EXPECT_EQ(w.channels(), 2u);
  EXPECT_EQ(w.length(), 44100u);
  EXPECT_EQ(w.sample_rate(), 44100);
  for (float v : w.samples()) EXPECT_EQ(v, 0.0f);
}

TEST(Wav, CanonicalByteLength) {
  test::TempDir dir;
  for (auto [fmt, bps] : {std::pair{WavFormat::pcm16, 2}, {WavFormat::pcm24, 3}, {WavFormat::float32, 4}}) {
    const auto path = dir.path / "x.wav";
    save_wav(path.string(), Waveform(2, 1000, 44100), fmt);
    EXPECT_EQ(fs::file_size(path), 44u + 2u * 1000u * bps);
  }
}

TEST(Wav, Float32RoundTripBitExact) {
  test::TempDir dir;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto x = random_wave(1 + seed % 2, 500 + 37 * seed, seed, 22050 + int(seed));
    save_wav((dir.path / "r.wav").string(), x);
    const auto y = load_wav((dir.path / "r.wav").string());
    EXPECT_EQ(y.sample_rate(), x.sample_rate());
    ASSERT_EQ(y.samples().size(), x.samples().size());
    EXPECT_EQ(std::memcmp(y.samples().data(), x.samples().data(), x.samples().size() * sizeof(float)), 0);
  }
}

TEST(Wav, PcmRoundTripWithinQuantizationBound) {
  test::TempDir dir;
  const auto x = random_wave(2, 4000, 3);
  for (auto [fmt, bits] : {std::pair{WavFormat::pcm16, 16}, {WavFormat::pcm24, 24}}) {
    save_wav((dir.path / "q.wav").string(), x, fmt);
    const auto y = load_wav((dir.path / "q.wav").string());
    double m = 0;
    for (std::size_t i = 0; i < x.samples().size(); ++i)
      m = std::max(m, std::abs(double(x.samples()[i]) - y.samples()[i]));
    EXPECT_LE(m, 1.0 / std::ldexp(1.0, bits - 1)) << bits;
  }
}

TEST(Wav, Pcm16NegativeFullScaleIsMinusOne) {
  test::TempDir dir;
  const auto path = dir.path / "m.wav";
  save_wav(path.string(), Waveform(1, 2, 44100), WavFormat::pcm16);
  auto bytes = read_bytes(path);
  bytes[44] = 0x00;  // first sample -> 0x8000
  bytes[45] = static_cast<char>(0x80);
  write_bytes(path, bytes);
  EXPECT_EQ(load_wav(path.string()).at(0, 0), -1.0f);
}

TEST(Wav, ByteLevelIdempotence) {
  test::TempDir dir;
  for (WavFormat fmt : {WavFormat::pcm16, WavFormat::pcm24, WavFormat::float32}) {
    const auto a = dir.path / "a.wav", b = dir.path / "b.wav";
    save_wav(a.string(), random_wave(2, 777, 4), fmt);
    save_wav(b.string(), load_wav(a.string()), fmt);
    EXPECT_EQ(read_bytes(a), read_bytes(b));
  }
}

TEST(Wav, ErrorKinds) {
  test::TempDir dir;
  const auto path = dir.path / "e.wav";
  using K = WavError::Kind;
  EXPECT_EQ(kind_of<WavError>([&] { load_wav((dir.path / "none.wav").string()); }), K::io);

  save_wav(path.string(), random_wave(2, 100, 5), WavFormat::pcm16);
  const auto good = read_bytes(path);

  auto bad = good;
  std::memcpy(bad.data(), "RIFX", 4);
  write_bytes(path, bad);
  EXPECT_EQ(kind_of<WavError>([&] { load_wav(path.string()); }), K::malformed_header);

  bad = good;
  bad[20] = 2;  // format tag: ADPCM
  write_bytes(path, bad);
  EXPECT_EQ(kind_of<WavError>([&] { load_wav(path.string()); }), K::unsupported_codec);

  bad = good;
  bad.resize(bad.size() - 10);
  write_bytes(path, bad);
  EXPECT_EQ(kind_of<WavError>([&] { load_wav(path.string()); }), K::truncated_payload);

  bad = good;
  bad.resize(20);
  write_bytes(path, bad);
  EXPECT_EQ(kind_of<WavError>([&] { load_wav(path.string()); }), K::malformed_header);

  Waveform nan(1, 3, 44100);
  nan.at(0, 1) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_EQ(kind_of<WavError>([&] { save_wav(path.string(), nan); }), K::non_finite);
  EXPECT_EQ(kind_of<WavError>([&] { save_wav((dir.path / "no/such/dir.wav").string(), nan.slice(0, 1)); }), K::io);
}

TEST(Wav, MonoWidenedOnRequest) {
  const Waveform m = random_wave(1, 10, 6);
  const Waveform s = ensure_channels(m, 2);
  EXPECT_EQ(s.channels(), 2u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(s.at(1, i), m.at(0, i));
}

TEST(Track, LoadsAlignedStemsWithZeroResidual) {
  test::TempDir dir;
  write_track(dir.path / "t", 1000, 10);
  const Track t = load_track(dir.path / "t");
  EXPECT_TRUE(t.stems.complete());
  EXPECT_EQ(t.mixture.length(), 1000u);
  // mixture was written as the float sum of the same float stems
  EXPECT_EQ(mixture_residual(t.mixture, t.stems), 0.0);
}

TEST(Track, MissingStemNamesClass) {
  test::TempDir dir;
  write_track(dir.path / "t", 100, 11);
  fs::remove(dir.path / "t" / "bass.wav");
  try {
    load_track(dir.path / "t");
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_EQ(e.kind(), DatasetError::Kind::missing_file);
    EXPECT_NE(std::string(e.what()).find("bass"), std::string::npos);
  }
}

TEST(Track, LengthAndRateMismatch) {
  test::TempDir dir;
  write_track(dir.path / "t", 100, 12);
  save_wav((dir.path / "t" / "vocals.wav").string(), random_wave(2, 101, 1));
  EXPECT_EQ(kind_of<DatasetError>([&] { load_track(dir.path / "t"); }), DatasetError::Kind::length_mismatch);
  save_wav((dir.path / "t" / "vocals.wav").string(), random_wave(2, 100, 1, 48000));
  EXPECT_EQ(kind_of<DatasetError>([&] { load_track(dir.path / "t"); }), DatasetError::Kind::rate_mismatch);
}

TEST(Dataset, EmptyRoot) {
  test::TempDir dir;
  const auto idx = scan_dataset(dir.path);
  EXPECT_TRUE(idx.tracks.empty());
  EXPECT_TRUE(idx.warnings.empty());
}

TEST(Dataset, MissingRoot) {
  EXPECT_EQ(kind_of<DatasetError>([] { scan_dataset("/nonexistent/demix/root"); }), DatasetError::Kind::missing_root);
}

TEST(Dataset, ValidAndInvalidTracks) {
  test::TempDir dir;
  write_track(dir.path / "c_song", 300, 20);
  write_track(dir.path / "a_song", 200, 21);
  write_track(dir.path / "b_song", 250, 22);
  write_track(dir.path / "broken", 100, 23);
  fs::remove(dir.path / "broken" / "other.wav");

  const auto idx = scan_dataset(dir.path);
  ASSERT_EQ(idx.tracks.size(), 3u);
  EXPECT_EQ(idx.warnings.size(), 1u);
  EXPECT_EQ(idx.tracks[0].name, "a_song");
  EXPECT_EQ(idx.tracks[1].name, "b_song");
  EXPECT_EQ(idx.tracks[2].name, "c_song");
  for (const auto& r : idx.tracks) EXPECT_EQ(r.length, load_track(r.dir).mixture.length());

  const auto again = scan_dataset(dir.path);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(again.tracks[i].name, idx.tracks[i].name);
}
