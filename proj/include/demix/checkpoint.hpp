#pragma once

// Self-describing checkpoint files.
//
//   "DMX3" | u32 version | u64 header length | JSON header | payload
//
// The header holds the model config, optional training metadata and a tensor
// index name -> {shape, offset, nbytes}; offsets are relative to the payload
// start and tensors are stored in index order as little-endian float32.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "demix/training.hpp"

namespace demix::checkpoint {

using json = nlohmann::ordered_json;
using model::Model;
using model::ModelConfig;

inline constexpr char kMagic[4] = {'D', 'M', 'X', '3'};
inline constexpr std::uint32_t kVersion = 1;

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error("checkpoint", what) {}
};

inline json to_json(const ModelConfig& c) {
  json j;
  j["n_fft"] = c.stft.n_fft;
  j["hop_length"] = c.stft.hop_length;
  j["freq_bins"] = c.freq_bins;
  j["audio_channels"] = c.audio_channels;
  j["initial_channels"] = c.initial_channels;
  j["growth"] = c.growth;
  j["scales"] = c.scales;
  j["blocks_per_scale"] = c.blocks_per_scale;
  j["subbands"] = c.subbands;
  j["tdf_bottleneck"] = c.tdf_bottleneck;
  j["normalization"] = c.normalization;
  j["activation"] = c.activation;
  j["sources"] = json::array();
  for (Source s : c.sources) j["sources"].push_back(std::string(source_name(s)));
  return j;
}

inline ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.stft = {j.at("n_fft").get<std::size_t>(), j.at("hop_length").get<std::size_t>()};
    c.freq_bins = j.at("freq_bins").get<std::size_t>();
    c.audio_channels = j.at("audio_channels").get<std::size_t>();
    c.initial_channels = j.at("initial_channels").get<std::size_t>();
    c.growth = j.at("growth").get<std::size_t>();
    c.scales = j.at("scales").get<std::size_t>();
    c.blocks_per_scale = j.at("blocks_per_scale").get<std::size_t>();
    c.subbands = j.at("subbands").get<std::size_t>();
    c.tdf_bottleneck = j.at("tdf_bottleneck").get<std::size_t>();
    c.normalization = j.at("normalization").get<std::string>();
    c.activation = j.at("activation").get<std::string>();
    c.sources.clear();
    for (const auto& s : j.at("sources")) {
      const auto src = parse_source(s.get<std::string>());
      if (!src) throw CheckpointError("unknown source " + s.get<std::string>());
      c.sources.push_back(*src);
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed model config: ") + e.what());
  }
}

struct Contents {
  ModelConfig config;
  model::NamedTensors<float> weights;
  std::optional<training::TrainState> state;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline void put_tensor(std::string& out, const Tensor<float>& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &t[i], 4);
    put_u32(out, bits);
  }
}

}  // namespace detail

/// Serialises model weights and, when given, the optimizer state and rng.
inline std::string serialize(const Model<float>& m, const training::TrainState* state = nullptr) {
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  const auto& layout = m.layout();
  for (std::size_t i = 0; i < layout.size(); ++i) tensors.emplace_back(layout[i].name, &m.params()[i].value());
  json header;
  header["format"] = "DMX3";
  header["model_config"] = to_json(m.config());
  if (state) {
    if (state->adam.m.size() != layout.size() || state->adam.v.size() != layout.size())
      throw CheckpointError("optimizer state does not match the model");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      tensors.emplace_back("adam.m." + layout[i].name, &state->adam.m[i]);
      tensors.emplace_back("adam.v." + layout[i].name, &state->adam.v[i]);
    }
    json t;
    t["step"] = state->step;
    t["epoch"] = state->epoch;
    t["adam"] = {{"t", state->adam.t}, {"beta1", state->adam.beta1}, {"beta2", state->adam.beta2},
                 {"eps", state->adam.eps}};
    t["rng"] = state->rng_state();
    t["sdr_history"] = state->sdr_history;
    header["training"] = std::move(t);
  } else {
    header["training"] = nullptr;
  }
  json index = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::uint64_t nbytes = 4 * t->size();
    index[name] = {{"shape", t->shape()}, {"offset", offset}, {"nbytes", nbytes}};
    offset += nbytes;
  }
  header["tensors"] = std::move(index);

  const std::string h = header.dump();
  std::string out(kMagic, 4);
  detail::put_u32(out, kVersion);
  detail::put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : tensors) detail::put_tensor(out, *t);
  return out;
}

inline Contents deserialize(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw CheckpointError("not a DMX3 checkpoint");
  const auto version = detail::get_le(bytes, 4, 4);
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::get_le(bytes, 8, 8);
  if (hlen > bytes.size() - 16) throw CheckpointError("truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(16, hlen));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("unreadable header: ") + e.what());
  }
  const std::size_t payload = 16 + hlen;

  Contents c;
  c.config = model_config_from_json(header.at("model_config"));
  auto read = [&](const std::string& name, const Shape& expect) {
    if (!header["tensors"].contains(name)) throw CheckpointError("missing tensor " + name);
    const auto& e = header["tensors"][name];
    const Shape shape = e.at("shape").get<Shape>();
    if (shape != expect)
      throw CheckpointError("tensor " + name + " has shape " + shape_str(shape) + ", expected " + shape_str(expect));
    const auto offset = e.at("offset").get<std::uint64_t>(), nbytes = e.at("nbytes").get<std::uint64_t>();
    if (nbytes != 4 * shape_size(shape) || offset > bytes.size() - payload || nbytes > bytes.size() - payload - offset)
      throw CheckpointError("tensor " + name + " lies outside the payload");
    Tensor<float> t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const auto bits = static_cast<std::uint32_t>(detail::get_le(bytes, payload + offset + 4 * i, 4));
      std::memcpy(&t[i], &bits, 4);
    }
    return t;
  };
  const auto layout = model::parameter_layout(c.config);
  for (const auto& p : layout) c.weights.emplace_back(p.name, read(p.name, p.shape));
  if (!header["training"].is_null()) {
    const auto& t = header["training"];
    training::TrainState s;
    s.step = t.at("step").get<std::size_t>();
    s.epoch = t.at("epoch").get<std::size_t>();
    s.adam.t = t.at("adam").at("t").get<std::int64_t>();
    s.adam.beta1 = t["adam"].at("beta1").get<double>();
    s.adam.beta2 = t["adam"].at("beta2").get<double>();
    s.adam.eps = t["adam"].at("eps").get<double>();
    for (const auto& p : layout) {
      s.adam.m.push_back(read("adam.m." + p.name, p.shape));
      s.adam.v.push_back(read("adam.v." + p.name, p.shape));
    }
    s.set_rng_state(t.at("rng").get<std::string>());
    s.sdr_history = t.at("sdr_history").get<std::vector<double>>();
    c.state = std::move(s);
  }
  return c;
}

inline void save(const std::filesystem::path& path, const Model<float>& m,
                 const training::TrainState* state = nullptr) {
  const std::string bytes = serialize(m, state);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f || !f.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
    throw CheckpointError("cannot write " + path.string());
}

inline Contents load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const json::exception& e) {
    throw CheckpointError("malformed header in " + path.string() + ": " + e.what());
  }
}

inline Model<float> load_model(const std::filesystem::path& path) {
  const auto c = load(path);
  return Model<float>::from_weights(c.config, c.weights);
}

}  // namespace demix::checkpoint
