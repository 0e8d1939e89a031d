#pragma once

// Run configuration: an INI file whose sections and key names follow the
// hyperparameter table rows.
//
//   [stft]      n_fft, hop_length
//   [model]     freq_bins, initial_channels, growth, scales, blocks_per_scale,
//               subbands, tdf_bottleneck, normalization, activation,
//               audio_channels, sources
//   [training]  optimizer, learning_rate, batch_size, chunk_frames,
//               loss_mask_dims, q, steps_per_epoch, early_stop_window,
//               early_stop_delta, total_steps, checkpoint_every
//   [inference] overlap, chunk_frames
//   [run]       seed, train_dir, valid_dir
//
// Missing keys keep their defaults; unknown sections and keys are errors.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "demix/inference.hpp"
#include "demix/training.hpp"

namespace demix::config {

struct RunConfig {
  model::ModelConfig model;
  training::TrainConfig train;
  inference::SeparationPlan plan;
  std::size_t total_steps = 2000;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::optional<std::string> train_dir;
  std::optional<std::string> valid_dir;

  void validate() const {
    model.validate();
    train.validate(model);
    plan.validate(model.stft.hop_length, model.time_multiple());
  }
};

namespace detail {

inline const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s{
      {"stft", {"n_fft", "hop_length"}},
      {"model",
       {"freq_bins", "initial_channels", "growth", "scales", "blocks_per_scale", "subbands", "tdf_bottleneck",
        "normalization", "activation", "audio_channels", "sources"}},
      {"training",
       {"optimizer", "learning_rate", "batch_size", "chunk_frames", "loss_mask_dims", "q", "steps_per_epoch",
        "early_stop_window", "early_stop_delta", "total_steps", "checkpoint_every"}},
      {"inference", {"overlap", "chunk_frames"}},
      {"run", {"seed", "train_dir", "valid_dir"}},
  };
  return s;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t"), e = s.find_last_not_of(" \t");
  return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

template <class T>
T number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  if constexpr (std::is_unsigned_v<T>) {
    if (!text.empty() && text[0] == '-') throw ConfigError(key + " must be non-negative, got '" + text + "'");
  }
  is >> v;
  if (!is || !(is >> std::ws).eof()) throw ConfigError(key + " is not a valid number: '" + text + "'");
  return v;
}

}  // namespace detail

/// Parses INI text. `base` supplies values for keys the text omits.
inline RunConfig parse(const std::string& text, RunConfig base = {}) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("line " + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig c = std::move(base);
  for (const auto& [section, body] : tree) {
    const auto it = detail::schema().find(section);
    if (it == detail::schema().end()) {
      if (body.empty()) throw ConfigError("key '" + section + "' outside a section");
      throw ConfigError("unknown section [" + section + "]");
    }
    for (const auto& [key, node] : body) {
      if (!it->second.count(key)) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
      const std::string v = detail::trim(node.get_value<std::string>());
      const std::string where = section + "." + key;
      auto size = [&] { return detail::number<std::size_t>(where, v); };
      auto real = [&] { return detail::number<double>(where, v); };
      if (section == "stft") {
        (key == "n_fft" ? c.model.stft.n_fft : c.model.stft.hop_length) = size();
      } else if (section == "model") {
        if (key == "freq_bins") c.model.freq_bins = size();
        else if (key == "initial_channels") c.model.initial_channels = size();
        else if (key == "growth") c.model.growth = size();
        else if (key == "scales") c.model.scales = size();
        else if (key == "blocks_per_scale") c.model.blocks_per_scale = size();
        else if (key == "subbands") c.model.subbands = size();
        else if (key == "tdf_bottleneck") c.model.tdf_bottleneck = size();
        else if (key == "normalization") c.model.normalization = v;
        else if (key == "activation") c.model.activation = v;
        else if (key == "audio_channels") c.model.audio_channels = size();
        else if (key == "sources") {
          c.model.sources.clear();
          std::istringstream list(v);
          for (std::string item; std::getline(list, item, ',');) {
            const auto s = parse_source(detail::trim(item));
            if (!s) throw ConfigError("unknown source '" + detail::trim(item) + "' in " + where);
            c.model.sources.push_back(*s);
          }
        }
      } else if (section == "training") {
        if (key == "optimizer") {
          if (v != "Adam") throw ConfigError("only the Adam optimizer is supported, got '" + v + "'");
        } else if (key == "learning_rate") c.train.learning_rate = real();
        else if (key == "batch_size") c.train.batch_size = size();
        else if (key == "chunk_frames") c.train.chunk_frames = size();
        else if (key == "loss_mask_dims") {
          const auto d = training::parse_mask_dims(v);
          if (!d) throw ConfigError("loss_mask_dims must be none, batch or batch_time, got '" + v + "'");
          c.train.mask.dims = *d;
        }
        else if (key == "q") c.train.mask.q = v == "n/a" ? 1.0 : real();
        else if (key == "steps_per_epoch") c.train.steps_per_epoch = size();
        else if (key == "early_stop_window") c.train.early_stop_window = size();
        else if (key == "early_stop_delta") c.train.early_stop_delta = real();
        else if (key == "total_steps") c.total_steps = size();
        else if (key == "checkpoint_every") c.checkpoint_every = size();
      } else if (section == "inference") {
        (key == "overlap" ? c.plan.overlap : c.plan.chunk_frames) = size();
      } else if (section == "run") {
        if (key == "seed") c.train.seed = detail::number<std::uint64_t>(where, v);
        else if (key == "train_dir") c.train_dir = v;
        else if (key == "valid_dir") c.valid_dir = v;
      }
    }
  }
  if (const char* env = std::getenv("DEMIX_SEED"); env && *env) c.train.seed = detail::number<std::uint64_t>("DEMIX_SEED", env);
  c.validate();
  return c;
}

inline RunConfig load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  RunConfig c = parse(s.str());
  // relative dataset paths resolve against the config file's directory
  for (auto* p : {&c.train_dir, &c.valid_dir})
    if (*p && std::filesystem::path(**p).is_relative()) **p = (path.parent_path() / **p).lexically_normal().string();
  return c;
}

/// INI text that parses back to `c` (seed env override aside).
inline std::string to_ini(const RunConfig& c) {
  std::ostringstream o;
  o.precision(17);
  o << "[stft]\nn_fft = " << c.model.stft.n_fft << "\nhop_length = " << c.model.stft.hop_length << "\n\n";
  o << "[model]\nfreq_bins = " << c.model.freq_bins << "\ninitial_channels = " << c.model.initial_channels
    << "\ngrowth = " << c.model.growth << "\nscales = " << c.model.scales
    << "\nblocks_per_scale = " << c.model.blocks_per_scale << "\nsubbands = " << c.model.subbands
    << "\ntdf_bottleneck = " << c.model.tdf_bottleneck << "\nnormalization = " << c.model.normalization
    << "\nactivation = " << c.model.activation << "\naudio_channels = " << c.model.audio_channels << "\nsources = ";
  for (std::size_t i = 0; i < c.model.sources.size(); ++i)
    o << (i ? ", " : "") << source_name(c.model.sources[i]);
  o << "\n\n[training]\noptimizer = Adam\nlearning_rate = " << c.train.learning_rate
    << "\nbatch_size = " << c.train.batch_size << "\nchunk_frames = " << c.train.chunk_frames
    << "\nloss_mask_dims = " << training::mask_dims_name(c.train.mask.dims) << "\nq = " << c.train.mask.q
    << "\nsteps_per_epoch = " << c.train.steps_per_epoch << "\nearly_stop_window = " << c.train.early_stop_window
    << "\nearly_stop_delta = " << c.train.early_stop_delta << "\ntotal_steps = " << c.total_steps
    << "\ncheckpoint_every = " << c.checkpoint_every << "\n\n";
  o << "[inference]\noverlap = " << c.plan.overlap << "\nchunk_frames = " << c.plan.chunk_frames << "\n\n";
  o << "[run]\nseed = " << c.train.seed << "\n";
  if (c.train_dir) o << "train_dir = " << *c.train_dir << "\n";
  if (c.valid_dir) o << "valid_dir = " << *c.valid_dir << "\n";
  return o.str();
}

}  // namespace demix::config
