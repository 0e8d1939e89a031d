#pragma once

// The `demix` command line: train, separate, evaluate, simulate-noise, blend
// and make-toy. Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "demix/checkpoint.hpp"
#include "demix/config.hpp"
#include "demix/eval.hpp"
#include "demix/inference.hpp"
#include "demix/noise.hpp"
#include "demix/synth.hpp"
#include "demix/training.hpp"

namespace demix::cli {

namespace fs = std::filesystem;

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("cli", what) {}
};

// ---------------------------------------------------------------------------
// Stem directories

/// Whether `dir` directly holds at least one <class>.wav file.
inline bool is_stem_dir(const fs::path& dir) {
  for (Source s : kSources)
    if (fs::exists(stem_path(dir, s))) return true;
  return false;
}

/// Every <class>.wav present in `dir`; all must share one layout.
inline StemSet load_stems(const fs::path& dir) {
  StemSet out;
  for (Source s : kSources) {
    const auto p = stem_path(dir, s);
    if (!fs::exists(p)) continue;
    Waveform w = load_wav(p.string());
    if (out.count() && !w.same_layout(out.any()))
      throw DatasetError(DatasetError::Kind::length_mismatch, p.string() + " differs in layout from its siblings");
    out.set(s, std::move(w));
  }
  if (!out.count()) throw DatasetError(DatasetError::Kind::missing_file, "no stem files in " + dir.string());
  return out;
}

/// A single stem directory, or the sorted stem subdirectories of a root.
inline std::vector<std::pair<std::string, fs::path>> stem_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw DatasetError(DatasetError::Kind::missing_root, "not a directory: " + root.string());
  if (is_stem_dir(root)) return {{root.filename().string(), root}};
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && is_stem_dir(e.path())) out.emplace_back(e.path().filename().string(), e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw DatasetError(DatasetError::Kind::missing_file, "no stem directories under " + root.string());
  return out;
}

struct LoadedDataset {
  std::vector<std::string> names;
  std::vector<Track> tracks;
};

inline LoadedDataset load_dataset(const fs::path& root, std::optional<std::size_t> channels, std::ostream& err) {
  const auto index = scan_dataset(root);
  for (const auto& w : index.warnings) err << "audio-io: warning: " << w << '\n';
  if (index.tracks.empty()) throw DatasetError(DatasetError::Kind::missing_file, "no valid tracks under " + root.string());
  LoadedDataset d;
  for (const auto& t : index.tracks) {
    d.names.push_back(t.name);
    d.tracks.push_back(load_track(t.dir, channels));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Weight specs

inline double parse_weight(const std::string& s) {
  std::size_t used = 0;
  double w = 0;
  try {
    w = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw UsageError("bad weight '" + s + "'");
  return w;
}

/// "w1,w2,..." with one entry per estimate; an entry is either one weight
/// for every class or four colon-separated weights in class order
/// (vocals:drums:bass:other).
inline inference::BlendSpec parse_blend_weights(const std::string& spec, std::size_t n) {
  inference::BlendSpec out;
  std::istringstream list(spec);
  for (std::string entry; std::getline(list, entry, ',');) {
    inference::BlendEntry e;
    e.id = std::to_string(out.entries.size());
    std::vector<double> ws;
    std::istringstream parts(entry);
    for (std::string p; std::getline(parts, p, ':');) ws.push_back(parse_weight(p));
    if (ws.size() == 1) e.weights.fill(ws[0]);
    else if (ws.size() == kNumSources) std::copy(ws.begin(), ws.end(), e.weights.begin());
    else throw UsageError("blend weight entry '" + entry + "' needs 1 or 4 values");
    out.entries.push_back(e);
  }
  if (out.entries.size() != n)
    throw UsageError("got " + std::to_string(out.entries.size()) + " blend weight entries for " + std::to_string(n) +
                     " inputs");
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct TrainArgs {
  std::string config, data, out, resume, valid;
  std::optional<std::size_t> steps;
  std::size_t threads = 1;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  config::RunConfig rc = config::load(a.config);
  if (a.steps) rc.total_steps = *a.steps;
  const auto& mc = rc.model;
  const auto data = load_dataset(a.data, mc.audio_channels, err);
  std::vector<StemSet> pool;
  for (const auto& t : data.tracks) pool.push_back(t.stems);

  std::optional<LoadedDataset> valid;
  const std::string valid_dir = !a.valid.empty() ? a.valid : rc.valid_dir.value_or("");
  if (!valid_dir.empty()) valid = load_dataset(valid_dir, mc.audio_channels, err);

  model::Model<float> m = model::Model<float>::build(mc, rc.train.seed);
  training::TrainState state = training::initial_state(m, rc.train.seed);
  if (!a.resume.empty()) {
    auto ck = checkpoint::load(a.resume);
    if (!(ck.config == mc)) throw ConfigError("checkpoint " + a.resume + " was trained with a different model config");
    if (!ck.state) throw ConfigError("checkpoint " + a.resume + " holds no training state");
    m = model::Model<float>::from_weights(ck.config, ck.weights);
    state = std::move(*ck.state);
  }

  fs::create_directories(a.out);
  std::ofstream log(fs::path(a.out) / "train.log", state.step == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw Error("cli", "cannot write " + (fs::path(a.out) / "train.log").string());
  log.precision(9);

  training::TrainHooks hooks;
  hooks.log = &log;
  hooks.checkpoint_every = rc.checkpoint_every;
  hooks.checkpoint = [&](const model::Model<float>& mm, const training::TrainState& s) {
    checkpoint::save(fs::path(a.out) / ("step_" + std::to_string(s.step) + ".dmx"), mm, &s);
  };
  if (valid) {
    hooks.validate = [&](const model::Model<float>& mm) {
      std::vector<eval::TrackScore> scores;
      for (std::size_t i = 0; i < valid->tracks.size(); ++i) {
        const auto est = inference::separate(mm, valid->tracks[i].mixture, rc.plan, {a.threads});
        StemSet ref;
        for (Source s : est.sources()) ref.set(s, valid->tracks[i].stems.at(s));
        scores.push_back(eval::evaluate_track(ref, est, false, valid->names[i]));
      }
      const double g = eval::aggregate(std::move(scores)).global_mean;
      out << "epoch " << state.epoch << ": validation SDR " << g << " dB\n";
      return g;
    };
  }
  const auto summary = training::train(m, pool, rc.train, state, rc.total_steps, hooks);
  checkpoint::save(fs::path(a.out) / "model.dmx", m, &state);
  out << "trained " << summary.steps_run << " steps (total " << state.step << ")"
      << (summary.stopped_early ? ", stopped early" : "") << "; last masked loss " << summary.last_loss << '\n';
  return 0;
}

struct SeparateArgs {
  std::vector<std::string> ckpts;
  std::string input, out, blend_weights;
  std::size_t chunk_frames = 1024, overlap = 8, threads = 1;
};

inline int cmd_separate(const SeparateArgs& a, std::ostream& out) {
  const Waveform mix = load_wav(a.input);
  const inference::SeparationPlan plan{a.chunk_frames, a.overlap};
  std::vector<StemSet> estimates;
  for (const auto& path : a.ckpts) {
    const auto m = checkpoint::load_model(path);
    estimates.push_back(inference::separate(m, mix, plan, {a.threads}));
  }
  StemSet result;
  if (estimates.size() == 1 && a.blend_weights.empty()) {
    result = std::move(estimates[0]);
  } else {
    inference::BlendSpec spec;
    if (a.blend_weights.empty())
      for (const auto& path : a.ckpts) spec.entries.push_back({path, {1, 1, 1, 1}});
    else
      spec = parse_blend_weights(a.blend_weights, estimates.size());
    result = inference::blend(estimates, spec);
  }
  save_track(a.out, nullptr, result);
  out << "wrote " << result.count() << " stems to " << a.out << '\n';
  return 0;
}

struct EvaluateArgs {
  std::string est, ref, report;
  bool csdr = false;
};

inline int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const auto refs = stem_dirs(a.ref);
  const bool single = refs.size() == 1 && refs[0].second == fs::path(a.ref);
  std::vector<eval::TrackScore> scores;
  for (const auto& [name, dir] : refs) {
    const fs::path est_dir = single && is_stem_dir(a.est) ? fs::path(a.est) : fs::path(a.est) / name;
    const StemSet est = load_stems(est_dir), all = load_stems(dir);
    StemSet ref;
    for (Source s : est.sources()) {
      if (!all.has(s))
        throw ShapeError("eval", "estimate " + std::string(source_name(s)) + " has no reference in " + dir.string());
      ref.set(s, all.at(s));
    }
    scores.push_back(eval::evaluate_track(ref, est, a.csdr, name));
  }
  const auto report = eval::aggregate(std::move(scores));
  const auto j = eval::to_json(report);
  if (const auto problem = eval::validate_report(j); !problem.empty()) throw Error("eval", problem);
  const fs::path rp(a.report);
  if (rp.has_parent_path()) fs::create_directories(rp.parent_path());
  std::ofstream f(rp);
  if (!f || !(f << j.dump(2) << '\n')) throw Error("eval", "cannot write " + a.report);
  out << "mean SDR " << report.global_mean << " dB over " << report.tracks.size() << " track(s)\n";
  return 0;
}

struct NoiseArgs {
  std::string mode, data, out;
  double gain_db = -10, p = 1;
  std::uint64_t seed = 0;
};

inline int cmd_simulate_noise(const NoiseArgs& a, std::ostream& out, std::ostream& err) {
  const auto mode = noise::parse_mode(a.mode);
  if (!mode) throw UsageError("--mode must be label-noise or bleeding");
  const noise::CorruptionSpec spec{*mode, a.gain_db, a.p, a.seed};
  spec.validate();
  const auto data = load_dataset(a.data, std::nullopt, err);
  std::vector<StemSet> clean;
  for (const auto& t : data.tracks) clean.push_back(t.stems);
  const auto c = noise::simulate(clean, spec, data.names);
  for (std::size_t i = 0; i < clean.size(); ++i) save_track(fs::path(a.out) / data.names[i], &c.mixtures[i], c.stems[i]);
  std::ofstream f(fs::path(a.out) / "manifest.json");
  if (!f || !(f << noise::to_json(c.manifest).dump(2) << '\n')) throw Error("noise-sim", "cannot write manifest");
  std::size_t n = 0;
  for (const auto& e : c.manifest.entries) n += e.corrupted;
  out << "corrupted " << n << " of " << c.manifest.entries.size() << " stems (" << noise::mode_name(*mode) << ")\n";
  return 0;
}

struct BlendArgs {
  std::string inputs, out;
};

inline int cmd_blend(const BlendArgs& a, std::ostream& out) {
  std::vector<StemSet> est;
  std::string weights;
  std::istringstream list(a.inputs);
  for (std::string item; std::getline(list, item, ',');) {
    const auto colon = item.rfind(':');
    if (colon == std::string::npos || colon == 0) throw UsageError("--inputs entries must look like DIR:W, got '" + item + "'");
    est.push_back(load_stems(item.substr(0, colon)));
    weights += (weights.empty() ? "" : ",") + item.substr(colon + 1);
  }
  if (est.empty()) throw UsageError("--inputs is empty");
  const auto result = inference::blend(est, parse_blend_weights(weights, est.size()));
  save_track(a.out, nullptr, result);
  out << "blended " << est.size() << " estimates into " << a.out << '\n';
  return 0;
}

struct ToyArgs {
  std::string out;
  std::size_t tracks = 4;
  double seconds = 10;
  std::uint64_t seed = 0;
};

inline int cmd_make_toy(const ToyArgs& a, std::ostream& out) {
  synth::ToyConfig cfg;
  cfg.seconds = a.seconds;
  const auto tracks = synth::make_dataset(cfg, a.tracks, a.seed);
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "track%03zu", i);
    const Waveform mix = tracks[i].sum();
    save_track(fs::path(a.out) / name, &mix, tracks[i]);
  }
  out << "wrote " << tracks.size() << " toy tracks to " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Music source separation: training, separation, evaluation and corruption tools", "demix"};
  app.require_subcommand(1);
  std::size_t threads = 1;
  app.add_option("--threads", threads, "Maximum worker threads")->check(CLI::PositiveNumber);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model from a stem dataset");
  train->add_option("--config", ta.config, "INI run configuration")->required()->check(CLI::ExistingFile);
  train->add_option("--data", ta.data, "Training dataset root (one directory per track)")->required();
  train->add_option("--out", ta.out, "Output directory for train.log and checkpoints")->required();
  train->add_option("--resume", ta.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--valid", ta.valid, "Validation dataset root; enables early stopping");
  train->add_option("--steps", ta.steps, "Override total_steps");

  SeparateArgs sa;
  auto* sep = app.add_subcommand("separate", "Separate a mixture with one or more checkpoints");
  sep->add_option("--ckpt", sa.ckpts, "Checkpoint file(s); several imply blending")->required()->check(CLI::ExistingFile);
  sep->add_option("--input", sa.input, "Mixture WAV file")->required()->check(CLI::ExistingFile);
  sep->add_option("--out", sa.out, "Output directory for <class>.wav")->required();
  sep->add_option("--chunk-frames", sa.chunk_frames, "Chunk size in STFT frames")->capture_default_str();
  sep->add_option("--overlap", sa.overlap, "Chunks covering each sample")->capture_default_str();
  sep->add_option("--blend-weights", sa.blend_weights,
                  "Per-checkpoint weights 'w1,w2,...'; an entry may be v:d:b:o per-class weights");

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Score estimates against references");
  ev->add_option("--est", ea.est, "Estimate stem directory (or root of per-track directories)")->required();
  ev->add_option("--ref", ea.ref, "Reference stem directory (or dataset root)")->required();
  ev->add_option("--report", ea.report, "Output JSON report")->required();
  ev->add_flag("--csdr", ea.csdr, "Also compute chunked cSDR");

  NoiseArgs na;
  auto* sim = app.add_subcommand("simulate-noise", "Write a corrupted copy of a dataset plus manifest.json");
  sim->add_option("--mode", na.mode, "label-noise or bleeding")->required();
  sim->add_option("--data", na.data, "Clean dataset root")->required();
  sim->add_option("--out", na.out, "Output dataset root")->required();
  sim->add_option("--bleed-gain-db", na.gain_db, "Bleeding gain in dB")->capture_default_str();
  sim->add_option("--p", na.p, "Label-noise probability per stem")->capture_default_str();
  sim->add_option("--seed", na.seed, "Corruption seed")->capture_default_str();

  BlendArgs ba;
  auto* bl = app.add_subcommand("blend", "Blend separated stem directories");
  bl->add_option("--inputs", ba.inputs, "Comma-separated DIR:W entries")->required();
  bl->add_option("--out", ba.out, "Output directory")->required();

  ToyArgs ya;
  auto* toy = app.add_subcommand("make-toy", "Write a synthetic 4-class dataset");
  toy->add_option("--out", ya.out, "Output dataset root")->required();
  toy->add_option("--tracks", ya.tracks, "Number of tracks")->capture_default_str();
  toy->add_option("--seconds", ya.seconds, "Track length in seconds")->capture_default_str();
  toy->add_option("--seed", ya.seed, "Generator seed")->capture_default_str();

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return 0;
    if (e.get_name() != "CallForHelp" && e.get_name() != "CallForAllHelp") err << app.help();
    return 2;
  }

  try {
    if (*train) {
      ta.threads = threads;
      return cmd_train(ta, out, err);
    }
    if (*sep) {
      sa.threads = threads;
      return cmd_separate(sa, out);
    }
    if (*ev) return cmd_evaluate(ea, out);
    if (*sim) return cmd_simulate_noise(na, out, err);
    if (*bl) return cmd_blend(ba, out);
    if (*toy) return cmd_make_toy(ya, out);
  } catch (const UsageError& e) {
    err << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "demix: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args));
}

}  // namespace demix::cli
