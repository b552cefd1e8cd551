#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "config.hpp"
#include "errors.hpp"
#include "evaluator.hpp"
#include "mapper.hpp"
#include "nn.hpp"
#include "xbar.hpp"

#ifndef CIMCALL_PRESET_DIR
#define CIMCALL_PRESET_DIR "configs"
#endif

namespace cimcall {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

struct CliOptions {
  std::string config;      // TOML config or a run manifest (JSON)
  std::string preset;      // name of a bundled preset, applied before --config
  std::string out;         // overrides run.out_dir
  std::string checkpoint;  // evaluate / build-library: stored float model
  std::optional<uint64_t> seed;
  int jobs = 1;
  size_t samples = 10000;
  size_t min_samples = 10000;
  int library_tiles = 1;  // tiles per slot measured by build-library
};

inline std::string preset_dir() {
  if (const char* e = std::getenv("CIMCALL_PRESET_DIR")) return e;
  return CIMCALL_PRESET_DIR;
}

inline std::vector<std::string> list_presets() {
  std::vector<std::string> out;
  if (!fs::is_directory(preset_dir())) return out;
  for (const auto& e : fs::directory_iterator(preset_dir()))
    if (e.path().extension() == ".toml") out.push_back(e.path().stem().string());
  std::sort(out.begin(), out.end());
  return out;
}

inline uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char b[17];
  std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(v));
  return b;
}

inline bool looks_like_manifest(const std::string& text) {
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) continue;
    return c == '{';
  }
  return false;
}

struct ResolvedInput {
  ExperimentConfig config;
  std::string checkpoint;
  bool from_manifest = false;
  Json manifest;
};

// Preset, then the config file (or the config echoed in a manifest), then
// --seed and --out.
inline ResolvedInput resolve_input(const CliOptions& o) {
  ResolvedInput r;
  ExperimentConfig base;
  if (!o.preset.empty()) {
    const fs::path p = fs::path(preset_dir()) / (o.preset + ".toml");
    if (!fs::exists(p)) {
      std::string known;
      for (const auto& n : list_presets()) known += (known.empty() ? "" : ", ") + n;
      throw ConfigError("unknown preset '" + o.preset + "' (available: " + (known.empty() ? "none" : known) + ")");
    }
    base = config_from_text(read_text_file(p.string()));
  }
  if (!o.config.empty()) {
    const std::string text = read_text_file(o.config);
    if (looks_like_manifest(text)) {
      Json m;
      try {
        m = Json::parse(text);
      } catch (const std::exception& e) {
        throw ConfigError("manifest '" + o.config + "': " + e.what());
      }
      if (!m.contains("config") || !m["config"].is_string())
        throw ConfigError("manifest '" + o.config + "': missing resolved config");
      base = config_from_text(m["config"].get<std::string>());
      if (m.contains("checkpoint") && m["checkpoint"].contains("path"))
        r.checkpoint = m["checkpoint"]["path"].get<std::string>();
      r.from_manifest = true;
      r.manifest = std::move(m);
    } else {
      base = config_from_text(text, base);
    }
  }
  if (o.seed) base.seed = *o.seed;
  if (!o.out.empty()) base.out_dir = o.out;
  if (!o.checkpoint.empty()) r.checkpoint = o.checkpoint;
  base.validate();
  r.config = base;
  return r;
}

// ---------------------------------------------------------------------------
// Output helpers

class RunOutput {
 public:
  RunOutput(std::string command, const ExperimentConfig& c, int jobs) : dir_(c.out_dir) {
    fs::create_directories(dir_);
    manifest_["tool"] = "cimcall";
    manifest_["manifest_version"] = 1;
    manifest_["command"] = std::move(command);
    manifest_["config"] = config_to_text(c);
    manifest_["config_fnv64"] = hex64(fnv1a64(config_to_text(c)));
    manifest_["seed"] = c.seed;
    manifest_["jobs"] = jobs;
    manifest_["artifacts"] = Json::array();
  }

  Json& manifest() { return manifest_; }
  fs::path path(const std::string& name) const { return fs::path(dir_) / name; }

  void write(const std::string& name, const std::string& content) {
    const fs::path p = path(name);
    std::ofstream o(p, std::ios::binary);
    o << content;
    o.close();
    if (!o) throw StateError("could not write " + p.string());
    record(name);
  }

  void record(const std::string& name) {
    const std::string bytes = read_text_file(path(name).string());
    manifest_["artifacts"].push_back({{"file", name}, {"bytes", bytes.size()}, {"fnv64", hex64(fnv1a64(bytes))}});
  }

  // Self-check: every recorded artifact exists with the recorded size.
  void finish() {
    for (const auto& a : manifest_["artifacts"]) {
      const fs::path p = path(a["file"].get<std::string>());
      if (!fs::exists(p) || fs::file_size(p) != a["bytes"].get<size_t>())
        throw StateError("artifact check failed for " + p.string());
    }
    std::ofstream o(path("manifest.json"));
    o << manifest_.dump(2) << "\n";
    if (!o) throw StateError("could not write manifest");
  }

 private:
  std::string dir_;
  Json manifest_;
};

inline Json distribution_json(const Distribution& d) {
  return {{"mean", d.mean}, {"std", d.stddev}, {"min", d.min}, {"max", d.max}, {"median", d.median},
          {"values", d.values}};
}

inline Json report_json(const EvalReport& r) {
  Json j;
  Json axes = Json::object();
  for (const auto& [k, v] : r.axes) axes[k] = to_text(v);
  j["axes"] = axes;
  j["seed"] = r.config.seed;
  j["accuracy"] = distribution_json(r.accuracy);
  j["float_accuracy"] = r.float_accuracy;
  j["chip_streams"] = r.run_streams;
  if (r.on_chip) {
    j["plan"] = {{"array_size", r.plan.array_size}, {"tiles", r.plan.tiles},
                 {"mapped_cells", r.plan.mapped_cells}, {"utilization", r.plan.utilization()}};
    j["ledger"] = {{"program_pulses", r.ledger.program_pulses}, {"programmed_cells", r.ledger.programmed_cells},
                   {"rvw_pulses", r.ledger.rvw_pulses},         {"sram_weights", r.ledger.sram_weights},
                   {"sram_bits", r.ledger.sram_bits},           {"offline_epochs", r.ledger.offline_epochs},
                   {"retrain_epochs", r.ledger.retrain_epochs}};
    j["throughput"] = {{"stage_latency_s", r.throughput.stage_latency}, {"frame_time_s", r.throughput.frame_time},
                       {"kbps", r.throughput.kbps}, {"speedup", r.throughput.speedup}};
    j["area_um2"] = {{"tiles", r.area.tiles}, {"sram", r.area.sram}, {"control", r.area.control},
                     {"total", r.area.total}};
    j["flags"] = {{"adc_saturated", r.flags.adc_saturated}, {"adc_dead_zone", r.flags.adc_dead_zone},
                  {"dac_clamped", r.flags.dac_clamped}, {"conversions", r.flags.conversions}};
  }
  return j;
}

inline std::shared_ptr<const TrainedTeacher> load_teacher(const ExperimentConfig& c, const std::string& ckpt) {
  if (!fs::exists(ckpt)) throw ConfigError("checkpoint file not found: '" + ckpt + "'");
  return std::make_shared<const TrainedTeacher>(teacher_from_model(c, load_checkpoint(ckpt)));
}

inline bool same_model(const NetworkModel& a, const NetworkModel& b) {
  if (a.layers.size() != b.layers.size() || a.slots.size() != b.slots.size()) return false;
  for (size_t l = 0; l < a.layers.size(); ++l) {
    if (a.layers[l].params.size() != b.layers[l].params.size()) return false;
    for (size_t p = 0; p < a.layers[l].params.size(); ++p)
      if (a.layers[l].params[p] != b.layers[l].params[p]) return false;
  }
  for (size_t s = 0; s < a.slots.size(); ++s)
    if (a.slots[s].in_range != b.slots[s].in_range) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Commands. Each writes its artifacts plus manifest.json into run.out_dir.

inline int cmd_train(const CliOptions& o, std::ostream& log = std::cout) {
  const ResolvedInput in = resolve_input(o);
  const ExperimentConfig& c = in.config;
  RunOutput out("train", c, o.jobs);
  const TrainedTeacher t = train_teacher(c);
  const std::string ckpt = out.path("teacher.ckpt").string();
  save_checkpoint(t.model, ckpt);
  out.record("teacher.ckpt");
  if (!same_model(load_checkpoint(ckpt), t.model)) throw StateError("checkpoint does not reload bit-identically");
  std::string csv = "epoch,loss\n";
  for (size_t e = 0; e < t.log.epoch_loss.size(); ++e)
    csv += std::to_string(e) + "," + format_number(t.log.epoch_loss[e]) + "\n";
  out.write("train_log.csv", csv);
  out.manifest()["final_loss"] = t.log.epoch_loss.empty() ? 0.0 : t.log.epoch_loss.back();
  out.manifest()["float_accuracy"] = t.accuracy;
  out.finish();
  log << "trained " << c.train.epochs << " epochs, final loss " << format_number(t.log.epoch_loss.back())
      << ", eval accuracy " << detail::fmt(t.accuracy, "%.3f") << " -> " << ckpt << "\n";
  return 0;
}

inline int cmd_evaluate(const CliOptions& o, std::ostream& log = std::cout) {
  const ResolvedInput in = resolve_input(o);
  const ExperimentConfig& c = in.config;
  std::shared_ptr<const TrainedTeacher> teacher;
  if (!in.checkpoint.empty()) teacher = load_teacher(c, in.checkpoint);
  RunOutput out("evaluate", c, o.jobs);
  if (!in.checkpoint.empty())
    out.manifest()["checkpoint"] = {{"path", in.checkpoint},
                                    {"fnv64", hex64(fnv1a64(read_text_file(in.checkpoint)))}};
  const EvalReport r = evaluate_config(c, nullptr, teacher);
  out.write("eval.csv", sweep_csv({r}));
  if (r.on_chip) out.write("plan.txt", plan_report(r.plan));
  out.manifest()["results"] = Json::array({report_json(r)});
  out.finish();
  log << "accuracy " << detail::fmt(r.accuracy.mean, "%.3f") << " +/- " << detail::fmt(r.accuracy.stddev, "%.3f")
      << " over " << c.runs << " runs (float " << detail::fmt(r.float_accuracy, "%.3f") << "), "
      << detail::fmt(r.throughput.kbps, "%.4g") << " Kbp/s\n";
  return 0;
}

inline int cmd_sweep(const CliOptions& o, std::ostream& log = std::cout) {
  const ResolvedInput in = resolve_input(o);
  const ExperimentConfig& c = in.config;
  if (c.sweep.empty()) throw ConfigError("sweep: empty grid (add [sweep.grid] axes)");
  RunOutput out("sweep", c, o.jobs);
  const std::vector<EvalReport> reps = run_sweep(c, o.jobs);
  const std::string csv = sweep_csv(reps);
  if (static_cast<size_t>(std::count(csv.begin(), csv.end(), '\n')) != reps.size() + 1)
    throw StateError("sweep: row count mismatch");
  out.write("sweep.csv", csv);
  const std::string fig = c.sweep_figure.empty() ? "sweep" : c.sweep_figure;
  if (!c.sweep_figure.empty()) out.write(figure_csv_name(c.sweep_figure), figure_csv(reps));
  const bool scen = std::any_of(c.sweep.begin(), c.sweep.end(), [](const SweepAxis& a) {
    return a.key == "profile.scenario";
  });
  if (scen) {
    const auto rows = nonadditivity(reps);
    out.write(fig + "_nonadditivity.csv", nonadditivity_csv(rows));
    for (const auto& r : rows)
      log << "seed " << r.seed << (r.group.empty() ? "" : " [" + r.group + "]") << ": combined loss "
          << detail::fmt(r.combined_loss, "%.3f") << ", sum of single losses " << detail::fmt(r.sum_single, "%.3f")
          << ", difference " << detail::fmt(r.gap, "%+.3f") << "\n";
  }
  Json cells = Json::array();
  for (const auto& r : reps) cells.push_back(report_json(r));
  out.manifest()["results"] = cells;
  out.finish();
  log << "swept " << reps.size() << " cells -> " << out.path("sweep.csv").string() << "\n";
  return 0;
}

inline int cmd_build_library(const CliOptions& o, std::ostream& log = std::cout) {
  const ResolvedInput in = resolve_input(o);
  const ExperimentConfig& c = in.config;
  require(o.library_tiles >= 1, "build-library: tiles per slot must be >= 1");
  if (!c.quant.is_fixed()) throw ConfigError("build-library: quant.spec must be fixed-point");
  const auto teacher = in.checkpoint.empty() ? std::make_shared<const TrainedTeacher>(train_teacher(c))
                                             : load_teacher(c, in.checkpoint);
  RunOutput out("build-library", c, o.jobs);
  const NetworkModel q = quantize_model(teacher->model, c.quant);
  const HardwareTarget hw = c.hardware();
  RngStream prog = chip_stream(c.seed, 0);
  const Chip chip = program_plan(partition_and_map(q, hw.array_size, hw.device, hw.spec), q, hw.profile, prog);
  MeasurementLibrary lib;
  lib.min_entries = o.min_samples;
  RngStream rng(c.seed, {0x4C494252ull, 0});
  int measured = 0;
  for (const SlotState& s : chip.slots)
    for (int k = 0; k < std::min<int>(o.library_tiles, static_cast<int>(s.group.tiles.size())); ++k) {
      add_to_library(lib, s.group.tiles[k], o.samples, rng);
      ++measured;
    }
  const std::string path = out.path("library.bin").string();
  save_library(lib, path);
  out.record("library.bin");
  out.manifest()["library"] = {{"tiles", measured}, {"samples_per_tile", o.samples},
                               {"min_samples", o.min_samples}, {"array_size", lib.rows}};
  out.finish();
  log << "measured " << measured << " tiles x " << o.samples << " samples -> " << path << "\n";
  return 0;
}

inline int cmd_report(const CliOptions& o, std::ostream& log = std::cout) {
  const ResolvedInput in = resolve_input(o);
  const ExperimentConfig& c = in.config;
  RunOutput out("report", c, o.jobs);
  RngStream init(c.seed, {0x494E4954ull, 0});
  NetworkModel m = make_surrogate(init, c.model);
  std::string text;
  if (c.quant.is_fixed()) {
    m = quantize_model(m, c.quant);
    const TilePlan plan = partition_and_map(m, c.array_size, c.device, c.quant);
    text = plan_report(plan);
    out.write("plan.txt", text);
  } else {
    text = "float model: no tile plan\n";
  }
  out.write("resolved.toml", config_to_text(c));
  log << text;
  if (in.from_manifest && in.manifest.contains("results")) {
    log << "results from manifest (" << in.manifest["command"].get<std::string>() << "):\n";
    for (const auto& r : in.manifest["results"]) {
      std::string axes;
      for (const auto& [k, v] : r["axes"].items()) axes += (axes.empty() ? "" : " ") + k + "=" + v.get<std::string>();
      log << "  " << (axes.empty() ? "single run" : axes) << "  accuracy mean "
          << detail::fmt(r["accuracy"]["mean"].get<double>(), "%.3f") << " median "
          << detail::fmt(r["accuracy"]["median"].get<double>(), "%.3f") << "\n";
    }
  }
  out.finish();
  return 0;
}

// Exit codes: 0 success, 2 configuration or usage error, 3 invalid input or
// numeric failure, 4 failed self-check.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const StateError*>(&e)) return 4;
  return 3;
}

}  // namespace cimcall
