#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "config.hpp"
#include "errors.hpp"
#include "mapper.hpp"
#include "mitigate.hpp"
#include "nn.hpp"
#include "taskgen.hpp"

namespace cimcall {

// 100 * matches / alignment length of the global alignment.
inline double read_accuracy(const std::string& decoded, const std::string& reference) {
  if (decoded.empty() || reference.empty()) throw PreconditionError("read_accuracy: empty sequence");
  const Alignment a = global_align(decoded, reference);
  return 100.0 * static_cast<double>(a.matches) / static_cast<double>(a.alignment_length);
}

// A read whose decode is empty scores 0.
inline double dataset_accuracy(const NetworkModel& m, DenseBackend& be, const std::vector<SyntheticRead>& reads) {
  require(!reads.empty(), "accuracy: empty dataset");
  double s = 0.0;
  for (const auto& r : reads) {
    const std::string d = greedy_decode(forward(m, r.signal, be));
    s += d.empty() ? 0.0 : read_accuracy(d, r.reference);
  }
  return s / static_cast<double>(reads.size());
}

struct Distribution {
  std::vector<double> values;
  double mean = 0.0, stddev = 0.0, min = 0.0, max = 0.0, median = 0.0;

  static Distribution of(std::vector<double> v) {
    Distribution d;
    d.values = v;
    if (v.empty()) return d;
    double s = 0.0;
    for (double x : v) s += x;
    d.mean = s / static_cast<double>(v.size());
    double q = 0.0;
    for (double x : v) q += (x - d.mean) * (x - d.mean);
    d.stddev = v.size() > 1 ? std::sqrt(q / static_cast<double>(v.size() - 1)) : 0.0;
    std::sort(v.begin(), v.end());
    d.min = v.front();
    d.max = v.back();
    const size_t n = v.size();
    d.median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    return d;
  }
};

inline double median_of(std::vector<double> v) { return Distribution::of(std::move(v)).median; }

// ---------------------------------------------------------------------------
// Throughput: analytical pipeline latency.

struct ThroughputReport {
  std::vector<double> stage_latency;  // seconds per frame
  double bottleneck = 0.0;
  double rvw_addend = 0.0;
  double frame_time = 0.0;
  double frames_per_s = 0.0;
  double kbps = 0.0;
  double speedup = 0.0;
};

// One VMM step of a mapped slot: DAC, settle, column conversions shared by
// the tile's ADCs, digital shift-add per output column, RSA digital MACs.
inline double slot_latency(const SlotState& s, const TimingConfig& t) {
  const SliceLayout& L = s.group.layout;
  const int64_t used = L.total_cols();
  const int64_t cols = std::min<int64_t>(L.tile_cols, used);
  const int64_t conv = (cols + t.adcs_per_tile - 1) / t.adcs_per_tile;
  return t.t_dac + t.t_settle + static_cast<double>(conv) * t.t_adc_per_conversion +
         t.t_digital_per_output * static_cast<double>(used) + t.t_sram_mac * static_cast<double>(s.masked());
}

inline ThroughputReport evaluate_throughput(const Chip& chip, const ScheduleModel& sched, const TimingConfig& t,
                                            const CostLedger& ledger, double frames_per_base) {
  if (!chip.programmed) throw StateError("throughput: plan not programmed");
  t.validate();
  require(frames_per_base > 0.0, "throughput: frames per base must be > 0");
  ThroughputReport r;
  for (const Stage& st : sched.stages) {
    double lat = 0.0;
    for (int s : st.slots) {
      require(s >= 0 && s < static_cast<int>(chip.slots.size()), "throughput: schedule slot not on chip");
      const double l = slot_latency(chip.slots[s], t);
      lat = st.serial ? lat + l : std::max(lat, l);
    }
    r.stage_latency.push_back(lat);
    r.bottleneck = std::max(r.bottleneck, lat);
  }
  r.rvw_addend = static_cast<double>(ledger.rvw_pulses) * t.t_write_pulse / t.rvw_refresh_period;
  r.frame_time = r.bottleneck + r.rvw_addend;
  r.frames_per_s = 1.0 / r.frame_time;
  r.kbps = r.frames_per_s / frames_per_base / 1000.0;
  r.speedup = r.kbps / t.baseline_software_kbps;
  return r;
}

struct AreaReport {
  double tiles = 0.0;
  double sram = 0.0;
  double control = 0.0;
  double total = 0.0;
  int64_t sram_bits = 0;
};

inline AreaReport evaluate_area(const TilePlan& plan, int64_t masked_weights, const AreaConfig& a, int adcs_per_tile) {
  a.validate();
  AreaReport r;
  const double n = plan.array_size;
  r.tiles = plan.tiles * (n * n * a.cell_area + a.adc_area * adcs_per_tile + a.dac_area * n + a.driver_area);
  r.sram_bits = masked_weights * plan.spec.weight_bits;
  r.sram = static_cast<double>(r.sram_bits) * a.sram_area_per_bit;
  r.control = a.control_overhead_fraction * (r.tiles + r.sram);
  r.total = r.tiles + r.sram + r.control;
  return r;
}

// ---------------------------------------------------------------------------
// Experiment execution

struct Datasets {
  std::vector<SyntheticRead> train;
  std::vector<SyntheticRead> eval;
};

inline Datasets make_datasets(const ExperimentConfig& c) {
  Datasets d;
  RngStream tr(c.seed, {0x5452414Eull, 0}), ev(c.seed, {0x4556414Cull, 0});
  d.train = generate_dataset(c.task, tr);
  TaskConfig e = c.task;
  e.n_reads = c.eval_reads;
  d.eval = generate_dataset(e, ev);
  return d;
}

struct TrainedTeacher {
  Datasets data;
  NetworkModel model;  // float, input ranges calibrated on the training set
  TrainLog log;
  double accuracy = 0.0;  // exact backend, eval set
};

inline TrainedTeacher train_teacher(const ExperimentConfig& c) {
  TrainedTeacher t;
  t.data = make_datasets(c);
  RngStream init(c.seed, {0x494E4954ull, 0});
  t.model = make_surrogate(init, c.model);
  TrainConfig tc = c.train;
  tc.seed = hash_combine(c.seed, 0x54524149ull);
  t.log = train_supervised(t.model, t.data.train, tc);
  round_to_float(t.model);
  calibrate_input_ranges(t.model, t.data.train);
  ExactBackend be(t.model);
  t.accuracy = dataset_accuracy(t.model, be, t.data.eval);
  return t;
}

// A stored float model evaluated on the datasets of `c`; its layer shapes
// must match the model section.
inline TrainedTeacher teacher_from_model(const ExperimentConfig& c, NetworkModel model) {
  RngStream probe(0, {});
  const NetworkModel ref = make_surrogate(probe, c.model);
  bool ok = model.layers.size() == ref.layers.size() && model.slots.size() == ref.slots.size();
  for (size_t l = 0; ok && l < ref.layers.size(); ++l) {
    const Layer &a = model.layers[l], &b = ref.layers[l];
    ok = a.kind == b.kind && a.act == b.act && a.k == b.k && a.in == b.in && a.out == b.out &&
         a.params.size() == b.params.size();
    for (size_t p = 0; ok && p < b.params.size(); ++p)
      ok = a.params[p].rows() == b.params[p].rows() && a.params[p].cols() == b.params[p].cols();
  }
  if (!ok) throw DimensionError("checkpoint does not match the model section of the config");
  if (model.quant.is_fixed()) throw PreconditionError("checkpoint must hold a float model");
  TrainedTeacher t;
  t.data = make_datasets(c);
  t.model = std::move(model);
  ExactBackend be(t.model);
  t.accuracy = dataset_accuracy(t.model, be, t.data.eval);
  return t;
}

inline std::string teacher_key(const ExperimentConfig& c) {
  std::string k = std::to_string(c.seed) + "/" + std::to_string(c.eval_reads);
  for (const auto& [key, v] : resolved_entries(c))
    if (key.rfind("task.", 0) == 0 || key.rfind("model.", 0) == 0 || key.rfind("train.", 0) == 0)
      k += "/" + key + "=" + to_text(v);
  return k;
}

// Teachers shared by sweep cells with the same task, model, training and seed.
class TeacherCache {
 public:
  std::shared_ptr<const TrainedTeacher> get(const ExperimentConfig& c) {
    const std::string key = teacher_key(c);
    std::shared_future<std::shared_ptr<const TrainedTeacher>> fut;
    std::promise<std::shared_ptr<const TrainedTeacher>> prom;
    bool owner = false;
    {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = map_.find(key);
      if (it == map_.end()) {
        fut = prom.get_future().share();
        map_.emplace(key, fut);
        owner = true;
      } else {
        fut = it->second;
      }
    }
    if (owner) {
      try {
        prom.set_value(std::make_shared<const TrainedTeacher>(train_teacher(c)));
      } catch (...) {
        prom.set_exception(std::current_exception());
      }
    }
    return fut.get();
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::shared_future<std::shared_ptr<const TrainedTeacher>>> map_;
};

struct EvalReport {
  ExperimentConfig config;
  std::vector<std::pair<std::string, ConfigValue>> axes;
  Distribution accuracy;
  double float_accuracy = 0.0;
  double final_train_loss = 0.0;
  bool on_chip = false;
  ThroughputReport throughput;
  AreaReport area;
  CostLedger ledger;
  TilePlan plan;
  VmmFlags flags;
  std::vector<std::string> run_streams;  // seed and stream id of every chip instance
};

inline double mean_frames_per_base(const TaskConfig& t) { return 0.5 * (t.dwell_min + t.dwell_max); }

inline RngStream chip_stream(uint64_t seed, int run) { return RngStream(seed, {0x43484950ull, static_cast<uint64_t>(run)}); }

// Every run draws a fresh chip instance; the stream depends only on
// (seed, run), so configurations in one sweep see paired noise.
inline EvalReport evaluate_config(const ExperimentConfig& c, TeacherCache* cache = nullptr,
                                  std::shared_ptr<const TrainedTeacher> given = nullptr) {
  c.validate();
  TeacherCache local;
  const auto teacher = given ? given : (cache ? cache : &local)->get(c);
  EvalReport rep;
  rep.config = c;
  rep.float_accuracy = teacher->accuracy;
  rep.final_train_loss = teacher->log.epoch_loss.empty() ? 0.0 : teacher->log.epoch_loss.back();
  if (!c.quant.is_fixed()) {
    rep.accuracy = Distribution::of(std::vector<double>(c.runs, teacher->accuracy));
    rep.throughput.kbps = c.timing.baseline_software_kbps;
    rep.throughput.speedup = 1.0;
    return rep;
  }
  RecipeContext ctx;
  ctx.teacher = teacher->model;
  ctx.hw = c.hardware();
  ctx.train = teacher->data.train;
  ctx.seed = c.seed;
  CostLedger offline_cost;
  if (!c.recipe.techniques.empty()) c.recipe.validate();
  const NetworkModel offline = offline_stage(c.recipe, ctx, &offline_cost);
  std::vector<double> acc;
  for (int run = 0; run < c.runs; ++run) {
    RngStream rs = chip_stream(c.seed, run);
    rep.run_streams.push_back(std::to_string(c.seed) + ":" + std::to_string(0x43484950ull) + ":" + std::to_string(run));
    const Deployment d = online_stage(c.recipe, ctx, offline, rs, offline_cost);
    TileBackend tb(d.chip);
    acc.push_back(dataset_accuracy(d.model, tb, teacher->data.eval));
    if (run == 0) {
      rep.on_chip = true;
      rep.ledger = d.ledger;
      rep.plan = d.chip.plan;
      rep.flags = tb.flags;
      rep.throughput = evaluate_throughput(d.chip, make_schedule(d.model), c.timing, d.ledger,
                                           mean_frames_per_base(c.task));
      rep.area = evaluate_area(d.chip.plan, d.chip.sram_weights(), c.area, c.timing.adcs_per_tile);
    }
  }
  rep.accuracy = Distribution::of(acc);
  return rep;
}

// Multi-run accuracy of an already prepared model and context.
inline Distribution evaluate_accuracy(const MitigationRecipe& recipe, const RecipeContext& ctx,
                                      const NetworkModel& offline, const std::vector<SyntheticRead>& eval, int runs,
                                      uint64_t seed) {
  require(runs >= 1, "evaluate_accuracy: runs must be >= 1");
  std::vector<double> acc;
  for (int run = 0; run < runs; ++run) {
    RngStream rs = chip_stream(seed, run);
    const Deployment d = online_stage(recipe, ctx, offline, rs);
    TileBackend tb(d.chip);
    acc.push_back(dataset_accuracy(d.model, tb, eval));
  }
  return Distribution::of(acc);
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepCell {
  std::vector<std::pair<std::string, ConfigValue>> assignment;
  ExperimentConfig config;
};

// Cartesian product of the grid axes, first axis slowest. All zipped axes
// form one dimension, placed where the first of them appears.
inline std::vector<SweepCell> expand_grid(const ExperimentConfig& base) {
  if (base.sweep.empty()) throw ConfigError("sweep: empty grid (add [sweep.grid] axes)");
  std::vector<std::vector<size_t>> dims;  // axis indices per dimension
  int zip_dim = -1;
  for (size_t a = 0; a < base.sweep.size(); ++a) {
    const auto& ax = base.sweep[a];
    if (ax.values.empty()) throw ConfigError("sweep axis '" + ax.key + "': empty value list");
    if (ax.zipped) {
      if (zip_dim < 0) {
        zip_dim = static_cast<int>(dims.size());
        dims.push_back({});
      } else if (ax.values.size() != base.sweep[dims[zip_dim][0]].values.size()) {
        throw ConfigError("zipped sweep axis '" + ax.key + "': length mismatch");
      }
      dims[zip_dim].push_back(a);
    } else {
      dims.push_back({a});
    }
  }
  std::vector<SweepCell> cells;
  std::vector<size_t> idx(dims.size(), 0);
  while (true) {
    SweepCell cell;
    cell.config = base;
    cell.config.sweep.clear();
    for (size_t d = 0; d < dims.size(); ++d)
      for (size_t a : dims[d]) {
        const auto& ax = base.sweep[a];
        cell.assignment.emplace_back(ax.key, ax.values[idx[d]]);
        set_config_key(cell.config, ax.key, ax.values[idx[d]]);
      }
    cell.config.validate();
    cells.push_back(std::move(cell));
    size_t d = dims.size();
    while (true) {
      if (d == 0) return cells;
      --d;
      if (++idx[d] < base.sweep[dims[d][0]].values.size()) break;
      idx[d] = 0;
    }
  }
}

inline std::vector<EvalReport> run_sweep(const ExperimentConfig& base, int jobs = 1) {
  const std::vector<SweepCell> cells = expand_grid(base);
  std::vector<EvalReport> out(cells.size());
  std::vector<std::exception_ptr> errs(cells.size());
  TeacherCache cache;
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (size_t i = next++; i < cells.size(); i = next++) {
      try {
        out[i] = evaluate_config(cells[i].config, &cache);
        out[i].axes = cells[i].assignment;
      } catch (...) {
        errs[i] = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int k = 0; k < n; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {
inline std::string fmt(double v, const char* f = "%.6f") {
  char b[64];
  std::snprintf(b, sizeof b, f, v);
  return b;
}
inline std::string csv_field(const ConfigValue& v) {
  if (v.kind == ConfigValue::Kind::String) return v.str;
  if (v.kind == ConfigValue::Kind::Array) {
    std::string s;
    for (const auto& it : v.items) s += (s.empty() ? "" : "|") + csv_field(it);
    return s.empty() ? "none" : s;
  }
  return to_text(v);
}
inline std::string recipe_label(const ExperimentConfig& c) { return c.recipe.label(); }
}  // namespace detail

inline std::string sweep_csv(const std::vector<EvalReport>& reps) {
  std::string s = "cell";
  if (!reps.empty())
    for (const auto& [k, v] : reps.front().axes) s += "," + k;
  s += ",seed,quant,array_size,scenario,write_variation_rate,enabled,recipe,rsa_fraction,runs,acc_mean,acc_std,"
       "acc_min,acc_max,acc_median,float_acc,throughput_kbps,speedup,area_total_um2,area_sram_um2,sram_bits,tiles,"
       "utilization,program_pulses,rvw_pulses,adc_saturated,dac_clamped\n";
  for (size_t i = 0; i < reps.size(); ++i) {
    const EvalReport& r = reps[i];
    const ExperimentConfig& c = r.config;
    const NonIdealityProfile p = resolve_profile(c.profile, c.scenario);
    std::string line = std::to_string(i);
    for (const auto& [k, v] : r.axes) line += "," + detail::csv_field(v);
    std::string en;
    for (const auto& n : enabled_names(p.enabled)) en += (en.empty() ? "" : "|") + n;
    line += "," + std::to_string(c.seed) + "," + c.quant.label() + "," + std::to_string(c.array_size) + "," +
            scenario_name(c.scenario) + "," + detail::fmt(p.write_variation_rate, "%.6g") + "," + (en.empty() ? "none" : en) +
            "," + detail::recipe_label(c) + "," + detail::fmt(c.recipe.rsa.fraction, "%.6g") + "," + std::to_string(c.runs) +
            "," + detail::fmt(r.accuracy.mean) + "," + detail::fmt(r.accuracy.stddev) + "," + detail::fmt(r.accuracy.min) +
            "," + detail::fmt(r.accuracy.max) + "," + detail::fmt(r.accuracy.median) + "," +
            detail::fmt(r.float_accuracy) + "," + detail::fmt(r.throughput.kbps, "%.9g") + "," +
            detail::fmt(r.throughput.speedup, "%.9g") + "," + detail::fmt(r.area.total, "%.9g") + "," +
            detail::fmt(r.area.sram, "%.9g") + "," + std::to_string(r.area.sram_bits) + "," +
            std::to_string(r.plan.tiles) + "," + detail::fmt(r.plan.utilization()) + "," +
            std::to_string(r.ledger.program_pulses) + "," + std::to_string(r.ledger.rvw_pulses) + "," +
            std::to_string(r.flags.adc_saturated) + "," + std::to_string(r.flags.dac_clamped) + "\n";
    s += line;
  }
  return s;
}

inline std::string figure_csv_name(const std::string& fig) {
  if (fig == "fig14") return "fig14_throughput.csv";
  if (fig == "fig15") return "fig15_tradeoff.csv";
  return fig + "_sweep.csv";
}

// Plot-ready table: cells grouped by every axis except run.seed, with the
// median over seeds of each seed's mean accuracy.
inline std::string figure_csv(const std::vector<EvalReport>& reps) {
  std::vector<std::string> keys;
  if (!reps.empty())
    for (const auto& [k, v] : reps.front().axes)
      if (k != "run.seed") keys.push_back(k);
  std::vector<std::string> order;
  std::map<std::string, std::vector<const EvalReport*>> groups;
  for (const auto& r : reps) {
    std::string g;
    for (const auto& [k, v] : r.axes)
      if (k != "run.seed") g += (g.empty() ? "" : ",") + detail::csv_field(v);
    if (!groups.count(g)) order.push_back(g);
    groups[g].push_back(&r);
  }
  std::string s;
  for (const auto& k : keys) s += k + ",";
  s += "seeds,acc_median,acc_min_seed,acc_max_seed,float_acc_median,throughput_kbps,speedup,area_total_um2,"
       "area_sram_um2,sram_bits\n";
  for (const auto& g : order) {
    const auto& rs = groups[g];
    std::vector<double> acc, fl, kb, sp, at, as;
    for (const EvalReport* r : rs) {
      acc.push_back(r->accuracy.mean);
      fl.push_back(r->float_accuracy);
      kb.push_back(r->throughput.kbps);
      sp.push_back(r->throughput.speedup);
      at.push_back(r->area.total);
      as.push_back(r->area.sram);
    }
    const Distribution d = Distribution::of(acc);
    s += (g.empty() ? "" : g + ",") + std::to_string(rs.size()) + "," + detail::fmt(d.median) + "," +
         detail::fmt(d.min) + "," + detail::fmt(d.max) + "," + detail::fmt(median_of(fl)) + "," +
         detail::fmt(median_of(kb), "%.9g") + "," + detail::fmt(median_of(sp), "%.9g") + "," +
         detail::fmt(median_of(at), "%.9g") + "," + detail::fmt(median_of(as), "%.9g") + "," +
         std::to_string(rs.front()->area.sram_bits) + "\n";
  }
  return s;
}

// Accuracy loss of each single non-ideality and of all of them together,
// per seed (and per value of any other axis). Needs a profile.scenario axis
// holding ideal, the singles and Combined.
struct NonAdditivityRow {
  std::string group;
  uint64_t seed = 0;
  double ideal = 0.0;
  std::map<std::string, double> single_loss;
  double sum_single = 0.0;
  double combined_loss = 0.0;
  double gap = 0.0;  // combined - sum
};

inline std::vector<NonAdditivityRow> nonadditivity(const std::vector<EvalReport>& reps) {
  std::vector<NonAdditivityRow> rows;
  std::map<std::string, size_t> at;
  for (const auto& r : reps) {
    std::string g;
    for (const auto& [k, v] : r.axes)
      if (k != "profile.scenario" && k != "run.seed") g += (g.empty() ? "" : ";") + k + "=" + detail::csv_field(v);
    const std::string key = g + "#" + std::to_string(r.config.seed);
    if (!at.count(key)) {
      at[key] = rows.size();
      rows.push_back({});
      rows.back().group = g;
      rows.back().seed = r.config.seed;
    }
  }
  std::map<std::string, std::map<Scenario, double>> acc;
  for (const auto& r : reps) {
    std::string g;
    for (const auto& [k, v] : r.axes)
      if (k != "profile.scenario" && k != "run.seed") g += (g.empty() ? "" : ";") + k + "=" + detail::csv_field(v);
    acc[g + "#" + std::to_string(r.config.seed)][r.config.scenario] = r.accuracy.mean;
  }
  const Scenario singles[] = {Scenario::WriteVariation, Scenario::SynapticWires, Scenario::SenseAdc,
                              Scenario::DacDriver};
  std::vector<NonAdditivityRow> done;
  for (auto& row : rows) {
    const auto& a = acc[row.group + "#" + std::to_string(row.seed)];
    if (!a.count(Scenario::Ideal) || !a.count(Scenario::Combined)) continue;
    row.ideal = a.at(Scenario::Ideal);
    for (Scenario s : singles)
      if (a.count(s)) {
        row.single_loss[scenario_name(s)] = row.ideal - a.at(s);
        row.sum_single += row.ideal - a.at(s);
      }
    row.combined_loss = row.ideal - a.at(Scenario::Combined);
    row.gap = row.combined_loss - row.sum_single;
    done.push_back(row);
  }
  return done;
}

inline std::string nonadditivity_csv(const std::vector<NonAdditivityRow>& rows) {
  std::string s = "group,seed,ideal_acc,loss_WriteVariation,loss_SynapticWires,loss_SenseAdc,loss_DacDriver,"
                  "sum_single_losses,combined_loss,combined_minus_sum\n";
  for (const auto& r : rows) {
    auto get = [&r](const char* n) {
      auto it = r.single_loss.find(n);
      return it == r.single_loss.end() ? std::string("") : detail::fmt(it->second);
    };
    s += (r.group.empty() ? "all" : r.group) + "," + std::to_string(r.seed) + "," + detail::fmt(r.ideal) + "," +
         get("WriteVariation") + "," + get("SynapticWires") + "," + get("SenseAdc") + "," + get("DacDriver") + "," +
         detail::fmt(r.sum_single) + "," + detail::fmt(r.combined_loss) + "," + detail::fmt(r.gap) + "\n";
  }
  return s;
}

}  // namespace cimcall
