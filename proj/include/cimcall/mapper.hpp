#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "device.hpp"
#include "errors.hpp"
#include "nn.hpp"
#include "quant.hpp"
#include "rng.hpp"
#include "xbar.hpp"

namespace cimcall {

inline bool supported_array_size(int n) { return n >= 4 && n <= 1024 && (n & (n - 1)) == 0; }

// One dense product (a model slot) mapped onto its own group of tiles.
struct SlotMap {
  int slot = 0;
  int layer = 0;
  std::string name;
  SliceLayout layout;
  int first_tile = 0;  // global id of the group's first tile
};

struct TilePlan {
  int array_size = 0;
  DeviceParams device;
  QuantSpec spec;
  std::vector<SlotMap> slots;
  int tiles = 0;
  int64_t mapped_cells = 0;

  int64_t capacity_cells() const { return int64_t{tiles} * array_size * array_size; }
  double utilization() const {
    return tiles == 0 ? 0.0 : static_cast<double>(mapped_cells) / static_cast<double>(capacity_cells());
  }
};

// Greedy row-major tiling of every slot's (unrolled) weight matrix. No RNG.
inline TilePlan partition_and_map(const NetworkModel& m, int array_size, const DeviceParams& dev,
                                  const QuantSpec& spec) {
  spec.validate();
  dev.validate();
  if (!supported_array_size(array_size))
    throw ConfigError("partition: unsupported array size " + std::to_string(array_size) +
                      " (power of two in [4,1024])");
  if (!spec.is_fixed()) throw ConfigError("partition: tile mapping needs a fixed-point quantization spec");
  if (!dev.levels_power_of_two()) throw ConfigError("partition: levels_per_cell must be a power of two");
  if (m.quant.label() != spec.label())
    throw PreconditionError("partition: model is quantized to " + m.quant.label() + ", plan asks for " + spec.label());
  TilePlan p;
  p.array_size = array_size;
  p.device = dev;
  p.spec = spec;
  for (int s = 0; s < static_cast<int>(m.slots.size()); ++s) {
    const Mat& w = m.slot_weight(s);
    SlotMap sm;
    sm.slot = s;
    sm.layer = m.slots[s].layer;
    sm.name = m.slots[s].name;
    sm.layout = make_layout(static_cast<int>(w.rows()), static_cast<int>(w.cols()), spec.weight_bits,
                            dev.bits_per_cell(), array_size, array_size);
    sm.first_tile = p.tiles;
    p.tiles += sm.layout.tiles();
    p.mapped_cells += sm.layout.cells();
    p.slots.push_back(std::move(sm));
  }
  return p;
}

inline std::string plan_report(const TilePlan& p) {
  std::ostringstream o;
  o << "tile plan: array " << p.array_size << "x" << p.array_size << ", " << p.spec.label() << ", "
    << p.device.bits_per_cell() << " bit(s)/cell, differential pairs\n";
  for (const auto& s : p.slots) {
    const SliceLayout& L = s.layout;
    const double u = static_cast<double>(L.cells()) / (static_cast<double>(L.tiles()) * p.array_size * p.array_size);
    o << "  " << s.name << ": " << L.in << "x" << L.out << " -> " << L.slices << " slices/polarity, tiles "
      << s.first_tile << ".." << s.first_tile + L.tiles() - 1 << " (" << L.row_blocks << "x" << L.col_blocks
      << "), cells " << L.cells() << ", utilization " << u << "\n";
  }
  o << "  total: " << p.tiles << " tiles, " << p.mapped_cells << " mapped cells, utilization " << p.utilization()
    << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Schedule: one pipeline stage per dense step. A recurrent layer splits into
// its input product (pipelined) and the gate/candidate pair, which depends on
// the previous frame and runs back to back.

struct Stage {
  int layer = 0;
  std::vector<int> slots;
  bool serial = false;  // slots run one after another inside the stage
};

struct ScheduleModel {
  std::vector<Stage> stages;
  bool all_tiles_concurrent = true;
};

inline ScheduleModel make_schedule(const NetworkModel& m) {
  ScheduleModel s;
  for (int li = 0; li < static_cast<int>(m.layers.size()); ++li) {
    const Layer& L = m.layers[li];
    if (L.slots.empty()) continue;
    if (L.kind == LayerKind::Recurrent) {
      s.stages.push_back({li, {L.slots[0]}, false});
      s.stages.push_back({li, {L.slots[1], L.slots[2]}, true});
    } else {
      s.stages.push_back({li, L.slots, false});
    }
  }
  return s;
}

// Earliest start of each stage for the first frame: a stage starts as soon as
// its producer finishes.
inline std::vector<double> stage_start_times(const ScheduleModel& s, const std::vector<double>& latency) {
  require_dims(latency.size() == s.stages.size(), "schedule: latency count != stage count");
  std::vector<double> start(s.stages.size(), 0.0);
  for (size_t k = 1; k < s.stages.size(); ++k) start[k] = start[k - 1] + latency[k - 1];
  return start;
}

// ---------------------------------------------------------------------------
// Programming

enum class ProgramMode { OneShot, Verified };

struct ProgramOptions {
  ProgramMode mode = ProgramMode::OneShot;
  double tolerance = 0.0;  // siemens, verified mode
  int max_pulses = 20;
};

struct ProgramStats {
  int64_t cells = 0;
  int64_t pulses = 0;
  int64_t flagged = 0;  // cells that hit max_pulses outside tolerance
  double max_residual = 0.0;
  double sum_residual = 0.0;

  double mean_pulses() const { return cells ? static_cast<double>(pulses) / static_cast<double>(cells) : 0.0; }
  double mean_residual() const { return cells ? sum_residual / static_cast<double>(cells) : 0.0; }
  void add(const ProgramStats& o) {
    cells += o.cells;
    pulses += o.pulses;
    flagged += o.flagged;
    max_residual = std::max(max_residual, o.max_residual);
    sum_residual += o.sum_residual;
  }
};

namespace detail {
inline void record_cell(ProgramStats& st, double g, double target, int pulses, bool flagged) {
  const double r = std::abs(g - target);
  ++st.cells;
  st.pulses += pulses;
  st.flagged += flagged ? 1 : 0;
  st.max_residual = std::max(st.max_residual, r);
  st.sum_residual += r;
}

// Programs one list of cells with the write-verify loop.
inline void verify_cells(const std::vector<double>& target, std::vector<double>& g, const TileState& t, double tol,
                         int max_pulses, RngStream& rng, ProgramStats& st) {
  const double rate = t.profile.write_variation_rate;
  const DeviceParams& dev = t.device;
  g.resize(target.size());
  for (size_t c = 0; c < target.size(); ++c) {
    const double tg = target[c];
    if (!(tg >= dev.g_hrs && tg <= dev.g_lrs))
      throw PreconditionError("program: target conductance outside [g_hrs, g_lrs]");
    if (rate == 0.0) {
      g[c] = tg;
      record_cell(st, g[c], tg, 1, false);
      continue;
    }
    const bool fixed_eps = t.profile.variation_mode == VariationMode::DeviceToDevice;
    const double eps0 = fixed_eps ? rng.normal(0.0, rate) : 0.0;
    int p = 0;
    bool ok = false;
    double v = tg;
    while (p < max_pulses && !ok) {
      const double eps = fixed_eps ? eps0 : rng.normal(0.0, rate);
      v = std::clamp(tg * (1.0 + eps), dev.g_hrs, dev.g_lrs);
      ++p;
      ok = std::abs(v - tg) <= tol;
    }
    g[c] = v;
    record_cell(st, v, tg, p, !ok);
  }
}
}  // namespace detail

// Write-verify programming of a tile's targets (array cells, then reference column).
inline ProgramStats program_tile_verified(TileState& t, double tol, int max_pulses, RngStream& rng) {
  require(tol > 0.0, "rvw: tolerance must be > 0");
  require(max_pulses >= 1, "rvw: max_pulses must be >= 1");
  ProgramStats st;
  std::vector<double> g, ref;
  detail::verify_cells(t.target, g, t, tol, max_pulses, rng, st);
  detail::verify_cells(t.ref_target, ref, t, tol, max_pulses, rng, st);
  t.ref_g = std::move(ref);
  set_conductances(t, std::move(g));
  return st;
}

inline ProgramStats program_tile_oneshot(TileState& t, RngStream& rng) {
  program_tile(t, rng);
  ProgramStats st;
  for (size_t c = 0; c < t.target.size(); ++c) detail::record_cell(st, t.g[c], t.target[c], 1, false);
  for (size_t c = 0; c < t.ref_target.size(); ++c) detail::record_cell(st, t.ref_g[c], t.ref_target[c], 1, false);
  return st;
}

// Mapped state of one slot. Weights under `mask` live in digital memory: their
// cells hold g_hrs and the digital path adds their exact partial products.
struct SlotState {
  TileGroup group;
  std::vector<int64_t> w_int;    // quantized weights, row-major in x out
  double w_scale = 1.0;
  double x_scale = 1.0;
  std::vector<uint8_t> mask;     // empty or in x out
  std::vector<int64_t> digital;  // digital weights for masked entries (0 elsewhere)

  int in() const { return group.layout.in; }
  int out() const { return group.layout.out; }
  int64_t masked() const {
    int64_t n = 0;
    for (uint8_t b : mask) n += b;
    return n;
  }
};

struct Chip {
  TilePlan plan;
  NonIdealityProfile profile;
  int act_bits = 0;
  std::vector<SlotState> slots;
  ProgramStats stats;
  bool programmed = false;

  int64_t sram_weights() const {
    int64_t n = 0;
    for (const auto& s : slots) n += s.masked();
    return n;
  }
};

inline ProgramStats program_group(TileGroup& grp, int first_tile, RngStream& rng, const ProgramOptions& opt) {
  ProgramStats st;
  for (int k = 0; k < static_cast<int>(grp.tiles.size()); ++k) {
    RngStream tr = rng.split(static_cast<uint64_t>(first_tile + k), 0);
    if (opt.mode == ProgramMode::Verified)
      st.add(program_tile_verified(grp.tiles[k], opt.tolerance, opt.max_pulses, tr));
    else
      st.add(program_tile_oneshot(grp.tiles[k], tr));
  }
  return st;
}

// Encodes and programs every slot of the plan. Tile k of the plan draws its
// noise from rng.split(k, 0), so results do not depend on programming order.
inline Chip program_plan(const TilePlan& plan, const NetworkModel& m, const NonIdealityProfile& prof, RngStream& rng,
                         const ProgramOptions& opt = {}) {
  prof.validate();
  require_dims(plan.slots.size() == m.slots.size(), "program_plan: plan does not match model slots");
  if (m.quant.label() != plan.spec.label()) throw PreconditionError("program_plan: model quantization != plan spec");
  if (opt.mode == ProgramMode::Verified) {
    require(opt.tolerance > 0.0, "rvw: tolerance must be > 0");
    require(opt.max_pulses >= 1, "rvw: max_pulses must be >= 1");
  }
  Chip c;
  c.plan = plan;
  c.profile = prof;
  c.act_bits = plan.spec.activation_bits;
  for (const SlotMap& sm : plan.slots) {
    const Mat& w = m.slot_weight(sm.slot);
    require_dims(w.rows() == sm.layout.in && w.cols() == sm.layout.out, "program_plan: slot shape != plan");
    SlotState ss;
    ss.w_int = slot_int_weights(m, sm.slot, &ss.w_scale);
    ss.x_scale = slot_input_scale(m, sm.slot);
    ss.group = encode_group(ss.w_int, sm.layout, plan.device, prof);
    c.stats.add(program_group(ss.group, sm.first_tile, rng, opt));
    c.slots.push_back(std::move(ss));
  }
  c.programmed = true;
  return c;
}

// Weights as stored (integer units): cell read-back plus digital weights.
inline std::vector<double> read_back(const Chip& c, int slot) {
  const SlotState& s = c.slots[slot];
  std::vector<double> w = effective_weights(s.group);
  for (size_t k = 0; k < s.mask.size(); ++k)
    if (s.mask[k]) w[k] += static_cast<double>(s.digital[k]);
  return w;
}

// Per-slot effective weights in model units, for noise-aware training.
inline std::vector<Mat> effective_weight_mats(const Chip& c) {
  std::vector<Mat> out;
  for (int s = 0; s < static_cast<int>(c.slots.size()); ++s) {
    const SlotState& ss = c.slots[s];
    const std::vector<double> w = read_back(c, s);
    Mat m(ss.in(), ss.out());
    for (int i = 0; i < ss.in(); ++i)
      for (int o = 0; o < ss.out(); ++o) m(i, o) = w[static_cast<size_t>(i) * ss.out() + o] * ss.w_scale;
    out.push_back(std::move(m));
  }
  return out;
}

// Crossbar path plus the digital path for masked weights (integer units).
inline std::vector<double> slot_vmm(const SlotState& s, const std::vector<int64_t>& x, int act_bits, VmmFlags* flags,
                                    SliceScratch* scratch) {
  std::vector<double> acc = bit_sliced_vmm(x, act_bits, s.group, flags, scratch);
  if (s.mask.empty()) return acc;
  const int out = s.out();
  for (int i = 0; i < s.in(); ++i) {
    if (x[i] == 0) continue;
    for (int o = 0; o < out; ++o) {
      const size_t k = static_cast<size_t>(i) * out + o;
      if (s.mask[k]) acc[o] += static_cast<double>(x[i] * s.digital[k]);
    }
  }
  return acc;
}

// Routes every dense product of the model through the programmed chip.
class TileBackend : public DenseBackend {
 public:
  explicit TileBackend(const Chip& c) : chip_(c), scratch_(c.slots.size()) {
    if (!c.programmed) throw StateError("tile backend: chip not programmed");
  }

  void product(const NetworkModel& m, int slot, const Mat& X, Mat& Y, Mat* xq) override {
    if (m.slots.size() != chip_.slots.size() || slot < 0 || slot >= static_cast<int>(chip_.slots.size()))
      throw StateError("tile backend: model is not mapped to this chip");
    const SlotState& s = chip_.slots[slot];
    require_dims(X.cols() == s.in(), "tile backend: input width != mapped rows");
    const int A = chip_.act_bits;
    const double sx = s.x_scale, sw = s.w_scale;
    Y.resize(X.rows(), s.out());
    if (xq) xq->resize(X.rows(), X.cols());
    std::vector<int64_t> xi(s.in());
    for (int r = 0; r < X.rows(); ++r) {
      for (int i = 0; i < s.in(); ++i) {
        xi[i] = quantize_int(X(r, i), sx, A);
        if (xq) (*xq)(r, i) = static_cast<double>(xi[i]) * sx;
      }
      const std::vector<double> acc = slot_vmm(s, xi, A, &flags, &scratch_[slot]);
      for (int o = 0; o < s.out(); ++o) Y(r, o) = acc[o] * sx * sw;
    }
  }

  VmmFlags flags;

 private:
  const Chip& chip_;
  std::vector<SliceScratch> scratch_;
};

}  // namespace cimcall
