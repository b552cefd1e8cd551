#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "device.hpp"
#include "errors.hpp"
#include "nodal.hpp"
#include "quant.hpp"
#include "rng.hpp"

namespace cimcall {

struct TileState {
  int rows = 0;
  int cols = 0;
  DeviceParams device;
  NonIdealityProfile profile;
  std::vector<double> target;  // row-major rows x cols, what programming aims for
  std::vector<double> g;       // row-major rows x cols, what the cells hold
  std::vector<double> ref_target;  // per-row HRS reference column
  std::vector<double> ref_g;
  int driven_rows = 0;         // rows [driven_rows, rows) are idle and held at 0 V
  std::shared_ptr<const Eigen::MatrixXd> transfer;  // driven_rows x cols, only with wires
  bool programmed = false;

  double g_at(int i, int j) const { return g[static_cast<size_t>(i) * cols + j]; }

  // Column current of one count: one cell level step driven by one DAC step.
  double unit_current() const {
    const double cell_step = device.window() / static_cast<double>(device.levels_per_cell - 1);
    const double dac_step = profile.dac_full_scale / (std::ldexp(1.0, profile.dac_bits) - 1.0);
    return cell_step * dac_step;
  }
  int64_t adc_top() const { return (int64_t{1} << profile.adc_bits) - 1; }
  double adc_full_scale() const { return static_cast<double>(adc_top()) * unit_current(); }
};

inline TileState make_tile(int rows, int cols, const DeviceParams& dev, const NonIdealityProfile& prof) {
  require(rows >= 1 && cols >= 1 && rows <= 1024 && cols <= 1024, "make_tile: size must be in [1,1024]");
  dev.validate();
  prof.validate();
  TileState t;
  t.rows = rows;
  t.cols = cols;
  t.device = dev;
  t.profile = prof;
  t.target.assign(static_cast<size_t>(rows) * cols, dev.g_hrs);
  t.ref_target.assign(rows, dev.g_hrs);
  t.ref_g = t.ref_target;
  t.driven_rows = rows;
  return t;
}

// Recompute the wire model from the programmed conductances.
inline void refresh_wire_model(TileState& t) {
  if (!t.profile.wires_active()) {
    t.transfer.reset();
    return;
  }
  const double r = t.profile.wire_resistance_per_segment;
  if (t.profile.wire_model == WireModel::FirstOrder)
    t.transfer = std::make_shared<Eigen::MatrixXd>(first_order_transfer(t.rows, t.cols, t.g, r, t.driven_rows));
  else
    t.transfer = std::make_shared<Eigen::MatrixXd>(wire_transfer(t.rows, t.cols, t.g, r, t.driven_rows));
}

// Install programmed conductances directly (each must lie in the window).
inline void set_conductances(TileState& t, std::vector<double> g) {
  require_dims(g.size() == t.target.size(), "set_conductances: size mismatch");
  for (double x : g)
    if (!(x >= t.device.g_hrs && x <= t.device.g_lrs))
      throw PreconditionError("set_conductances: conductance out of window");
  t.g = std::move(g);
  t.programmed = true;
  refresh_wire_model(t);
}

// One-shot programming of the current targets (array cells, then the reference column).
inline void program_tile(TileState& t, RngStream& rng) {
  const double rate = t.profile.write_variation_rate;
  std::vector<double> g = apply_write_variation(t.target, rate, t.device, rng);
  t.ref_g = apply_write_variation(t.ref_target, rate, t.device, rng);
  set_conductances(t, std::move(g));
}

struct VmmFlags {
  int64_t dac_clamped = 0;
  int64_t adc_saturated = 0;
  int64_t adc_dead_zone = 0;
  int64_t conversions = 0;

  void add(const VmmFlags& o) {
    dac_clamped += o.dac_clamped;
    adc_saturated += o.adc_saturated;
    adc_dead_zone += o.adc_dead_zone;
    conversions += o.conversions;
  }
};

struct VmmResult {
  std::vector<int64_t> codes;  // post-ADC
  std::vector<double> values;  // codes dequantized to amps
  std::vector<double> currents;  // analog column currents before the ADC
  double reference = 0.0;        // reference column current, subtracted at every ADC input
  VmmFlags flags;
};

inline std::vector<double> ideal_vmm(const std::vector<double>& x, const std::vector<double>& w, int rows,
                                     int cols) {
  require_dims(static_cast<int>(x.size()) == rows, "ideal_vmm: dim(x) != rows(w)");
  require_dims(static_cast<int64_t>(w.size()) == int64_t{rows} * cols, "ideal_vmm: w size mismatch");
  std::vector<double> y(cols, 0.0);
  for (int j = 0; j < cols; ++j) {
    double s = 0.0;
    for (int i = 0; i < rows; ++i) s += x[i] * w[static_cast<size_t>(i) * cols + j];
    y[j] = s;
  }
  return y;
}

// Column currents for DAC output voltages v (length rows); returns the
// reference column current. Every ADC digitizes column minus reference, which
// removes the HRS leakage floor. The caller owns the output buffer so the
// bit-serial loop does not allocate.
inline double column_currents(const TileState& t, const double* v, double* out) {
  std::fill(out, out + t.cols, 0.0);
  double ref = 0.0;
  const bool wires = t.profile.wires_active();
  if (wires && !t.transfer) throw StateError("analytical_vmm: wire model not prepared");
  for (int i = 0; i < t.driven_rows; ++i) {
    const double vi = v[i];
    if (vi == 0.0) continue;
    ref += vi * t.ref_g[i];
    if (wires) {
      const auto row = t.transfer->row(i);
      for (int j = 0; j < t.cols; ++j) out[j] += vi * row(j);
    } else {
      const double* gr = t.g.data() + static_cast<size_t>(i) * t.cols;
      for (int j = 0; j < t.cols; ++j) out[j] += vi * gr[j];
    }
  }
  return ref;
}

inline void check_vmm_input(const TileState& t, const std::vector<double>& x) {
  require_dims(static_cast<int>(x.size()) == t.rows, "analytical_vmm: input length != tile rows");
  if (!t.programmed) throw StateError("analytical_vmm: tile not programmed");
  for (int i = t.driven_rows; i < t.rows; ++i)
    require(x[i] == 0.0, "analytical_vmm: idle row driven with non-zero input");
}

// DAC -> crossbar current summation (with the wire model when enabled) -> ADC.
inline VmmResult analytical_vmm(const std::vector<double>& x, const TileState& t) {
  check_vmm_input(t, x);
  VmmResult r;
  std::vector<double> v(t.rows, 0.0);
  for (int i = 0; i < t.driven_rows; ++i) {
    bool c = false;
    v[i] = dac_level(x[i], t.profile, &c);
    r.flags.dac_clamped += c ? 1 : 0;
  }
  r.currents.assign(t.cols, 0.0);
  r.reference = column_currents(t, v.data(), r.currents.data());
  const double fs = t.adc_full_scale();
  std::vector<double> net(t.cols);
  for (int j = 0; j < t.cols; ++j) net[j] = r.currents[j] - r.reference;
  const AdcOutput a = adc_transfer(net, fs, t.profile);
  r.codes = a.codes;
  r.flags.adc_saturated = a.saturated;
  r.flags.adc_dead_zone = a.dead_zone;
  r.flags.conversions = t.cols;
  r.values.resize(t.cols);
  const double lsb = fs / static_cast<double>(t.adc_top());
  for (int j = 0; j < t.cols; ++j) r.values[j] = static_cast<double>(r.codes[j]) * lsb;
  return r;
}

// Reference codes: ideal DAC, target conductances, no wires, plain ADC.
inline std::vector<int64_t> ideal_codes(const std::vector<double>& x, const TileState& t) {
  require_dims(static_cast<int>(x.size()) == t.rows, "ideal_codes: input length != tile rows");
  NonIdealityProfile p = t.profile;
  p.enabled = kNone;
  std::vector<double> v(t.rows, 0.0);
  for (int i = 0; i < t.driven_rows; ++i) {
    bool c = false;
    v[i] = dac_level(x[i], p, &c);
  }
  std::vector<double> cur = ideal_vmm(v, t.target, t.rows, t.cols);
  double ref = 0.0;
  for (int i = 0; i < t.rows; ++i) ref += v[i] * t.ref_target[i];
  for (double& c : cur) c -= ref;
  return adc_transfer(cur, t.adc_full_scale(), p).codes;
}

// ---------------------------------------------------------------------------
// Measurement library

inline uint64_t tile_fingerprint(const TileState& t) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&h](const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  feed(&t.rows, sizeof t.rows);
  feed(&t.cols, sizeof t.cols);
  feed(&t.driven_rows, sizeof t.driven_rows);
  feed(t.target.data(), t.target.size() * sizeof(double));
  return h;
}

struct MeasurementLibrary {
  int rows = 0;
  int cols = 0;
  size_t min_entries = 10000;
  std::map<uint64_t, std::vector<double>> entries;  // fingerprint -> count x cols deviations, in ADC codes

  size_t count(uint64_t fp) const {
    auto it = entries.find(fp);
    return it == entries.end() ? 0 : it->second.size() / static_cast<size_t>(cols);
  }
  const double* sample(uint64_t fp, size_t k) const { return entries.at(fp).data() + k * cols; }
};

struct LibraryOptions {
  bool use_oracle = false;  // use the nodal oracle for small tiles
  OracleOptions oracle;
};

inline std::vector<double> random_drive(const TileState& t, RngStream& rng) {
  const int64_t top = (int64_t{1} << t.profile.dac_bits) - 1;
  const double step = t.profile.dac_full_scale / static_cast<double>(top);
  std::vector<double> x(t.rows, 0.0);
  for (int i = 0; i < t.driven_rows; ++i) x[i] = static_cast<double>(rng.uniform_int(0, top)) * step;
  return x;
}

// Each sample reprograms the tile from its targets with a fresh stream, drives
// a random input and stores measured-minus-ideal codes.
inline void add_to_library(MeasurementLibrary& lib, const TileState& tile, size_t samples, RngStream& rng,
                           const LibraryOptions& opt = {}) {
  require(samples >= lib.min_entries, "build_measurement_library: samples below configured minimum");
  if (lib.rows == 0) {
    lib.rows = tile.rows;
    lib.cols = tile.cols;
  }
  require_dims(lib.rows == tile.rows && lib.cols == tile.cols, "build_measurement_library: array size mismatch");
  const uint64_t fp = tile_fingerprint(tile);
  std::vector<double>& dst = lib.entries[fp];
  dst.reserve(dst.size() + samples * tile.cols);
  TileState work = tile;
  for (size_t s = 0; s < samples; ++s) {
    RngStream prog = rng.split(fp, 2 * s);
    RngStream in = rng.split(fp, 2 * s + 1);
    program_tile(work, prog);
    const std::vector<double> x = random_drive(work, in);
    const std::vector<int64_t> ref = ideal_codes(x, work);
    std::vector<int64_t> meas;
    if (opt.use_oracle && work.rows * work.cols <= opt.oracle.max_cells && work.profile.wires_active()) {
      NonIdealityProfile p = work.profile;
      std::vector<double> v(work.rows, 0.0);
      for (int i = 0; i < work.driven_rows; ++i) {
        bool c = false;
        v[i] = dac_level(x[i], p, &c);
      }
      auto cur = nodal_oracle_vmm(v, work.rows, work.cols, work.g, p.wire_resistance_per_segment, opt.oracle);
      double ref = 0.0;
      for (int i = 0; i < work.rows; ++i) ref += v[i] * work.ref_g[i];
      for (double& c : cur) c -= ref;
      meas = adc_transfer(cur, work.adc_full_scale(), p).codes;
    } else {
      meas = analytical_vmm(x, work).codes;
    }
    for (int j = 0; j < tile.cols; ++j) dst.push_back(static_cast<double>(meas[j] - ref[j]));
  }
}

inline MeasurementLibrary build_measurement_library(const TileState& tile, size_t samples, RngStream& rng,
                                                    const LibraryOptions& opt = {}, size_t min_entries = 10000) {
  MeasurementLibrary lib;
  lib.min_entries = min_entries;
  add_to_library(lib, tile, samples, rng, opt);
  return lib;
}

inline VmmResult library_vmm(const std::vector<double>& x, const MeasurementLibrary& lib, const TileState& t,
                             RngStream& rng) {
  require_dims(static_cast<int>(x.size()) == t.rows, "library_vmm: input length != tile rows");
  const uint64_t fp = tile_fingerprint(t);
  const size_t n = lib.count(fp);
  if (n == 0) throw LibraryMissError("library_vmm: no entry for tile fingerprint " + std::to_string(fp));
  const size_t k = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(n) - 1));
  const double* dev = lib.sample(fp, k);
  const std::vector<int64_t> ref = ideal_codes(x, t);
  VmmResult r;
  r.codes.resize(t.cols);
  r.values.resize(t.cols);
  const double lsb = t.adc_full_scale() / static_cast<double>(t.adc_top());
  for (int j = 0; j < t.cols; ++j) {
    const double c = static_cast<double>(ref[j]) + dev[j];
    r.codes[j] = static_cast<int64_t>(std::clamp(std::nearbyint(c), 0.0, static_cast<double>(t.adc_top())));
    r.values[j] = static_cast<double>(r.codes[j]) * lsb;
  }
  r.currents = r.values;
  r.flags.conversions = t.cols;
  return r;
}

namespace detail {
inline void put_u32(std::ostream& o, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  o.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& o, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  o.write(reinterpret_cast<const char*>(b), 8);
}
inline void put_f64(std::ostream& o, double d) {
  uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(o, v);
}
inline uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw ConfigError("binary read: truncated file");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}
inline uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw ConfigError("binary read: truncated file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}
inline double get_f64(std::istream& in) {
  const uint64_t v = get_u64(in);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}
}  // namespace detail

inline constexpr char kLibraryMagic[8] = {'X', 'B', 'A', 'R', 'L', 'I', 'B', '\0'};
inline constexpr uint32_t kLibraryVersion = 1;

// Layout (all little-endian): magic[8], u32 version, u32 rows, u32 cols,
// u32 fingerprint count, then per fingerprint: u64 fingerprint, u64 vector
// count, count*cols f64 deviations.
inline void save_library(const MeasurementLibrary& lib, const std::string& path) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw ConfigError("save_library: cannot open " + path);
  o.write(kLibraryMagic, 8);
  detail::put_u32(o, kLibraryVersion);
  detail::put_u32(o, static_cast<uint32_t>(lib.rows));
  detail::put_u32(o, static_cast<uint32_t>(lib.cols));
  detail::put_u32(o, static_cast<uint32_t>(lib.entries.size()));
  for (const auto& [fp, v] : lib.entries) {
    detail::put_u64(o, fp);
    detail::put_u64(o, v.size() / static_cast<size_t>(lib.cols));
    for (double d : v) detail::put_f64(o, d);
  }
  if (!o) throw ConfigError("save_library: write failed for " + path);
}

inline MeasurementLibrary load_library(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("load_library: cannot open " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kLibraryMagic, 8) != 0)
    throw ConfigError("load_library: bad magic in " + path);
  if (detail::get_u32(in) != kLibraryVersion) throw ConfigError("load_library: unsupported version");
  MeasurementLibrary lib;
  lib.rows = static_cast<int>(detail::get_u32(in));
  lib.cols = static_cast<int>(detail::get_u32(in));
  const uint32_t n = detail::get_u32(in);
  lib.min_entries = 0;
  for (uint32_t e = 0; e < n; ++e) {
    const uint64_t fp = detail::get_u64(in);
    const uint64_t cnt = detail::get_u64(in);
    std::vector<double>& v = lib.entries[fp];
    v.resize(cnt * static_cast<uint64_t>(lib.cols));
    for (double& d : v) d = detail::get_f64(in);
  }
  return lib;
}

// ---------------------------------------------------------------------------
// Bit slicing

// A logical in x out integer weight matrix spread over a grid of tiles. Each
// weight owns 2*slices adjacent global columns: (slice 0 +, slice 0 -,
// slice 1 +, ...), slice s holding bits [s*bpc, (s+1)*bpc) of |w|. Global
// columns wrap into the next column block of tiles when a tile fills up.
struct SliceLayout {
  int in = 0;
  int out = 0;
  int weight_bits = 0;
  int bits_per_cell = 1;
  int slices = 0;
  int tile_rows = 0;
  int tile_cols = 0;
  int row_blocks = 0;
  int col_blocks = 0;

  int cols_per_weight() const { return 2 * slices; }
  int64_t total_cols() const { return int64_t{out} * cols_per_weight(); }
  int tiles() const { return row_blocks * col_blocks; }
  int tile_index(int rb, int cb) const { return rb * col_blocks + cb; }
  int64_t cells() const { return int64_t{in} * total_cols(); }
};

inline SliceLayout make_layout(int in, int out, int weight_bits, int bits_per_cell, int tile_rows, int tile_cols) {
  if (in <= 0 || out <= 0) throw PreconditionError("partition: weight matrix dimension 0");
  if (bits_per_cell <= 0 || weight_bits % bits_per_cell != 0)
    throw ConfigError("bit slicing: weight bits " + std::to_string(weight_bits) + " not divisible by bits per cell " +
                      std::to_string(bits_per_cell));
  SliceLayout L;
  L.in = in;
  L.out = out;
  L.weight_bits = weight_bits;
  L.bits_per_cell = bits_per_cell;
  L.slices = weight_bits / bits_per_cell;
  L.tile_rows = tile_rows;
  L.tile_cols = tile_cols;
  L.row_blocks = (in + tile_rows - 1) / tile_rows;
  L.col_blocks = static_cast<int>((L.total_cols() + tile_cols - 1) / tile_cols);
  return L;
}

struct TileGroup {
  SliceLayout layout;
  std::vector<TileState> tiles;
};

inline int slice_digit(int64_t w, int pol, int s, int bpc) {
  const int64_t mag = pol == 0 ? std::max<int64_t>(w, 0) : std::max<int64_t>(-w, 0);
  return static_cast<int>((mag >> (s * bpc)) & ((int64_t{1} << bpc) - 1));
}

// Fresh, unprogrammed tiles whose targets encode w (row-major in x out).
inline TileGroup encode_group(const std::vector<int64_t>& w, const SliceLayout& L, const DeviceParams& dev,
                              const NonIdealityProfile& prof) {
  require_dims(static_cast<int64_t>(w.size()) == int64_t{L.in} * L.out, "encode_group: weight size mismatch");
  require(dev.levels_power_of_two() && dev.bits_per_cell() == L.bits_per_cell,
          "encode_group: layout bits per cell does not match device levels");
  const int64_t lim = (int64_t{1} << (L.slices * L.bits_per_cell)) - 1;
  TileGroup grp;
  grp.layout = L;
  for (int rb = 0; rb < L.row_blocks; ++rb)
    for (int cb = 0; cb < L.col_blocks; ++cb) {
      TileState t = make_tile(L.tile_rows, L.tile_cols, dev, prof);
      t.driven_rows = std::min(L.tile_rows, L.in - rb * L.tile_rows);
      grp.tiles.push_back(std::move(t));
    }
  const double top = static_cast<double>(dev.levels_per_cell - 1);
  for (int i = 0; i < L.in; ++i) {
    const int rb = i / L.tile_rows, lr = i % L.tile_rows;
    for (int o = 0; o < L.out; ++o) {
      const int64_t wv = w[static_cast<size_t>(i) * L.out + o];
      require(std::abs(wv) <= lim, "encode_group: weight magnitude exceeds slice capacity");
      for (int s = 0; s < L.slices; ++s)
        for (int pol = 0; pol < 2; ++pol) {
          const int64_t gc = int64_t{o} * L.cols_per_weight() + 2 * s + pol;
          const int cb = static_cast<int>(gc / L.tile_cols), lc = static_cast<int>(gc % L.tile_cols);
          TileState& t = grp.tiles[L.tile_index(rb, cb)];
          t.target[static_cast<size_t>(lr) * t.cols + lc] =
              conductance_quantize(slice_digit(wv, pol, s, L.bits_per_cell) / top, dev);
        }
    }
  }
  return grp;
}

// Decoding weight of every tile column: output index and signed place value.
struct ColumnDecode {
  std::vector<int> output;   // -1 for unused columns
  std::vector<double> place;  // +-2^(s*bpc)
};

inline ColumnDecode column_decode(const SliceLayout& L, int cb) {
  ColumnDecode d;
  d.output.assign(L.tile_cols, -1);
  d.place.assign(L.tile_cols, 0.0);
  for (int lc = 0; lc < L.tile_cols; ++lc) {
    const int64_t gc = int64_t{cb} * L.tile_cols + lc;
    if (gc >= L.total_cols()) break;
    const int k = static_cast<int>(gc % L.cols_per_weight());
    d.output[lc] = static_cast<int>(gc / L.cols_per_weight());
    const double pv = std::ldexp(1.0, (k / 2) * L.bits_per_cell);
    d.place[lc] = (k % 2 == 0) ? pv : -pv;
  }
  return d;
}

// Input cycles of a two's-complement activation word streamed through a
// dac_bits-wide DAC. Each cycle carries an unsigned digit per row and a
// signed place value.
struct InputCycle {
  std::vector<int64_t> digits;
  double factor;
};

inline std::vector<InputCycle> input_cycles(const std::vector<int64_t>& x, int act_bits, int dac_bits) {
  if (dac_bits <= 0 || act_bits % dac_bits != 0)
    throw ConfigError("bit slicing: activation bits " + std::to_string(act_bits) + " not divisible by dac bits " +
                      std::to_string(dac_bits));
  const int64_t lo = -(int64_t{1} << (act_bits - 1)), hi = (int64_t{1} << (act_bits - 1)) - 1;
  for (int64_t v : x) require(v >= lo && v <= hi, "bit_sliced_vmm: input exceeds activation precision");
  const uint64_t word_mask = act_bits >= 64 ? ~0ull : ((1ull << act_bits) - 1);
  std::vector<InputCycle> cyc;
  if (dac_bits == 1) {
    for (int k = 0; k < act_bits; ++k) {
      InputCycle c;
      c.digits.resize(x.size());
      for (size_t i = 0; i < x.size(); ++i) c.digits[i] = static_cast<int64_t>(((static_cast<uint64_t>(x[i]) & word_mask) >> k) & 1u);
      c.factor = (k == act_bits - 1) ? -std::ldexp(1.0, k) : std::ldexp(1.0, k);
      cyc.push_back(std::move(c));
    }
    return cyc;
  }
  const int n = act_bits / dac_bits;
  const uint64_t dmask = (1ull << dac_bits) - 1;
  for (int k = 0; k < n; ++k) {
    InputCycle c;
    c.digits.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i)
      c.digits[i] = static_cast<int64_t>(((static_cast<uint64_t>(x[i]) & word_mask) >> (k * dac_bits)) & dmask);
    c.factor = std::ldexp(1.0, k * dac_bits);
    cyc.push_back(std::move(c));
  }
  InputCycle sign;
  sign.digits.resize(x.size());
  for (size_t i = 0; i < x.size(); ++i) sign.digits[i] = x[i] < 0 ? 1 : 0;
  sign.factor = -std::ldexp(1.0, act_bits);
  cyc.push_back(std::move(sign));
  return cyc;
}

// Scratch buffers reused across calls; one per thread.
struct SliceScratch {
  std::vector<double> volts;
  std::vector<double> current;
  std::vector<ColumnDecode> decode;
  const TileGroup* cached = nullptr;
};

// Full-precision accumulator of x . w in integer units (length out). Exact
// when every non-ideality is off.
inline std::vector<double> bit_sliced_vmm(const std::vector<int64_t>& x, int act_bits, const TileGroup& grp,
                                          VmmFlags* flags = nullptr, SliceScratch* scratch = nullptr) {
  const SliceLayout& L = grp.layout;
  require_dims(static_cast<int>(x.size()) == L.in, "bit_sliced_vmm: input length != weight rows");
  require(!grp.tiles.empty(), "bit_sliced_vmm: empty tile group");
  const NonIdealityProfile& prof = grp.tiles.front().profile;
  SliceScratch local;
  SliceScratch& sc = scratch ? *scratch : local;
  if (sc.cached != &grp || sc.decode.size() != static_cast<size_t>(L.col_blocks)) {
    sc.decode.clear();
    for (int cb = 0; cb < L.col_blocks; ++cb) sc.decode.push_back(column_decode(L, cb));
    sc.cached = &grp;
  }
  sc.volts.assign(L.tile_rows, 0.0);
  sc.current.assign(L.tile_cols, 0.0);
  std::vector<double> acc(L.out, 0.0);
  const auto cycles = input_cycles(x, act_bits, prof.dac_bits);
  VmmFlags f;
  for (const InputCycle& cyc : cycles) {
    for (int rb = 0; rb < L.row_blocks; ++rb) {
      const int base = rb * L.tile_rows;
      const TileState& t0 = grp.tiles[L.tile_index(rb, 0)];
      bool any = prof.has(kDacDriver) && prof.dac_offset != 0.0;
      const double step = prof.dac_full_scale / (std::ldexp(1.0, prof.dac_bits) - 1.0);
      for (int i = 0; i < t0.driven_rows; ++i) {
        bool c = false;
        sc.volts[i] = dac_level(static_cast<double>(cyc.digits[base + i]) * step, prof, &c);
        f.dac_clamped += c ? 1 : 0;
        any = any || cyc.digits[base + i] != 0;
      }
      if (!any) continue;  // all-zero drive reads zero current everywhere
      for (int cb = 0; cb < L.col_blocks; ++cb) {
        const TileState& t = grp.tiles[L.tile_index(rb, cb)];
        if (!t.programmed) throw StateError("bit_sliced_vmm: tile not programmed");
        const double ref = column_currents(t, sc.volts.data(), sc.current.data());
        const double fs = t.adc_full_scale();
        const ColumnDecode& d = sc.decode[cb];
        for (int lc = 0; lc < L.tile_cols; ++lc) {
          const int o = d.output[lc];
          if (o < 0) break;
          bool sat = false, dead = false;
          const int64_t code = adc_code(sc.current[lc] - ref, fs, prof, &sat, &dead);
          f.adc_saturated += sat ? 1 : 0;
          f.adc_dead_zone += dead ? 1 : 0;
          ++f.conversions;
          acc[o] += cyc.factor * d.place[lc] * static_cast<double>(code);
        }
      }
    }
  }
  if (flags) flags->add(f);
  return acc;
}

// Exact integer reference product.
inline std::vector<double> fixed_point_vmm(const std::vector<int64_t>& x, const std::vector<int64_t>& w, int in,
                                           int out) {
  require_dims(static_cast<int>(x.size()) == in && static_cast<int64_t>(w.size()) == int64_t{in} * out,
               "fixed_point_vmm: dimension mismatch");
  std::vector<double> y(out, 0.0);
  for (int o = 0; o < out; ++o) {
    int64_t s = 0;
    for (int i = 0; i < in; ++i) s += x[i] * w[static_cast<size_t>(i) * out + o];
    y[o] = static_cast<double>(s);
  }
  return y;
}

// Weights as the cells actually store them, decoded with the ideal linear
// read-out (HRS offsets cancel in each differential pair).
inline std::vector<double> effective_weights(const TileGroup& grp) {
  const SliceLayout& L = grp.layout;
  std::vector<double> w(static_cast<size_t>(L.in) * L.out, 0.0);
  for (int rb = 0; rb < L.row_blocks; ++rb)
    for (int cb = 0; cb < L.col_blocks; ++cb) {
      const TileState& t = grp.tiles[L.tile_index(rb, cb)];
      const ColumnDecode d = column_decode(L, cb);
      const double step = t.device.window() / static_cast<double>(t.device.levels_per_cell - 1);
      const auto& g = t.programmed ? t.g : t.target;
      for (int lr = 0; lr < t.driven_rows; ++lr)
        for (int lc = 0; lc < L.tile_cols; ++lc) {
          const int o = d.output[lc];
          if (o < 0) break;
          const double level = (g[static_cast<size_t>(lr) * t.cols + lc] - t.device.g_hrs) / step;
          w[static_cast<size_t>(rb * L.tile_rows + lr) * L.out + o] += d.place[lc] * level;
        }
    }
  return w;
}

}  // namespace cimcall
