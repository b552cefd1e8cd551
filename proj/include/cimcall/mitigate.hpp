#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "errors.hpp"
#include "mapper.hpp"
#include "nn.hpp"
#include "rng.hpp"
#include "taskgen.hpp"

namespace cimcall {

// Where the mapped network lives; shared by every technique.
struct HardwareTarget {
  int array_size = 64;
  DeviceParams device;
  NonIdealityProfile profile;
  QuantSpec spec = QuantSpec::fixed(8, 8);
};

// ---------------------------------------------------------------------------
// Noise injection: every training step programs a fresh copy of the current
// weights and trains through the read-back values (straight-through to the
// master weights). Only the weight-level part of the error model is drawn;
// wires and converters are applied at inference.

inline OverrideFn make_noise_injector(const HardwareTarget& hw, double scale, uint64_t seed) {
  NonIdealityProfile p = hw.profile;
  p.write_variation_rate = std::min(1.0, hw.profile.write_variation_rate * scale);
  p.enabled = kNone;
  if (p.write_variation_rate == 0.0) return nullptr;
  return [hw, p, seed](const NetworkModel& m, int, int64_t step, std::vector<Mat>& w) {
    const TilePlan plan = partition_and_map(m, hw.array_size, hw.device, hw.spec);
    RngStream rng(seed, {0x4E4F495345ull, static_cast<uint64_t>(step)});
    w = effective_weight_mats(program_plan(plan, m, p, rng));
    return true;
  };
}

struct VatConfig {
  TrainConfig train{5, 0.1, 5.0, 1};
  double noise_scale = 1.0;
};

inline NetworkModel vat_train(const NetworkModel& model, const std::vector<SyntheticRead>& data,
                              const HardwareTarget& hw, const VatConfig& cfg) {
  require(cfg.train.epochs >= 1, "vat: epochs must be >= 1");
  require(cfg.noise_scale >= 0.0, "vat: noise scale must be >= 0");
  NetworkModel m = model;
  train_model(m, data, cfg.train, ce_loss(), make_noise_injector(hw, cfg.noise_scale, cfg.train.seed));
  return m;
}

struct KdConfig {
  TrainConfig train{5, 0.1, 5.0, 1};
  double temperature = 2.0;
  double lambda = 0.5;
  double noise_scale = 1.0;
};

inline std::vector<Mat> teacher_logits(const NetworkModel& teacher, const std::vector<SyntheticRead>& data) {
  ExactBackend be(teacher);
  std::vector<Mat> out;
  out.reserve(data.size());
  for (const auto& r : data) out.push_back(forward_logits(teacher, signal_matrix(r.signal), be, nullptr));
  return out;
}

inline LossFn kd_loss_fn(std::shared_ptr<const std::vector<Mat>> tl, double T, double lambda) {
  return [tl, T, lambda](const NetworkModel&, const Mat& z, const SyntheticRead& r, size_t idx, Mat& dz) {
    return kd_loss(z, (*tl)[idx], r.frame_labels, T, lambda, dz);
  };
}

inline NetworkModel kd_train(const NetworkModel& student, const NetworkModel& teacher,
                             const std::vector<SyntheticRead>& data, const HardwareTarget& hw, const KdConfig& cfg) {
  if (!(cfg.temperature > 0.0)) throw PreconditionError("kd: temperature must be > 0");
  require(cfg.lambda >= 0.0 && cfg.lambda <= 1.0, "kd: lambda must be in [0,1]");
  require(cfg.train.epochs >= 1, "kd: epochs must be >= 1");
  auto tl = std::make_shared<const std::vector<Mat>>(teacher_logits(teacher, data));
  NetworkModel m = student;
  train_model(m, data, cfg.train, kd_loss_fn(tl, cfg.temperature, cfg.lambda),
              make_noise_injector(hw, cfg.noise_scale, cfg.train.seed));
  return m;
}

// ---------------------------------------------------------------------------
// Read-verify-write

inline ProgramStats rvw_program(TileState& tile, double tolerance, int max_pulses, RngStream& rng) {
  return program_tile_verified(tile, tolerance, max_pulses, rng);
}

inline Chip rvw_program(const TilePlan& plan, const NetworkModel& m, const NonIdealityProfile& prof, double tolerance,
                        int max_pulses, RngStream& rng) {
  ProgramOptions opt;
  opt.mode = ProgramMode::Verified;
  opt.tolerance = tolerance;
  opt.max_pulses = max_pulses;
  return program_plan(plan, m, prof, rng, opt);
}

// Probability that one write of target g lands within tol, for the clamped
// multiplicative Gaussian model.
inline double write_hit_probability(double g, double rate, double tol, const DeviceParams& dev) {
  if (rate == 0.0) return 1.0;
  auto Phi = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  const double sd = rate * g;
  double lo = -tol, hi = tol;
  // Writes past a window edge clamp onto it; that edge is within tol when
  // g itself is within tol of the edge.
  const double up = dev.g_lrs - g, down = g - dev.g_hrs;
  const double p_hi = up <= tol ? 1.0 : Phi(hi / sd);
  const double p_lo = down <= tol ? 0.0 : Phi(lo / sd);
  return p_hi - p_lo;
}

// ---------------------------------------------------------------------------
// Random sparse adaptation

enum class RsaMode { Random, Ranked };

struct RsaMask {
  std::vector<std::vector<uint8_t>> slots;  // per model slot, in x out
  double fraction = 0.0;
  RsaMode mode = RsaMode::Random;

  int64_t total() const {
    int64_t n = 0;
    for (const auto& s : slots) n += static_cast<int64_t>(s.size());
    return n;
  }
  int64_t selected() const {
    int64_t n = 0;
    for (const auto& s : slots)
      for (uint8_t b : s) n += b;
    return n;
  }
  double density() const { return total() ? static_cast<double>(selected()) / static_cast<double>(total()) : 0.0; }
};

// Expected error magnitude of every stored weight, in model units.
inline std::vector<std::vector<double>> weight_error_stats(const Chip& c) {
  std::vector<std::vector<double>> e;
  for (int s = 0; s < static_cast<int>(c.slots.size()); ++s) {
    const SlotState& ss = c.slots[s];
    const auto back = read_back(c, s);
    std::vector<double> v(back.size());
    for (size_t k = 0; k < back.size(); ++k) v[k] = std::abs(back[k] - static_cast<double>(ss.w_int[k])) * ss.w_scale;
    e.push_back(std::move(v));
  }
  return e;
}

// Selects round(fraction * N) weights over all slots. Random mode takes a
// prefix of one seeded permutation, ranked mode the largest errors (ties by
// index), so masks for growing fractions are nested.
inline RsaMask rsa_select(const std::vector<std::vector<double>>& error, double fraction, RsaMode mode,
                          RngStream& rng) {
  require(fraction >= 0.0 && fraction <= 1.0, "rsa: fraction must be in [0,1]");
  RsaMask mask;
  mask.fraction = fraction;
  mask.mode = mode;
  std::vector<std::pair<int, size_t>> ids;
  for (int s = 0; s < static_cast<int>(error.size()); ++s) {
    mask.slots.emplace_back(error[s].size(), 0);
    for (size_t k = 0; k < error[s].size(); ++k) ids.emplace_back(s, k);
  }
  const size_t n = ids.size();
  const auto want = static_cast<size_t>(std::llround(fraction * static_cast<double>(n)));
  if (mode == RsaMode::Random) {
    for (size_t i = 0; i + 1 < n; ++i) std::swap(ids[i], ids[rng.uniform_int(static_cast<int64_t>(i), n - 1)]);
  } else {
    std::stable_sort(ids.begin(), ids.end(), [&error](const auto& a, const auto& b) {
      return error[a.first][a.second] > error[b.first][b.second];
    });
  }
  for (size_t i = 0; i < want; ++i) mask.slots[ids[i].first][ids[i].second] = 1;
  return mask;
}

inline int64_t rsa_sram_bits(const RsaMask& mask, int weight_bits) { return mask.selected() * weight_bits; }

// Cell (tile, row, column) holding slice s, polarity pol of weight (i, o).
struct CellRef {
  int tile;
  int row;
  int col;
};

inline CellRef cell_location(const SliceLayout& L, int i, int o, int s, int pol) {
  const int64_t gc = int64_t{o} * L.cols_per_weight() + 2 * s + pol;
  return {L.tile_index(i / L.tile_rows, static_cast<int>(gc / L.tile_cols)), i % L.tile_rows,
          static_cast<int>(gc % L.tile_cols)};
}

// Moves masked weights into digital memory: their cells are rewritten to
// g_hrs and the exact integer weight goes to the digital path.
inline void apply_mask(Chip& c, const RsaMask& mask, RngStream& rng) {
  require_dims(mask.slots.size() == c.slots.size(), "rsa: mask does not match chip slots");
  for (int s = 0; s < static_cast<int>(c.slots.size()); ++s) {
    SlotState& ss = c.slots[s];
    require_dims(mask.slots[s].size() == ss.w_int.size(), "rsa: mask/tile mismatch");
    ss.mask = mask.slots[s];
    ss.digital.assign(ss.w_int.size(), 0);
    const SliceLayout& L = ss.group.layout;
    std::vector<uint8_t> touched(ss.group.tiles.size(), 0);
    RngStream wr = rng.split(0x5253414Dull, static_cast<uint64_t>(s));
    for (int i = 0; i < L.in; ++i)
      for (int o = 0; o < L.out; ++o) {
        const size_t k = static_cast<size_t>(i) * L.out + o;
        if (!ss.mask[k]) continue;
        ss.digital[k] = ss.w_int[k];
        for (int sl = 0; sl < L.slices; ++sl)
          for (int pol = 0; pol < 2; ++pol) {
            const CellRef cr = cell_location(L, i, o, sl, pol);
            TileState& t = ss.group.tiles[cr.tile];
            const size_t idx = static_cast<size_t>(cr.row) * t.cols + cr.col;
            t.target[idx] = t.device.g_hrs;
            t.g[idx] = apply_write_variation({t.device.g_hrs}, c.profile.write_variation_rate, t.device, wr)[0];
            touched[cr.tile] = 1;
          }
      }
    for (size_t k = 0; k < touched.size(); ++k)
      if (touched[k]) refresh_wire_model(ss.group.tiles[k]);
  }
}

// Crossbar path with masked cells at g_hrs plus the exact digital path.
inline std::vector<double> rsa_vmm(const std::vector<int64_t>& x, const SlotState& s, int act_bits,
                                   VmmFlags* flags = nullptr) {
  const SliceLayout& L = s.group.layout;
  if (!s.mask.empty()) {
    require_dims(s.mask.size() == static_cast<size_t>(L.in) * L.out && s.digital.size() == s.mask.size(),
                 "rsa_vmm: mask/tile mismatch");
    for (int i = 0; i < L.in; ++i)
      for (int o = 0; o < L.out; ++o) {
        if (!s.mask[static_cast<size_t>(i) * L.out + o]) continue;
        for (int sl = 0; sl < L.slices; ++sl)
          for (int pol = 0; pol < 2; ++pol) {
            const CellRef cr = cell_location(L, i, o, sl, pol);
            const TileState& t = s.group.tiles[cr.tile];
            if (t.target[static_cast<size_t>(cr.row) * t.cols + cr.col] != t.device.g_hrs)
              throw PreconditionError("rsa_vmm: masked weight still has programmed cells");
          }
      }
  }
  return slot_vmm(s, x, act_bits, flags, nullptr);
}

struct RsaConfig {
  double fraction = 0.05;
  RsaMode mode = RsaMode::Ranked;
  bool retrain = true;
  KdConfig kd{{3, 0.05, 5.0, 1}, 2.0, 0.5, 1.0};
};

// Online retraining of the digital weights only. Unmasked weights stay at
// their programmed (read-back) values in the forward pass and their master
// copies never change; biases stay frozen too. The refreshed digital
// weights are reloaded into the chip after every epoch.
inline NetworkModel rsa_online_retrain(const NetworkModel& student, const NetworkModel& teacher, Chip& chip,
                                       const std::vector<SyntheticRead>& data, const KdConfig& cfg) {
  if (chip.sram_weights() == 0) throw PreconditionError("rsa: mask selects no weights, nothing to retrain");
  if (!(cfg.temperature > 0.0)) throw PreconditionError("kd: temperature must be > 0");
  require(cfg.train.epochs >= 1, "rsa: epochs must be >= 1");
  require_dims(student.slots.size() == chip.slots.size(), "rsa: chip does not match model");
  auto tl = std::make_shared<const std::vector<Mat>>(teacher_logits(teacher, data));
  NetworkModel m = student;
  const int B = chip.plan.spec.weight_bits;

  // Frozen analog part: read-back of the cells (masked cells contribute ~0).
  std::vector<Mat> analog;
  for (const SlotState& ss : chip.slots) {
    const std::vector<double> w = effective_weights(ss.group);
    Mat a(ss.in(), ss.out());
    for (int i = 0; i < ss.in(); ++i)
      for (int o = 0; o < ss.out(); ++o) a(i, o) = w[static_cast<size_t>(i) * ss.out() + o] * ss.w_scale;
    analog.push_back(std::move(a));
  }
  OverrideFn ov = [&chip, &analog, B](const NetworkModel& mm, int, int64_t, std::vector<Mat>& w) {
    w = analog;
    for (int s = 0; s < static_cast<int>(chip.slots.size()); ++s) {
      const SlotState& ss = chip.slots[s];
      const Mat& master = mm.slot_weight(s);
      for (int i = 0; i < ss.in(); ++i)
        for (int o = 0; o < ss.out(); ++o)
          if (ss.mask[static_cast<size_t>(i) * ss.out() + o]) w[s](i, o) += fake_quant(master(i, o), ss.w_scale, B);
    }
    return true;
  };
  GradFilter freeze = [&chip, &m](GradientSet& g) {
    std::vector<std::vector<uint8_t>> keep(g.size());
    for (size_t l = 0; l < g.size(); ++l) keep[l].assign(g[l].size(), 0);
    for (int s = 0; s < static_cast<int>(m.slots.size()); ++s) {
      const Slot& sl = m.slots[s];
      Mat& t = g[sl.layer][sl.tensor];
      const SlotState& ss = chip.slots[s];
      for (int i = 0; i < ss.in(); ++i)
        for (int o = 0; o < ss.out(); ++o)
          if (!ss.mask[static_cast<size_t>(i) * ss.out() + o]) t(i, o) = 0.0;
      keep[sl.layer][sl.tensor] = 1;
    }
    for (size_t l = 0; l < g.size(); ++l)
      for (size_t p = 0; p < g[l].size(); ++p)
        if (!keep[l][p]) g[l][p].setZero();
  };
  TrainConfig tc = cfg.train;
  for (int ep = 0; ep < cfg.train.epochs; ++ep) {
    tc.epochs = 1;
    tc.seed = hash_combine(cfg.train.seed, static_cast<uint64_t>(ep));
    train_model(m, data, tc, kd_loss_fn(tl, cfg.temperature, cfg.lambda), ov, freeze);
    for (int s = 0; s < static_cast<int>(chip.slots.size()); ++s) {
      SlotState& ss = chip.slots[s];
      const Mat& master = m.slot_weight(s);
      for (int i = 0; i < ss.in(); ++i)
        for (int o = 0; o < ss.out(); ++o) {
          const size_t k = static_cast<size_t>(i) * ss.out() + o;
          if (ss.mask[k]) ss.digital[k] = quantize_int(master(i, o), ss.w_scale, B);
        }
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Recipes

enum class Technique { Vat, Kd, Rvw, RsaKd, Rsa };

inline std::string technique_name(Technique t) {
  switch (t) {
    case Technique::Vat: return "VAT";
    case Technique::Kd: return "KD";
    case Technique::Rvw: return "RVW";
    case Technique::RsaKd: return "RSA+KD";
    case Technique::Rsa: return "RSA";
  }
  return "?";
}

inline Technique parse_technique(const std::string& s) {
  if (s == "VAT") return Technique::Vat;
  if (s == "KD") return Technique::Kd;
  if (s == "RVW" || s == "R-V-W") return Technique::Rvw;
  if (s == "RSA+KD") return Technique::RsaKd;
  if (s == "RSA") return Technique::Rsa;
  throw ConfigError("unknown mitigation technique '" + s + "'");
}

struct MitigationRecipe {
  std::vector<Technique> techniques;
  VatConfig vat;
  KdConfig kd;
  double rvw_tolerance_fraction = 0.05;  // of the conductance window
  int rvw_max_pulses = 20;
  RsaConfig rsa;

  bool has(Technique t) const { return std::find(techniques.begin(), techniques.end(), t) != techniques.end(); }

  void validate() const {
    if (techniques.empty()) throw ConfigError("recipe: empty technique list");
    if (has(Technique::Rsa) && has(Technique::RsaKd)) throw ConfigError("recipe: RSA and RSA+KD are exclusive");
    require(vat.train.epochs >= 1 && kd.train.epochs >= 1 && rsa.kd.train.epochs >= 1,
            "recipe: epochs must be >= 1");
    require(vat.noise_scale >= 0.0 && vat.noise_scale <= 10.0, "recipe: vat noise scale must be in [0,10]");
    if (!(kd.temperature > 0.0) || !(rsa.kd.temperature > 0.0))
      throw PreconditionError("recipe: KD temperature must be > 0");
    require(kd.lambda >= 0.0 && kd.lambda <= 1.0, "recipe: KD lambda must be in [0,1]");
    require(rvw_tolerance_fraction > 0.0 && rvw_tolerance_fraction <= 1.0,
            "recipe: rvw tolerance fraction must be in (0,1]");
    require(rvw_max_pulses >= 1 && rvw_max_pulses <= 10000, "recipe: rvw max pulses must be in [1,10000]");
    require(rsa.fraction >= 0.0 && rsa.fraction <= 1.0, "recipe: rsa fraction must be in [0,1]");
  }

  std::string label() const {
    if (techniques.empty()) return "none";
    std::string s;
    for (Technique t : canonical()) s += (s.empty() ? "" : "|") + technique_name(t);
    return s;
  }

  // VAT -> KD -> RVW -> RSA(+KD)
  std::vector<Technique> canonical() const {
    std::vector<Technique> out;
    for (Technique t : {Technique::Vat, Technique::Kd, Technique::Rvw, Technique::RsaKd, Technique::Rsa})
      if (has(t)) out.push_back(t);
    return out;
  }
};

struct CostLedger {
  int64_t program_pulses = 0;
  int64_t programmed_cells = 0;
  int64_t rvw_pulses = 0;  // pulses spent by verified programming (refresh cost)
  int64_t sram_weights = 0;
  int64_t sram_bits = 0;
  int offline_epochs = 0;
  int retrain_epochs = 0;
};

struct RecipeContext {
  NetworkModel teacher;  // float, calibrated
  HardwareTarget hw;
  std::vector<SyntheticRead> train;
  uint64_t seed = 1;
};

// Chip-independent part: quantize, then VAT and KD in that order.
inline NetworkModel offline_stage(const MitigationRecipe& r, const RecipeContext& ctx, CostLedger* ledger = nullptr) {
  NetworkModel m = quantize_model(ctx.teacher, ctx.hw.spec);
  if (r.has(Technique::Vat)) {
    VatConfig c = r.vat;
    c.train.seed = hash_combine(ctx.seed, 0x564154ull);
    m = vat_train(m, ctx.train, ctx.hw, c);
    if (ledger) ledger->offline_epochs += c.train.epochs;
  }
  if (r.has(Technique::Kd)) {
    KdConfig c = r.kd;
    c.train.seed = hash_combine(ctx.seed, 0x4B44ull);
    m = kd_train(m, ctx.teacher, ctx.train, ctx.hw, c);
    if (ledger) ledger->offline_epochs += c.train.epochs;
  }
  return m;
}

struct Deployment {
  NetworkModel model;
  Chip chip;
  CostLedger ledger;
};

// Per-chip part: program (one-shot or verified), then RSA with optional
// online retraining. `rng` is this chip instance's stream.
inline Deployment online_stage(const MitigationRecipe& r, const RecipeContext& ctx, const NetworkModel& model,
                               RngStream& rng, CostLedger ledger = {}) {
  Deployment d;
  d.model = model;
  const TilePlan plan = partition_and_map(model, ctx.hw.array_size, ctx.hw.device, ctx.hw.spec);
  RngStream prog = rng.split(0x50524F47ull, 0);
  if (r.has(Technique::Rvw)) {
    d.chip = rvw_program(plan, model, ctx.hw.profile, r.rvw_tolerance_fraction * ctx.hw.device.window(),
                         r.rvw_max_pulses, prog);
    ledger.rvw_pulses += d.chip.stats.pulses;
  } else {
    d.chip = program_plan(plan, model, ctx.hw.profile, prog);
  }
  ledger.program_pulses += d.chip.stats.pulses;
  ledger.programmed_cells += d.chip.stats.cells;
  if (r.has(Technique::RsaKd) || r.has(Technique::Rsa)) {
    RngStream sel = rng.split(0x53454Cull, 0);
    const RsaMask mask = rsa_select(weight_error_stats(d.chip), r.rsa.fraction, r.rsa.mode, sel);
    RngStream wr = rng.split(0x57524954ull, 0);
    apply_mask(d.chip, mask, wr);
    ledger.sram_weights = mask.selected();
    ledger.sram_bits = rsa_sram_bits(mask, ctx.hw.spec.weight_bits);
    if (r.has(Technique::RsaKd) && mask.selected() > 0) {
      KdConfig c = r.rsa.kd;
      c.train.seed = hash_combine(ctx.seed, rng.split(0x5254ull, 0)());
      d.model = rsa_online_retrain(d.model, ctx.teacher, d.chip, ctx.train, c);
      ledger.retrain_epochs += c.train.epochs;
    }
  }
  d.ledger = ledger;
  return d;
}

inline Deployment apply_recipe(const MitigationRecipe& r, const RecipeContext& ctx, RngStream& rng) {
  r.validate();
  CostLedger ledger;
  const NetworkModel m = offline_stage(r, ctx, &ledger);
  return online_stage(r, ctx, m, rng, ledger);
}

}  // namespace cimcall
