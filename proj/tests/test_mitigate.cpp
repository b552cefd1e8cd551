#include <gtest/gtest.h>

#include "cimcall/mitigate.hpp"

using namespace cimcall;

namespace {

struct Small {
  std::vector<SyntheticRead> data;
  NetworkModel teacher;
};

Small small_setup(uint64_t seed, int reads = 6) {
  Small s;
  RngStream rng(seed, {});
  TaskConfig tc;
  tc.n_reads = reads;
  tc.read_length = 30;
  s.data = generate_dataset(tc, rng);
  s.teacher = make_surrogate(rng);
  train_supervised(s.teacher, s.data, TrainConfig{2, 0.3, 5.0, 3});
  round_to_float(s.teacher);
  calibrate_input_ranges(s.teacher, s.data);
  return s;
}

Chip linear_chip(int in, int out, int bits, const NonIdealityProfile& prof, uint64_t seed) {
  RngStream rng(seed, {});
  NetworkModel m;
  add_linear(m, in, out, rng);
  m = quantize_model(m, QuantSpec::fixed(bits, bits));
  const TilePlan p = partition_and_map(m, 4, DeviceParams{}, QuantSpec::fixed(bits, bits));
  return program_plan(p, m, prof, rng);
}

bool same_params(const NetworkModel& a, const NetworkModel& b) {
  for (size_t l = 0; l < a.layers.size(); ++l)
    for (size_t p = 0; p < a.layers[l].params.size(); ++p)
      if (a.layers[l].params[p] != b.layers[l].params[p]) return false;
  return true;
}

HardwareTarget hw_with_rate(double rate) {
  HardwareTarget hw;
  hw.array_size = 32;
  hw.profile.write_variation_rate = rate;
  return hw;
}

}  // namespace

TEST(Vat, ZeroRateEqualsPlainTraining) {
  const Small s = small_setup(1);
  const NetworkModel q = quantize_model(s.teacher, QuantSpec::fixed(8, 8));
  VatConfig cfg;
  cfg.train = {1, 0.05, 5.0, 9};
  const NetworkModel v = vat_train(q, s.data, hw_with_rate(0.0), cfg);
  NetworkModel plain = q;
  train_model(plain, s.data, cfg.train, ce_loss());
  EXPECT_TRUE(same_params(v, plain));
  EXPECT_EQ(make_noise_injector(hw_with_rate(0.0), 1.0, 1), nullptr);
  cfg.train.epochs = 0;
  EXPECT_THROW(vat_train(q, s.data, hw_with_rate(0.1), cfg), PreconditionError);
}

TEST(Vat, InjectsFreshNoisePerStep) {
  const Small s = small_setup(2);
  const NetworkModel q = quantize_model(s.teacher, QuantSpec::fixed(8, 8));
  const OverrideFn inj = make_noise_injector(hw_with_rate(0.2), 1.0, 4);
  std::vector<Mat> a, b, c;
  ASSERT_TRUE(inj(q, 0, 0, a));
  inj(q, 0, 0, b);
  inj(q, 0, 1, c);
  EXPECT_EQ(a[0], b[0]);
  EXPECT_NE(a[0], c[0]);
  EXPECT_GT((a[0] - q.slot_weight(0)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Kd, LambdaOneIsPlainTraining) {
  const Small s = small_setup(3);
  const NetworkModel q = quantize_model(s.teacher, QuantSpec::fixed(8, 8));
  KdConfig cfg;
  cfg.train = {1, 0.05, 5.0, 7};
  cfg.lambda = 1.0;
  const NetworkModel k = kd_train(q, s.teacher, s.data, hw_with_rate(0.0), cfg);
  NetworkModel plain = q;
  train_model(plain, s.data, cfg.train, ce_loss());
  for (size_t l = 0; l < k.layers.size(); ++l)
    for (size_t p = 0; p < k.layers[l].params.size(); ++p)
      EXPECT_LT((k.layers[l].params[p] - plain.layers[l].params[p]).cwiseAbs().maxCoeff(), 1e-12);
  cfg.temperature = 0.0;
  EXPECT_THROW(kd_train(q, s.teacher, s.data, hw_with_rate(0.0), cfg), PreconditionError);
}

TEST(Rvw, ZeroRateAndInfiniteToleranceTakeOnePulse) {
  DeviceParams dev;
  NonIdealityProfile p;
  TileState t = make_tile(8, 8, dev, p);
  std::fill(t.target.begin(), t.target.end(), 5e-5);
  RngStream rng(1, {});
  ProgramStats st = rvw_program(t, 1e-9, 20, rng);
  EXPECT_EQ(st.pulses, st.cells);
  p.write_variation_rate = 0.3;
  TileState u = make_tile(8, 8, dev, p);
  std::fill(u.target.begin(), u.target.end(), 5e-5);
  st = rvw_program(u, 1.0, 20, rng);
  EXPECT_EQ(st.pulses, st.cells);
}

TEST(Rvw, MeanPulsesFollowHitProbability) {
  DeviceParams dev;
  NonIdealityProfile p;
  p.write_variation_rate = 0.1;
  const double g = 5e-5, tol = 0.05 * g;
  const double P = write_hit_probability(g, p.write_variation_rate, tol, dev);
  EXPECT_NEAR(P, std::erf(0.5 / std::sqrt(2.0)), 1e-12);
  const double P_ref = write_hit_probability(dev.g_hrs, p.write_variation_rate, tol, dev);
  EXPECT_EQ(P_ref, 1.0);
  TileState t = make_tile(64, 64, dev, p);
  std::fill(t.target.begin(), t.target.end(), g);
  RngStream rng(2, {});
  const ProgramStats st = rvw_program(t, tol, 1000, rng);
  const double expected = 64.0 * 64.0 / P + 64.0;
  EXPECT_NEAR(static_cast<double>(st.pulses) / expected, 1.0, 0.05);
  EXPECT_EQ(st.flagged, 0);
}

TEST(Rvw, HitProbabilityAgreesWithSampling) {
  DeviceParams dev;
  RngStream rng(3, {});
  for (double g : {2e-6, 3e-5, 9.8e-5}) {
    const double rate = 0.2, tol = 2e-6;
    int hit = 0;
    const int n = 40000;
    std::vector<double> tg(n, g);
    const auto v = apply_write_variation(tg, rate, dev, rng);
    for (double x : v) hit += std::abs(x - g) <= tol;
    EXPECT_NEAR(hit / static_cast<double>(n), write_hit_probability(g, rate, tol, dev), 0.01) << g;
  }
}

TEST(RsaSelect, FractionsDensityAndNesting) {
  RngStream er(4, {});
  std::vector<std::vector<double>> err(3);
  for (auto& v : err)
    for (int k = 0; k < 333; ++k) v.push_back(er.uniform());
  for (RsaMode mode : {RsaMode::Random, RsaMode::Ranked}) {
    RngStream a(5, {});
    EXPECT_EQ(rsa_select(err, 0.0, mode, a).selected(), 0);
    RngStream b(5, {});
    EXPECT_EQ(rsa_select(err, 1.0, mode, b).selected(), 999);
    RsaMask prev;
    for (double f : {0.01, 0.05, 0.1, 0.3}) {
      RngStream r(5, {});
      const RsaMask m = rsa_select(err, f, mode, r);
      EXPECT_NEAR(m.density(), f, 0.001);
      if (!prev.slots.empty())
        for (size_t s = 0; s < m.slots.size(); ++s)
          for (size_t k = 0; k < m.slots[s].size(); ++k) {
            EXPECT_LE(prev.slots[s][k], m.slots[s][k]);
          }
      prev = m;
    }
  }
  RngStream r(6, {});
  const RsaMask top = rsa_select(err, 0.05, RsaMode::Ranked, r);
  double lo_sel = 1e9, hi_unsel = -1;
  for (size_t s = 0; s < err.size(); ++s)
    for (size_t k = 0; k < err[s].size(); ++k)
      (top.slots[s][k] ? lo_sel : hi_unsel) =
          top.slots[s][k] ? std::min(lo_sel, err[s][k]) : std::max(hi_unsel, err[s][k]);
  EXPECT_GE(lo_sel, hi_unsel);
  EXPECT_THROW(rsa_select(err, 1.5, RsaMode::Random, r), PreconditionError);
}

TEST(RsaVmm, EmptyMaskIsTheCrossbarPath) {
  NonIdealityProfile prof;
  prof.write_variation_rate = 0.2;
  Chip c = linear_chip(4, 4, 4, prof, 7);
  const SlotState& s = c.slots[0];
  const std::vector<int64_t> x{3, -7, 0, 5};
  EXPECT_EQ(rsa_vmm(x, s, 4), bit_sliced_vmm(x, 4, s.group));
}

TEST(RsaVmm, FullMaskIsExactOverAllInputs) {
  NonIdealityProfile prof;
  prof.write_variation_rate = 0.2;
  Chip c = linear_chip(4, 4, 4, prof, 8);
  RngStream r(9, {});
  RsaMask m = rsa_select(weight_error_stats(c), 1.0, RsaMode::Random, r);
  // Ideal HRS: cells rewritten without variation cancel against the reference.
  c.profile.write_variation_rate = 0.0;
  apply_mask(c, m, r);
  const SlotState& s = c.slots[0];
  EXPECT_EQ(s.masked(), 16);
  std::vector<int64_t> x(4);
  int64_t checked = 0;
  for (int a = -7; a <= 7; ++a)
    for (int b = -7; b <= 7; ++b)
      for (int d = -7; d <= 7; ++d)
        for (int e = -7; e <= 7; ++e) {
          x = {a, b, d, e};
          const auto y = rsa_vmm(x, s, 4);
          const auto ref = fixed_point_vmm(x, s.w_int, 4, 4);
          for (int o = 0; o < 4; ++o) ASSERT_NEAR(y[o], ref[o], 1e-9);
          ++checked;
        }
  EXPECT_EQ(checked, 15 * 15 * 15 * 15);
}

TEST(RsaVmm, AnyMaskOnIdealTilesIsExact) {
  Chip c = linear_chip(9, 7, 8, NonIdealityProfile{}, 10);
  for (double f : {0.1, 0.5, 0.9}) {
    Chip k = c;
    RngStream r(11, {});
    apply_mask(k, rsa_select(weight_error_stats(k), f, RsaMode::Random, r), r);
    RngStream xs(12, {});
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<int64_t> x(9);
      for (auto& v : x) v = xs.uniform_int(-127, 127);
      const auto y = rsa_vmm(x, k.slots[0], 8);
      const auto ref = fixed_point_vmm(x, k.slots[0].w_int, 9, 7);
      for (int o = 0; o < 7; ++o) EXPECT_NEAR(y[o], ref[o], 1e-9);
    }
  }
}

TEST(RsaVmm, RejectsMaskWithProgrammedCells) {
  Chip c = linear_chip(4, 4, 8, NonIdealityProfile{}, 13);
  SlotState s = c.slots[0];
  s.mask.assign(16, 0);
  s.digital.assign(16, 0);
  s.mask[5] = 1;
  bool nonzero = false;
  for (int sl = 0; sl < s.group.layout.slices; ++sl)
    for (int pol = 0; pol < 2; ++pol) {
      const CellRef cr = cell_location(s.group.layout, 1, 1, sl, pol);
      const TileState& t = s.group.tiles[cr.tile];
      nonzero |= t.target[static_cast<size_t>(cr.row) * t.cols + cr.col] != t.device.g_hrs;
    }
  if (nonzero) {
    EXPECT_THROW(rsa_vmm({1, 2, 3, 4}, s, 8), PreconditionError);
  }
}

TEST(RsaRetrain, FreezesUnmaskedWeightsAndBiases) {
  const Small s = small_setup(14);
  const NetworkModel q = quantize_model(s.teacher, QuantSpec::fixed(8, 8));
  HardwareTarget hw = hw_with_rate(0.2);
  RngStream rng(15, {});
  Chip chip = program_plan(partition_and_map(q, 32, hw.device, hw.spec), q, hw.profile, rng);
  RngStream sel(16, {});
  apply_mask(chip, rsa_select(weight_error_stats(chip), 0.1, RsaMode::Ranked, sel), sel);
  const std::vector<std::vector<uint8_t>> masks = [&] {
    std::vector<std::vector<uint8_t>> v;
    for (const auto& ss : chip.slots) v.push_back(ss.mask);
    return v;
  }();
  KdConfig cfg;
  cfg.train = {2, 0.05, 5.0, 17};
  const NetworkModel r = rsa_online_retrain(q, s.teacher, chip, s.data, cfg);
  bool moved = false;
  std::vector<std::vector<uint8_t>> is_slot(q.layers.size());
  for (size_t l = 0; l < q.layers.size(); ++l) is_slot[l].assign(q.layers[l].params.size(), 0);
  for (int k = 0; k < static_cast<int>(q.slots.size()); ++k) {
    is_slot[q.slots[k].layer][q.slots[k].tensor] = 1;
    const Mat& a = q.slot_weight(k);
    const Mat& b = r.slot_weight(k);
    for (int i = 0; i < a.rows(); ++i)
      for (int o = 0; o < a.cols(); ++o) {
        if (masks[k][static_cast<size_t>(i) * a.cols() + o])
          moved |= a(i, o) != b(i, o);
        else
          ASSERT_EQ(a(i, o), b(i, o));
      }
  }
  for (size_t l = 0; l < q.layers.size(); ++l)
    for (size_t p = 0; p < q.layers[l].params.size(); ++p)
      if (!is_slot[l][p]) {
        EXPECT_EQ(q.layers[l].params[p], r.layers[l].params[p]);
      }
  EXPECT_TRUE(moved);
  for (int k = 0; k < static_cast<int>(chip.slots.size()); ++k) {
    const SlotState& ss = chip.slots[k];
    for (size_t j = 0; j < ss.mask.size(); ++j)
      if (ss.mask[j]) {
        EXPECT_EQ(ss.digital[j], quantize_int(r.slot_weight(k)(j / ss.out(), j % ss.out()), ss.w_scale, 8));
      }
  }
}

TEST(RsaRetrain, EmptyMaskIsRejected) {
  const Small s = small_setup(18);
  const NetworkModel q = quantize_model(s.teacher, QuantSpec::fixed(8, 8));
  RngStream rng(19, {});
  Chip chip = program_plan(partition_and_map(q, 32, DeviceParams{}, q.quant), q, NonIdealityProfile{}, rng);
  EXPECT_THROW(rsa_online_retrain(q, s.teacher, chip, s.data, KdConfig{}), PreconditionError);
}

TEST(Recipe, SingletonsMatchDirectCalls) {
  const Small s = small_setup(20);
  RecipeContext ctx;
  ctx.teacher = s.teacher;
  ctx.hw = hw_with_rate(0.15);
  ctx.train = s.data;
  ctx.seed = 21;

  MitigationRecipe rvw;
  rvw.techniques = {Technique::Rvw};
  RngStream a(22, {});
  const Deployment d = apply_recipe(rvw, ctx, a);
  const NetworkModel q = quantize_model(s.teacher, ctx.hw.spec);
  RngStream b(22, {});
  RngStream prog = b.split(0x50524F47ull, 0);
  const Chip direct = rvw_program(partition_and_map(q, 32, ctx.hw.device, ctx.hw.spec), q, ctx.hw.profile,
                                  rvw.rvw_tolerance_fraction * ctx.hw.device.window(), rvw.rvw_max_pulses, prog);
  EXPECT_EQ(d.chip.slots[1].group.tiles[0].g, direct.slots[1].group.tiles[0].g);
  EXPECT_EQ(d.ledger.rvw_pulses, direct.stats.pulses);

  MitigationRecipe vat;
  vat.techniques = {Technique::Vat};
  vat.vat.train = {1, 0.05, 5.0, 1};
  VatConfig vc = vat.vat;
  vc.train.seed = hash_combine(ctx.seed, 0x564154ull);
  EXPECT_TRUE(same_params(offline_stage(vat, ctx), vat_train(q, s.data, ctx.hw, vc)));
}

TEST(Recipe, ValidationAndLabels) {
  MitigationRecipe r;
  EXPECT_THROW(r.validate(), ConfigError);
  r.techniques = {Technique::RsaKd, Technique::Vat, Technique::Rvw};
  EXPECT_EQ(r.label(), "VAT|RVW|RSA+KD");
  r.techniques.push_back(Technique::Rsa);
  EXPECT_THROW(r.validate(), ConfigError);
  EXPECT_EQ(parse_technique("R-V-W"), Technique::Rvw);
  EXPECT_THROW(parse_technique("magic"), ConfigError);
}

TEST(Recipe, RsaCostsAreRecorded) {
  const Small s = small_setup(23);
  RecipeContext ctx;
  ctx.teacher = s.teacher;
  ctx.hw = hw_with_rate(0.2);
  ctx.train = s.data;
  MitigationRecipe r;
  r.techniques = {Technique::Rsa};
  r.rsa.fraction = 0.1;
  RngStream rng(24, {});
  const Deployment d = apply_recipe(r, ctx, rng);
  int64_t total = 0;
  for (const auto& ss : d.chip.slots) total += static_cast<int64_t>(ss.w_int.size());
  EXPECT_EQ(d.ledger.sram_weights, std::llround(0.1 * static_cast<double>(total)));
  EXPECT_EQ(d.ledger.sram_bits, d.ledger.sram_weights * 8);
  EXPECT_EQ(d.ledger.retrain_epochs, 0);
}
