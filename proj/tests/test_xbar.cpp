#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "cimcall/xbar.hpp"

using namespace cimcall;

namespace {

std::vector<double> random_conductances(int n, const DeviceParams& d, RngStream& rng, double lrs_frac = 0.5) {
  std::vector<double> g(n);
  for (double& x : g) x = rng.uniform() < lrs_frac ? d.g_lrs : d.g_hrs;
  return g;
}

TileState programmed_tile(int rows, int cols, const NonIdealityProfile& p, RngStream& rng, double lrs_frac = 0.5) {
  DeviceParams d;
  TileState t = make_tile(rows, cols, d, p);
  t.target = random_conductances(rows * cols, d, rng, lrs_frac);
  program_tile(t, rng);
  return t;
}

std::vector<double> random_bits_volts(int n, double fs, RngStream& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform() < 0.5 ? fs : 0.0;
  return v;
}

double max_rel(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), 1e-30));
  return m;
}

}  // namespace

TEST(IdealVmm, IdentityAndZero) {
  EXPECT_EQ(ideal_vmm({1, 2}, {1, 0, 0, 1}, 2, 2), (std::vector<double>{1, 2}));
  EXPECT_EQ(ideal_vmm({0, 0, 0}, {1, 2, 3, 4, 5, 6}, 3, 2), (std::vector<double>{0, 0}));
  EXPECT_THROW(ideal_vmm({1, 2, 3}, {1, 0, 0, 1}, 2, 2), DimensionError);
}

TEST(IdealVmm, MatchesNaiveTripleLoop) {
  RngStream rng(3, {0, 0});
  std::vector<double> x(8), w(64);
  for (double& v : x) v = rng.normal();
  for (double& v : w) v = rng.normal();
  std::vector<double> ref(8, 0.0);
  for (int j = 0; j < 8; ++j)
    for (int i = 0; i < 8; ++i) ref[j] += x[i] * w[i * 8 + j];
  EXPECT_EQ(ideal_vmm(x, w, 8, 8), ref);
}

TEST(AnalyticalVmm, DisabledProfileWithinOneAdcStep) {
  RngStream rng(4, {0, 0});
  NonIdealityProfile p;
  p.dac_bits = 8;
  p.adc_bits = 20;
  TileState t = programmed_tile(8, 8, p, rng);
  const double u = t.unit_current();
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(8);
    for (double& v : x) v = p.dac_full_scale * static_cast<double>(rng.uniform_int(0, 255)) / 255.0;
    const VmmResult r = analytical_vmm(x, t);
    std::vector<double> w(64);
    for (int k = 0; k < 64; ++k) w[k] = t.g[k] - t.device.g_hrs;
    const auto ideal = ideal_vmm(x, w, 8, 8);
    for (int j = 0; j < 8; ++j) EXPECT_LE(std::abs(static_cast<double>(r.codes[j]) - ideal[j] / u), 1.0);
  }
}

TEST(AnalyticalVmm, NoWireResistanceMatchesIdealOfProgrammedConductances) {
  RngStream rng(5, {0, 0});
  NonIdealityProfile p;
  p.write_variation_rate = 0.2;
  p.enabled = kSynapticWires;
  p.wire_resistance_per_segment = 0.0;
  TileState t = programmed_tile(6, 5, p, rng);
  const auto x = random_bits_volts(6, p.dac_full_scale, rng);
  EXPECT_EQ(analytical_vmm(x, t).currents, ideal_vmm(x, t.g, 6, 5));
}

TEST(AnalyticalVmm, UnprogrammedTileAndBadInputRejected) {
  TileState t = make_tile(4, 4, DeviceParams{}, NonIdealityProfile{});
  EXPECT_THROW(analytical_vmm(std::vector<double>(4, 0.0), t), StateError);
  RngStream rng(1, {0, 0});
  program_tile(t, rng);
  EXPECT_THROW(analytical_vmm(std::vector<double>(3, 0.0), t), DimensionError);
}

TEST(Nodal, ZeroResistanceIsClosedForm) {
  const std::vector<double> g = {1e-4, 2e-5, 3e-6, 4e-5, 5e-5, 6e-6};
  const std::vector<double> v = {0.1, 0.2};
  EXPECT_EQ(nodal_oracle_vmm(v, 2, 3, g, 0.0), ideal_vmm(v, g, 2, 3));
  EXPECT_THROW(nodal_oracle_vmm(v, 2, 3, std::vector<double>(6, 0.0), 0.0), NumericError);
}

// Closed form of the 2x2 ladder with equal cells g, equal drives v and wire
// segment r, obtained by symbolic elimination of the 8 node equations:
//   I0 = g v (6 g^2 r^2 + 9 g r + 2) / ((3 g r + 1)(4 g^2 r^2 + 6 g r + 1))
//   I1 = g v (4 g^2 r^2 + 7 g r + 2) / ((3 g r + 1)(4 g^2 r^2 + 6 g r + 1))
TEST(Nodal, TwoByTwoClosedForm) {
  struct Case {
    double g, r, v, i0, i1;
  };
  const Case cases[] = {
      {1e-4, 5.0, 0.2, 3.9910214468845314e-5, 3.9890294219558350e-5},
      {1e-3, 100.0, 1.0, 0.0013883677298311447, 0.0012851782363977487},
  };
  for (const Case& c : cases) {
    const auto out = nodal_oracle_vmm({c.v, c.v}, 2, 2, std::vector<double>(4, c.g), c.r);
    EXPECT_NEAR(out[0], c.i0, 1e-12 * c.i0);
    EXPECT_NEAR(out[1], c.i1, 1e-12 * c.i1);
    const double gr = c.g * c.r;
    const double den = (3 * gr + 1) * (4 * gr * gr + 6 * gr + 1);
    EXPECT_NEAR(out[0], c.g * c.v * (6 * gr * gr + 9 * gr + 2) / den, 1e-12 * c.i0);
    EXPECT_NEAR(out[1], c.g * c.v * (4 * gr * gr + 7 * gr + 2) / den, 1e-12 * c.i1);
  }
}

TEST(Nodal, IncreasingResistanceStrictlyDecreasesCurrents) {
  RngStream rng(6, {0, 0});
  DeviceParams d;
  const auto g = random_conductances(20, d, rng);
  const std::vector<double> v = {0.2, 0.1, 0.15, 0.05};
  std::vector<double> prev = nodal_oracle_vmm(v, 4, 5, g, 0.0);
  for (double r : {0.5, 2.0, 10.0, 50.0}) {
    const auto cur = nodal_oracle_vmm(v, 4, 5, g, r);
    for (int j = 0; j < 5; ++j) EXPECT_LT(cur[j], prev[j]);
    prev = cur;
  }
}

TEST(Nodal, CapEnforced) {
  DeviceParams d;
  std::vector<double> g(33 * 32, d.g_lrs);
  EXPECT_THROW(nodal_oracle_vmm(std::vector<double>(33, 0.1), 33, 32, g, 1.0), PreconditionError);
}

TEST(WireModel, TransferMatchesOracleOnSmallTiles) {
  RngStream rng(8, {0, 0});
  for (int trial = 0; trial < 30; ++trial) {
    const int rows = static_cast<int>(rng.uniform_int(1, 8)), cols = static_cast<int>(rng.uniform_int(1, 8));
    NonIdealityProfile p;
    p.enabled = kSynapticWires;
    p.wire_resistance_per_segment = 50.0 * rng.uniform();
    p.write_variation_rate = 0.1;
    TileState t = programmed_tile(rows, cols, p, rng);
    const auto x = random_bits_volts(rows, p.dac_full_scale, rng);
    const auto fast = analytical_vmm(x, t).currents;
    const auto exact = nodal_oracle_vmm(x, rows, cols, t.g, p.wire_resistance_per_segment);
    EXPECT_LT(max_rel(fast, exact), 1e-9);
  }
}

TEST(WireModel, LoadingOnlyAttenuates) {
  RngStream rng(9, {0, 0});
  for (auto model : {WireModel::Transfer, WireModel::FirstOrder}) {
    NonIdealityProfile p;
    p.enabled = kSynapticWires;
    p.wire_resistance_per_segment = 2.0;
    p.wire_model = model;
    TileState t = programmed_tile(32, 32, p, rng);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<double> x(32);
      for (double& v : x) v = p.dac_full_scale * rng.uniform();
      const auto wired = analytical_vmm(x, t).currents;
      const auto free = ideal_vmm(dac_transfer(x, p).volts, t.g, 32, 32);
      for (int j = 0; j < 32; ++j) EXPECT_LE(wired[j], free[j]);
    }
  }
}

TEST(WireModel, FirstOrderIsCloseOnlyAtSmallResistance) {
  RngStream rng(10, {0, 0});
  NonIdealityProfile p;
  p.enabled = kSynapticWires;
  p.wire_model = WireModel::FirstOrder;
  p.wire_resistance_per_segment = 1.0;
  TileState t = programmed_tile(8, 8, p, rng);
  const auto x = random_bits_volts(8, p.dac_full_scale, rng);
  const auto exact = nodal_oracle_vmm(x, 8, 8, t.g, 1.0);
  EXPECT_LT(max_rel(analytical_vmm(x, t).currents, exact), 0.02);
}

TEST(Library, CountsAndZeroDeviationWhenIdeal) {
  RngStream rng(11, {0, 0});
  NonIdealityProfile p;
  TileState t = programmed_tile(4, 4, p, rng);
  const auto lib = build_measurement_library(t, 10000, rng);
  const uint64_t fp = tile_fingerprint(t);
  EXPECT_EQ(lib.count(fp), 10000u);
  for (double d : lib.entries.at(fp)) ASSERT_EQ(d, 0.0);
  EXPECT_THROW(build_measurement_library(t, 9999, rng), PreconditionError);
}

TEST(Library, MeanConvergesToLargerMonteCarlo) {
  RngStream rng(12, {0, 0});
  NonIdealityProfile p;
  p.write_variation_rate = 0.25;
  p.dac_bits = 2;
  TileState t = programmed_tile(8, 8, p, rng, 0.8);
  const auto small = build_measurement_library(t, 10000, rng);
  RngStream rng2(13, {0, 0});
  const auto big = build_measurement_library(t, 100000, rng2);
  const uint64_t fp = tile_fingerprint(t);
  for (int j = 0; j < 8; ++j) {
    double ms = 0.0, mb = 0.0, vb = 0.0;
    for (size_t k = 0; k < 10000; ++k) ms += small.sample(fp, k)[j];
    for (size_t k = 0; k < 100000; ++k) {
      const double d = big.sample(fp, k)[j];
      mb += d;
      vb += d * d;
    }
    ms /= 10000;
    mb /= 100000;
    const double sd = std::sqrt(vb / 100000 - mb * mb);
    // 4.5 standard errors of the smaller run.
    EXPECT_NEAR(ms, mb, 4.5 * sd / 100.0 + 1e-12) << "column " << j;
  }
}

TEST(Library, MomentsMatchAnalyticalMonteCarlo) {
  RngStream rng(14, {0, 0});
  NonIdealityProfile p;
  p.write_variation_rate = 0.3;
  p.dac_bits = 2;
  TileState t = programmed_tile(8, 8, p, rng, 0.8);
  const auto lib = build_measurement_library(t, 20000, rng);
  const uint64_t fp = tile_fingerprint(t);
  RngStream lrng(15, {0, 0}), mc(16, {0, 0});
  double lm = 0, l2 = 0, am = 0, a2 = 0;
  const int n = 20000;
  TileState work = t;
  for (int s = 0; s < n; ++s) {
    const auto x = random_drive(t, mc);
    const auto ref = ideal_codes(x, t);
    const auto lv = library_vmm(x, lib, t, lrng);
    RngStream prog = mc.split(99, s);
    program_tile(work, prog);
    const auto av = analytical_vmm(x, work);
    for (int j = 0; j < 8; ++j) {
      const double dl = static_cast<double>(lv.codes[j] - ref[j]);
      const double da = static_cast<double>(av.codes[j] - ref[j]);
      lm += dl;
      l2 += dl * dl;
      am += da;
      a2 += da * da;
    }
  }
  EXPECT_NEAR(lm / am, 1.0, 0.10);
  EXPECT_NEAR(l2 / a2, 1.0, 0.10);
  (void)fp;
}

TEST(Library, SingleZeroEntryReturnsIdeal) {
  RngStream rng(17, {0, 0});
  NonIdealityProfile p;
  TileState t = programmed_tile(4, 4, p, rng);
  MeasurementLibrary lib;
  lib.rows = lib.cols = 4;
  lib.entries[tile_fingerprint(t)] = std::vector<double>(4, 0.0);
  const auto x = random_drive(t, rng);
  EXPECT_EQ(library_vmm(x, lib, t, rng).codes, ideal_codes(x, t));
  MeasurementLibrary empty;
  empty.cols = 4;
  EXPECT_THROW(library_vmm(x, empty, t, rng), LibraryMissError);
}

TEST(Library, SamplingIsDeterministicAndMatchesStoredDistribution) {
  RngStream rng(18, {0, 0});
  NonIdealityProfile p;
  p.write_variation_rate = 0.3;
  TileState t = programmed_tile(8, 4, p, rng, 0.9);
  const auto lib = build_measurement_library(t, 10000, rng);
  const auto x = random_drive(t, rng);
  RngStream a(1, {2, 3}), b(1, {2, 3});
  EXPECT_EQ(library_vmm(x, lib, t, a).codes, library_vmm(x, lib, t, b).codes);
  // Two-sample Kolmogorov-Smirnov on column 0, alpha = 0.001.
  const uint64_t fp = tile_fingerprint(t);
  const auto ref = ideal_codes(x, t);
  std::vector<double> drawn, stored;
  RngStream s(3, {0, 0});
  for (int k = 0; k < 1000; ++k) drawn.push_back(static_cast<double>(library_vmm(x, lib, t, s).codes[0] - ref[0]));
  for (size_t k = 0; k < 10000; ++k) stored.push_back(lib.sample(fp, k)[0]);
  std::sort(drawn.begin(), drawn.end());
  std::sort(stored.begin(), stored.end());
  double dmax = 0.0;
  for (double v : stored) {
    const double f1 = static_cast<double>(std::upper_bound(drawn.begin(), drawn.end(), v) - drawn.begin()) / drawn.size();
    const double f2 = static_cast<double>(std::upper_bound(stored.begin(), stored.end(), v) - stored.begin()) / stored.size();
    dmax = std::max(dmax, std::abs(f1 - f2));
  }
  EXPECT_LT(dmax, 1.95 * std::sqrt((1000.0 + 10000.0) / (1000.0 * 10000.0)));
}

TEST(Library, FileRoundTrip) {
  RngStream rng(19, {0, 0});
  NonIdealityProfile p;
  p.write_variation_rate = 0.1;
  TileState t = programmed_tile(4, 4, p, rng);
  auto lib = build_measurement_library(t, 10000, rng);
  const auto path = (std::filesystem::temp_directory_path() / "cimcall_lib_test.bin").string();
  save_library(lib, path);
  const auto back = load_library(path);
  EXPECT_EQ(back.rows, 4);
  EXPECT_EQ(back.cols, 4);
  EXPECT_EQ(back.entries, lib.entries);
  std::remove(path.c_str());
}

TEST(BitSliced, DegenerateSlicingEqualsAnalyticalPath) {
  DeviceParams d;
  NonIdealityProfile p;
  p.write_variation_rate = 0.2;
  // One unsigned 1-bit weight per column pair and a 1-bit DAC: the single
  // 2-bit activation cycle structure still reduces to one code per cell.
  const auto L = make_layout(4, 1, 1, 1, 4, 2);
  EXPECT_EQ(L.slices, 1);
  TileGroup grp = encode_group({1, 0, 1, 1}, L, d, p);
  RngStream rng(20, {0, 0});
  program_tile(grp.tiles[0], rng);
  // x in {0,1}: the 2-bit word has its MSB cycle all zero.
  const std::vector<int64_t> x = {1, 1, 0, 1};
  const auto acc = bit_sliced_vmm(x, 2, grp);
  std::vector<double> v(4);
  for (int i = 0; i < 4; ++i) v[i] = static_cast<double>(x[i]) * p.dac_full_scale;
  const auto r = analytical_vmm(v, grp.tiles[0]);
  EXPECT_DOUBLE_EQ(acc[0], static_cast<double>(r.codes[0] - r.codes[1]));
}

TEST(BitSliced, ExhaustiveFourBitExactness) {
  DeviceParams d;
  NonIdealityProfile p;
  const auto L = make_layout(4, 4, 4, 1, 4, 4);
  EXPECT_EQ(L.tiles(), 8);
  RngStream rng(21, {0, 0});
  for (int k = 0; k < 15; ++k) {
    std::vector<int64_t> w(16);
    for (int c = 0; c < 16; ++c) w[c] = static_cast<int64_t>((c + k) % 15) - 7;
    TileGroup grp = encode_group(w, L, d, p);
    for (auto& t : grp.tiles) program_tile(t, rng);
    SliceScratch sc;
    std::vector<int64_t> x(4);
    for (int code = 0; code < 65536; ++code) {
      for (int i = 0; i < 4; ++i) x[i] = static_cast<int64_t>((code >> (4 * i)) & 15) - 8;
      ASSERT_EQ(bit_sliced_vmm(x, 4, grp, nullptr, &sc), fixed_point_vmm(x, w, 4, 4)) << "k " << k << " code " << code;
    }
  }
}

TEST(BitSliced, MultiBitDacAndCellsExact) {
  for (int dac_bits : {2, 4}) {
    for (int levels : {2, 4, 16}) {
      DeviceParams d;
      d.levels_per_cell = levels;
      NonIdealityProfile p;
      p.dac_bits = dac_bits;
      p.adc_bits = 16;
      const int bpc = d.bits_per_cell();
      const auto L = make_layout(5, 3, 8, bpc, 4, 8);
      RngStream rng(22, {0, 0});
      std::vector<int64_t> w(15);
      for (auto& v : w) v = rng.uniform_int(-127, 127);
      TileGroup grp = encode_group(w, L, d, p);
      for (auto& t : grp.tiles) program_tile(t, rng);
      for (int trial = 0; trial < 500; ++trial) {
        std::vector<int64_t> x(5);
        for (auto& v : x) v = rng.uniform_int(-128, 127);
        ASSERT_EQ(bit_sliced_vmm(x, 8, grp), fixed_point_vmm(x, w, 5, 3)) << dac_bits << " " << levels;
      }
    }
  }
}

TEST(BitSliced, ZeroInputAndConfigErrors) {
  DeviceParams d;
  NonIdealityProfile p;
  p.write_variation_rate = 0.3;
  p.enabled = kAllCircuit;
  p.wire_resistance_per_segment = 1.0;
  const auto L = make_layout(3, 2, 8, 1, 4, 8);
  std::vector<int64_t> w = {1, -2, 3, -4, 5, -6};
  TileGroup grp = encode_group(w, L, d, p);
  RngStream rng(23, {0, 0});
  for (auto& t : grp.tiles) program_tile(t, rng);
  EXPECT_EQ(bit_sliced_vmm({0, 0, 0}, 8, grp), (std::vector<double>{0, 0}));
  EXPECT_THROW(make_layout(3, 2, 5, 2, 4, 8), ConfigError);
  p.dac_bits = 3;
  TileGroup g3 = encode_group(w, L, d, p);
  for (auto& t : g3.tiles) program_tile(t, rng);
  EXPECT_THROW(bit_sliced_vmm({1, 1, 1}, 8, g3), ConfigError);
  EXPECT_THROW(make_layout(0, 2, 8, 1, 4, 8), PreconditionError);
}

TEST(BitSliced, EffectiveWeightsDecodeTargets) {
  DeviceParams d;
  NonIdealityProfile p;
  const auto L = make_layout(6, 5, 8, 1, 4, 16);
  RngStream rng(24, {0, 0});
  std::vector<int64_t> w(30);
  for (auto& v : w) v = rng.uniform_int(-127, 127);
  TileGroup grp = encode_group(w, L, d, p);
  for (auto& t : grp.tiles) program_tile(t, rng);
  const auto eff = effective_weights(grp);
  for (size_t k = 0; k < w.size(); ++k) EXPECT_NEAR(eff[k], static_cast<double>(w[k]), 1e-9);
}
