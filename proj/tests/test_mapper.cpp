#include <gtest/gtest.h>

#include "cimcall/mapper.hpp"

using namespace cimcall;

namespace {

NetworkModel linear_model(int in, int out, int wb, uint64_t seed) {
  RngStream rng(seed, {});
  NetworkModel m;
  add_linear(m, in, out, rng);
  return quantize_model(m, QuantSpec::fixed(wb, 8));
}

NetworkModel trained_like(int wb, int ab, uint64_t seed, std::vector<SyntheticRead>* data = nullptr) {
  RngStream rng(seed, {});
  TaskConfig tc;
  tc.n_reads = 6;
  auto d = generate_dataset(tc, rng);
  NetworkModel m = make_surrogate(rng);
  calibrate_input_ranges(m, d);
  if (data) *data = d;
  return quantize_model(m, QuantSpec::fixed(wb, ab));
}

// Independent tally: count (driven row, used column) pairs tile by tile.
int64_t tally_cells(const Chip& c) {
  int64_t n = 0;
  for (const auto& s : c.slots)
    for (int cb = 0; cb < s.group.layout.col_blocks; ++cb) {
      int used = 0;
      for (int lc = 0; lc < s.group.layout.tile_cols; ++lc)
        if (int64_t{cb} * s.group.layout.tile_cols + lc < int64_t{s.out()} * 2 * s.group.layout.slices) ++used;
      for (int rb = 0; rb < s.group.layout.row_blocks; ++rb)
        n += int64_t{used} * s.group.tiles[s.group.layout.tile_index(rb, cb)].driven_rows;
    }
  return n;
}

}  // namespace

TEST(Partition, CountsTilesForLinearLayer) {
  const NetworkModel m = linear_model(64, 64, 4, 1);
  const TilePlan p = partition_and_map(m, 64, DeviceParams{}, QuantSpec::fixed(4, 8));
  EXPECT_EQ(p.tiles, 8);
  EXPECT_EQ(p.mapped_cells, 64 * 64 * 4 * 2);
  RngStream rng(2, {});
  const Chip c = program_plan(p, m, NonIdealityProfile{}, rng);
  EXPECT_EQ(tally_cells(c), p.mapped_cells);
  EXPECT_NEAR(p.utilization(), 1.0, 1e-15);
}

TEST(Partition, SingleWeightUtilization) {
  const NetworkModel m = linear_model(1, 1, 8, 3);
  const TilePlan p = partition_and_map(m, 64, DeviceParams{}, QuantSpec::fixed(8, 8));
  EXPECT_EQ(p.tiles, 1);
  EXPECT_DOUBLE_EQ(p.utilization(), 8.0 * 2 / (64.0 * 64.0));
}

TEST(Partition, LargerArraysNeverNeedMoreTiles) {
  const NetworkModel m = trained_like(8, 8, 4);
  int prev = 1 << 30;
  for (int a : {4, 8, 16, 32, 64, 128, 256, 512, 1024}) {
    const TilePlan p = partition_and_map(m, a, DeviceParams{}, QuantSpec::fixed(8, 8));
    EXPECT_LE(p.tiles, prev) << a;
    prev = p.tiles;
  }
}

TEST(Partition, ConservationAcrossSpecsAndCells) {
  for (int levels : {2, 4, 16})
    for (int wb : {4, 8, 16}) {
      DeviceParams dev;
      dev.levels_per_cell = levels;
      const int bpc = dev.bits_per_cell();
      if (wb % bpc) continue;
      const NetworkModel m = trained_like(wb, 8, 5);
      const TilePlan p = partition_and_map(m, 32, dev, QuantSpec::fixed(wb, 8));
      int64_t bits = 0;
      for (int s = 0; s < static_cast<int>(m.slots.size()); ++s) bits += m.slot_weight(s).size() * wb;
      EXPECT_EQ(p.mapped_cells, bits * 2 / bpc);
      RngStream rng(1, {});
      EXPECT_EQ(tally_cells(program_plan(p, m, NonIdealityProfile{}, rng)), p.mapped_cells);
    }
}

TEST(Partition, Errors) {
  const NetworkModel m = linear_model(4, 4, 8, 6);
  EXPECT_THROW(partition_and_map(m, 48, DeviceParams{}, QuantSpec::fixed(8, 8)), ConfigError);
  EXPECT_THROW(partition_and_map(m, 2048, DeviceParams{}, QuantSpec::fixed(8, 8)), ConfigError);
  EXPECT_THROW(partition_and_map(m, 64, DeviceParams{}, QuantSpec::fixed(4, 8)), PreconditionError);
  EXPECT_THROW(partition_and_map(m, 64, DeviceParams{}, QuantSpec::float32()), ConfigError);
  NetworkModel z;
  RngStream rng(1, {});
  add_linear(z, 0, 3, rng);
  z.quant = QuantSpec::fixed(8, 8);
  EXPECT_THROW(partition_and_map(z, 64, DeviceParams{}, QuantSpec::fixed(8, 8)), PreconditionError);
  DeviceParams d3;
  d3.levels_per_cell = 3;
  EXPECT_THROW(partition_and_map(m, 64, d3, QuantSpec::fixed(8, 8)), ConfigError);
}

TEST(Partition, PlanIsDeterministicAndReported) {
  const NetworkModel m = trained_like(8, 8, 7);
  const TilePlan a = partition_and_map(m, 64, DeviceParams{}, QuantSpec::fixed(8, 8));
  const TilePlan b = partition_and_map(m, 64, DeviceParams{}, QuantSpec::fixed(8, 8));
  EXPECT_EQ(plan_report(a), plan_report(b));
  const std::string r = plan_report(a);
  for (const char* name : {"conv", "rec_x", "rec_f", "rec_h", "linear"}) EXPECT_NE(r.find(name), std::string::npos);
}

TEST(Program, ZeroRateReadBackIsLossless) {
  const NetworkModel m = trained_like(8, 8, 8);
  const TilePlan p = partition_and_map(m, 16, DeviceParams{}, QuantSpec::fixed(8, 8));
  RngStream rng(3, {});
  const Chip c = program_plan(p, m, NonIdealityProfile{}, rng);
  for (int s = 0; s < static_cast<int>(c.slots.size()); ++s) {
    const auto back = read_back(c, s);
    for (size_t k = 0; k < back.size(); ++k) EXPECT_EQ(std::llround(back[k]), c.slots[s].w_int[k]);
    for (size_t k = 0; k < back.size(); ++k) EXPECT_NEAR(back[k], static_cast<double>(c.slots[s].w_int[k]), 1e-6);
    for (const auto& t : c.slots[s].group.tiles) EXPECT_EQ(t.g, t.target);
  }
  EXPECT_EQ(c.stats.pulses, c.stats.cells);
  EXPECT_EQ(c.stats.max_residual, 0.0);
}

TEST(Program, VerifiedModeMeetsTolerance) {
  const NetworkModel m = trained_like(8, 8, 9);
  const TilePlan p = partition_and_map(m, 32, DeviceParams{}, QuantSpec::fixed(8, 8));
  NonIdealityProfile prof;
  prof.write_variation_rate = 0.1;
  ProgramOptions opt;
  opt.mode = ProgramMode::Verified;
  opt.tolerance = 0.01 * DeviceParams{}.window();
  opt.max_pulses = 200;
  RngStream rng(4, {});
  const Chip c = program_plan(p, m, prof, rng, opt);
  EXPECT_EQ(c.stats.flagged, 0);
  EXPECT_LE(c.stats.max_residual, opt.tolerance);
  EXPECT_GT(c.stats.pulses, c.stats.cells);
}

TEST(Program, VerifiedBeatsOneShotMedianResidual) {
  const NetworkModel m = linear_model(16, 4, 8, 10);
  const TilePlan p = partition_and_map(m, 16, DeviceParams{}, QuantSpec::fixed(8, 8));
  NonIdealityProfile prof;
  prof.write_variation_rate = 0.1;
  ProgramOptions ver;
  ver.mode = ProgramMode::Verified;
  ver.tolerance = 0.02 * DeviceParams{}.window();
  std::vector<double> one, veri;
  for (int run = 0; run < 100; ++run) {
    RngStream a(100 + run, {}), b(100 + run, {});
    one.push_back(program_plan(p, m, prof, a).stats.mean_residual());
    veri.push_back(program_plan(p, m, prof, b, ver).stats.mean_residual());
  }
  std::nth_element(one.begin(), one.begin() + 50, one.end());
  std::nth_element(veri.begin(), veri.begin() + 50, veri.end());
  EXPECT_LT(veri[50], one[50]);
}

TEST(Program, DeterministicPerSeed) {
  const NetworkModel m = trained_like(8, 8, 11);
  const TilePlan p = partition_and_map(m, 32, DeviceParams{}, QuantSpec::fixed(8, 8));
  NonIdealityProfile prof;
  prof.write_variation_rate = 0.25;
  RngStream a(5, {}), b(5, {}), c(6, {});
  const Chip x = program_plan(p, m, prof, a), y = program_plan(p, m, prof, b), z = program_plan(p, m, prof, c);
  EXPECT_EQ(x.slots[2].group.tiles[0].g, y.slots[2].group.tiles[0].g);
  EXPECT_NE(x.slots[2].group.tiles[0].g, z.slots[2].group.tiles[0].g);
}

TEST(Backend, IdealTilesMatchExactAt16Bits) {
  std::vector<SyntheticRead> data;
  const NetworkModel m = trained_like(16, 16, 12, &data);
  const TilePlan p = partition_and_map(m, 64, DeviceParams{}, QuantSpec::fixed(16, 16));
  NonIdealityProfile prof;
  prof.adc_bits = 12;
  RngStream rng(7, {});
  const Chip c = program_plan(p, m, prof, rng);
  std::vector<double> sig(data[0].signal.begin(), data[0].signal.begin() + 100);
  ExactBackend ex(m);
  TileBackend tb(c);
  const Mat pe = forward(m, sig, ex), pt = forward(m, sig, tb);
  ASSERT_EQ(pe.rows(), 100);
  for (int t = 0; t < 100; ++t) {
    Eigen::Index a, b;
    pe.row(t).maxCoeff(&a);
    pt.row(t).maxCoeff(&b);
    EXPECT_EQ(a, b) << t;
  }
  EXPECT_LT((pe - pt).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(tb.flags.adc_saturated, 0);
}

TEST(Backend, IdealTilesAreExactAt8Bits) {
  std::vector<SyntheticRead> data;
  const NetworkModel m = trained_like(8, 8, 13, &data);
  const TilePlan p = partition_and_map(m, 16, DeviceParams{}, QuantSpec::fixed(8, 8));
  RngStream rng(8, {});
  const Chip c = program_plan(p, m, NonIdealityProfile{}, rng);
  ExactBackend ex(m);
  TileBackend tb(c);
  const Mat a = forward(m, data[1].signal, ex), b = forward(m, data[1].signal, tb);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backend, UnmappedModelIsRejected) {
  const NetworkModel m = linear_model(4, 4, 8, 14);
  const TilePlan p = partition_and_map(m, 16, DeviceParams{}, QuantSpec::fixed(8, 8));
  RngStream rng(9, {});
  const Chip c = program_plan(p, m, NonIdealityProfile{}, rng);
  TileBackend tb(c);
  NetworkModel other = trained_like(8, 8, 15);
  Mat y;
  EXPECT_THROW(tb.product(other, 0, Mat::Zero(1, 5), y, nullptr), StateError);
  Chip blank;
  EXPECT_THROW(TileBackend{blank}, StateError);
}

TEST(Schedule, StagesFollowProducers) {
  const NetworkModel m = trained_like(8, 8, 16);
  const ScheduleModel s = make_schedule(m);
  ASSERT_EQ(s.stages.size(), 4u);
  EXPECT_TRUE(s.stages[2].serial);
  EXPECT_EQ(s.stages[2].slots.size(), 2u);
  const auto st = stage_start_times(s, {1.0, 2.0, 3.0, 4.0});
  EXPECT_EQ(st, (std::vector<double>{0.0, 1.0, 3.0, 6.0}));
}
