#include <iostream>

#include <CLI11.hpp>

#include "cimcall/cli.hpp"

int main(int argc, char** argv) {
  using namespace cimcall;
  CLI::App app{"cimcall: crossbar non-ideality evaluation for a surrogate basecaller"};
  app.require_subcommand(1);
  CliOptions o;
  uint64_t seed = 0;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", o.config, "TOML config, or a manifest.json to rerun");
    s->add_option("--preset", o.preset, "bundled preset (applied before --config)");
    s->add_option("--out", o.out, "output directory (overrides run.out_dir)");
    s->add_option("--seed", seed, "master seed (overrides run.seed)");
    s->add_option("--jobs", o.jobs, "parallel sweep cells")->check(CLI::Range(1, 256));
  };
  CLI::App* train = app.add_subcommand("train", "train the float teacher and write a checkpoint");
  CLI::App* eval = app.add_subcommand("evaluate", "map, program and evaluate one configuration");
  CLI::App* sweep = app.add_subcommand("sweep", "run the [sweep.grid] Cartesian product");
  CLI::App* lib = app.add_subcommand("build-library", "measure programmed tiles into a deviation library");
  CLI::App* report = app.add_subcommand("report", "print the tile plan and resolved config");
  CLI::App* presets = app.add_subcommand("presets", "list bundled presets");
  for (CLI::App* s : {train, eval, sweep, lib, report}) common(s);
  for (CLI::App* s : {eval, lib}) s->add_option("--checkpoint", o.checkpoint, "float model from `train`");
  lib->add_option("--samples", o.samples, "deviation vectors per tile")->check(CLI::PositiveNumber);
  lib->add_option("--min-samples", o.min_samples, "required minimum per tile");
  lib->add_option("--tiles", o.library_tiles, "tiles measured per weight slot")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  for (CLI::App* s : {train, eval, sweep, lib, report})
    if (s->parsed() && s->count("--seed")) o.seed = seed;

  try {
    if (presets->parsed()) {
      for (const auto& n : list_presets()) std::cout << n << "\n";
      return 0;
    }
    if (train->parsed()) return cmd_train(o);
    if (eval->parsed()) return cmd_evaluate(o);
    if (sweep->parsed()) return cmd_sweep(o);
    if (lib->parsed()) return cmd_build_library(o);
    if (report->parsed()) return cmd_report(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 2;
}
