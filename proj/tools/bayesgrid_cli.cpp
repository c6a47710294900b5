// Command-line runner for the experiment waterfall.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "bayesgrid/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Credit-loss valuation grids with Bayesian dimension reduction"};
  app.require_subcommand(1);

  CLI::App* run = app.add_subcommand("run", "Run one stage or the whole waterfall");
  std::string config_path, stage = "all", out_dir;
  int threads = 1;
  std::optional<std::uint64_t> seed;
  run->add_option("--config", config_path, "YAML experiment configuration")->required()->check(CLI::ExistingFile);
  std::string stage_help = "Stage to run: all";
  for (const auto& s : bayesgrid::experiment::stage_names()) stage_help += ", " + s;
  run->add_option("--stage", stage, stage_help)->capture_default_str();
  run->add_option("--out", out_dir, "Output directory")->required();
  run->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  run->add_option("--seed", seed, "Master seed (overrides the configuration)");

  CLI11_PARSE(app, argc, argv);

  try {
    auto config = bayesgrid::experiment::load_config(config_path, seed);
    config.threads = threads;
    bayesgrid::experiment::run_waterfall(config, stage, out_dir);
  } catch (const bayesgrid::experiment::StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
