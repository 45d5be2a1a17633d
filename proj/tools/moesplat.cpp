// SPDX-License-Identifier: Apache-2.0
//
// moesplat {synth|train|render|prune|distill|eval|ablate} --config <path>
//          [--seed N] [--out DIR] [--single-pass] [--stats]
#include <cstdint>
#include <iostream>
#include <string>
#include <utility>

#include <CLI11.hpp>

#include "moesplat/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-experts dynamic Gaussian splatting"};
  app.require_subcommand(1, 1);

  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  bool single_pass = false;
  bool stats = false;

  const std::pair<const char*, const char*> commands[] = {
      {"synth", "Generate the procedural scene and its ground-truth views"},
      {"train", "Fit the experts, then the router, and write a checkpoint"},
      {"render", "Render test views with gating maps from a checkpoint"},
      {"prune", "Remove low-importance Gaussians from a checkpoint"},
      {"distill", "Retrain one expert against the mixture it belongs to"},
      {"eval", "Score a checkpoint on the test views"},
      {"ablate", "Compare single experts, uniform blending and every router"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config, "JSON run configuration")->required();
    sub->add_option("--seed", seed, "Override the configured seed");
    sub->add_option("--out", out, "Override the output directory");
    sub->add_flag("--single-pass", single_pass, "Render all experts in one merged pass");
    sub->add_flag("--stats", stats, "Report render pass counters");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? moesplat::kExitOk : moesplat::kExitConfig;
  }

  CLI::App* sub = app.get_subcommands().front();
  moesplat::CommandFlags flags;
  if (sub->count("--seed") > 0) flags.seed = seed;
  if (sub->count("--out") > 0) flags.out = out;
  flags.single_pass = single_pass;
  flags.stats = stats;
  return moesplat::run_command(sub->get_name(), config, flags);
}
