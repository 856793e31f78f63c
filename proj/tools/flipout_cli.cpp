// flipout_cli: experiment runner.
//
//   flipout_cli variance-sweep --config sweep.ini --seed 7 --out runs/sweep
//   flipout_cli gradcheck
//   flipout_cli replay --manifest runs/sweep/manifest.json --out runs/again
//
// Settings are layered: command defaults, then the config file, then flags.
// Exit status: 0 success, 1 failed audit (gradcheck), 2 invalid input or
// runtime error (with a JSON error record on stderr).

#include "flipout/experiment.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
  bool freeze_batch = false;
  std::optional<std::string> strategies;
  std::optional<std::string> grid;
  bool wall_clock = false;
};

void add_run_flags(CLI::App* sub, Overrides& o) {
  sub->add_option("--seed", o.seed, "Root seed (default 42)");
  sub->add_option("--out", o.out, "Output directory (default ./out)");
  sub->add_option("--threads", o.threads, "Worker threads for replicate loops")->check(CLI::PositiveNumber);
  sub->add_flag("--wall-clock", o.wall_clock, "Record per-iteration wall time in run logs");
}

flipout::ExperimentConfig resolve(flipout::Command command, const Overrides& o) {
  using namespace flipout;
  ExperimentConfig cfg = default_config(command);
  if (!o.config.empty()) apply_config_text(cfg, detail::read_file(o.config), o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out = *o.out;
  if (o.threads) cfg.threads = *o.threads;
  if (o.wall_clock) cfg.wall_clock = true;
  if (o.freeze_batch) {
    if (command != Command::variance_sweep) throw ConfigError("--freeze-batch applies to variance-sweep only");
    cfg.sweep.options.freeze_batch = true;
  }
  if (o.grid) {
    if (command != Command::variance_sweep) throw ConfigError("--grid applies to variance-sweep only");
    cfg.sweep.grid = detail::parse_grid(*o.grid);
  }
  if (o.strategies) {
    switch (command) {
      case Command::variance_sweep: detail::decode(*o.strategies, cfg.sweep.strategies); break;
      case Command::train_bbb: detail::decode(*o.strategies, cfg.bbb.strategies); break;
      case Command::train_es: detail::decode(*o.strategies, cfg.es.samplings); break;
      case Command::gradcheck: detail::decode(*o.strategies, cfg.gradcheck.strategies); break;
      default: throw ConfigError("--strategies does not apply to " + to_string(command));
    }
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flipout experiment runner"};
  app.require_subcommand(1);

  Overrides o;
  std::string manifest;
  std::vector<std::pair<flipout::Command, CLI::App*>> subs;
  for (flipout::Command c : flipout::all_commands()) {
    CLI::App* sub = app.add_subcommand(flipout::to_string(c));
    sub->add_option("--config", o.config, "Config file")->check(CLI::ExistingFile);
    add_run_flags(sub, o);
    if (c == flipout::Command::variance_sweep) {
      sub->add_flag("--freeze-batch", o.freeze_batch, "Draw one mini-batch per run (perturbation term only)");
      sub->add_option("--grid", o.grid, "Batch sizes: a..b (powers of two) or a comma list");
    }
    if (c != flipout::Command::decompose && c != flipout::Command::bench)
      sub->add_option("--strategies", o.strategies, "Comma-separated strategies (ES: flipout,independent)");
    subs.emplace_back(c, sub);
  }
  CLI::App* replay = app.add_subcommand("replay", "Re-run the configuration stored in a manifest");
  replay->add_option("--manifest", manifest, "manifest.json of an earlier run")->required();
  replay->add_option("--out", o.out, "Output directory")->required();
  replay->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << flipout::error_record("usage", e.what(), "") << "\n";
    return 2;
  }

  flipout::ExperimentConfig cfg;
  std::string command_name = replay->parsed() ? "replay" : "";
  try {
    if (replay->parsed()) {
      cfg = flipout::load_manifest(manifest);
      cfg.out = *o.out;
      if (o.threads) cfg.threads = *o.threads;
    } else {
      for (const auto& [c, sub] : subs)
        if (sub->parsed()) {
          command_name = flipout::to_string(c);
          cfg = resolve(c, o);
        }
    }
  } catch (const flipout::Error& e) {
    const std::string record = flipout::error_record(e.kind(), e.what(), command_name);
    std::cerr << record << "\n";
    if (o.out) {
      std::error_code ec;
      std::filesystem::create_directories(*o.out, ec);
      if (!ec) std::ofstream(std::filesystem::path(*o.out) / "error.json", std::ios::binary) << record << "\n";
    }
    return 2;
  }
  return flipout::run_command(cfg, std::cerr, std::cerr);
}
