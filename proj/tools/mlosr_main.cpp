// mlosr: train, evaluate and inspect open-set recognition models.
//
//   mlosr train --config run.ini --set max_epochs=5
//   mlosr eval --set run_dir=runs/train-... --set eval_tau=0.3
//
// Prints the run directory on success; on failure prints
// "error <category>: <message>" and exits nonzero.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mlosr/cli.hpp"

namespace {

const char* describe(mlosr::cli::Command c) {
  using mlosr::cli::Command;
  switch (c) {
    case Command::train: return "train a model and fit its tail model";
    case Command::eval: return "evaluate a trained run on its open-set test split";
    case Command::sweep: return "F1 against openness over randomized trials";
    case Command::reconstruct: return "dump input/reconstruction images and per-sample errors";
    case Command::fit_evt: return "refit the tail model of a trained run";
  }
  return "";
}

std::pair<std::string, std::string> parse_override(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw mlosr::ConfigError("--set expects key=value, got '" + s + "'");
  return {mlosr::cli::trim(s.substr(0, eq)), mlosr::cli::trim(s.substr(eq + 1))};
}

}  // namespace

int main(int argc, char** argv) {
  using namespace mlosr::cli;
  CLI::App app{"Multi-task open-set recognition"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  std::string tau, tail_size, seed, out_dir, run_dir;
  for (Command c : {Command::train, Command::eval, Command::sweep, Command::reconstruct, Command::fit_evt}) {
    CLI::App* sub = app.add_subcommand(command_name(c), describe(c));
    sub->add_option("-c,--config", config_path, "key=value config file");
    sub->add_option("-s,--set", sets, "override one key (repeatable)");
    sub->add_option("--seed", seed, "shorthand for --set seed=...");
    sub->add_option("--out", out_dir, "shorthand for --set out_dir=...");
    if (c == Command::eval || c == Command::reconstruct || c == Command::fit_evt) {
      sub->add_option("--run", run_dir, "shorthand for --set run_dir=...");
    }
    if (c == Command::eval || c == Command::reconstruct) sub->add_option("--tau", tau, "shorthand for --set eval_tau=...");
    if (c == Command::fit_evt || c == Command::train) {
      sub->add_option("--tau", tau, "shorthand for --set tau=...");
      sub->add_option("--tail-size", tail_size, "shorthand for --set tail_size=...");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_line("config", e.what()) << "\n";
    return exit_code_for("config");
  }

  try {
    const Command cmd = *parse_command(app.get_subcommands().front()->get_name());
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& s : sets) overrides.push_back(parse_override(s));
    if (!seed.empty()) overrides.emplace_back("seed", seed);
    if (!out_dir.empty()) overrides.emplace_back("out_dir", out_dir);
    if (!run_dir.empty()) overrides.emplace_back("run_dir", run_dir);
    if (!tail_size.empty()) overrides.emplace_back("tail_size", tail_size);
    if (!tau.empty()) overrides.emplace_back(cmd == Command::eval || cmd == Command::reconstruct ? "eval_tau" : "tau", tau);

    const ConfigFile file = config_path.empty() ? ConfigFile{} : load_config_file(config_path);
    const RunConfig rc = resolve_config(cmd, file, overrides);
    std::cout << run_command(rc).string() << "\n";
    return 0;
  } catch (const mlosr::Error& e) {
    std::cerr << error_line(e.category(), e.what()) << "\n";
    return exit_code_for(e.category());
  } catch (const std::bad_alloc&) {
    std::cerr << error_line("resource", "out of memory") << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << error_line("internal", e.what()) << "\n";
    return 1;
  }
}
