// SPDX-License-Identifier: Apache-2.0
//
// dpr: train / eval / forecast / diagnose / gradcheck / synth.
//
// Exit codes: 0 ok, 1 invariant failure (gradcheck), 2 config error,
// 3 data error, 4 numeric error, 5 internal contract violation.
#include <CLI11.hpp>
#include <iostream>

#include "dpr/commands.hpp"

namespace {

int code_for(const dpr::Error& e) {
  const std::string& c = e.category();
  if (c == "config") return 2;
  if (c == "data") return 3;
  if (c == "numeric") return 4;
  return 5;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamic pattern recalibration forecaster"};
  app.require_subcommand(1);

  dpr::cli::TrainArgs train_args;
  std::uint64_t seed_flag = 0;
  bool seed_set = false;
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  train->add_option("--config", train_args.config_path, "key = value config file");
  train->add_option("--data", train_args.data_path, "input CSV (overrides the config's data key)");
  train->add_option("--out", train_args.out_dir, "output directory")->required();
  train->add_option("--seed", seed_flag, "seed override")->each([&](const std::string&) { seed_set = true; });
  train->add_option("--ablate", train_args.ablations, "ablation switches: mscale, ortho, init, route");

  std::string ckpt, data, split_name = "test", out_path;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one split");
  eval->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  eval->add_option("--data", data, "input CSV")->required();
  eval->add_option("--split", split_name, "train | val | test (default test)");

  auto* forecast = app.add_subcommand("forecast", "forecast from the trailing lookback window");
  forecast->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  forecast->add_option("--data", data, "input CSV with at least `lookback` rows")->required();
  forecast->add_option("--out", out_path, "output CSV (default stdout)");

  std::vector<std::string> diag_paths;
  auto* diagnose = app.add_subcommand("diagnose", "non-stationarity diagnostics for CSV datasets");
  diagnose->add_option("data", diag_paths, "dataset CSV paths")->required();
  diagnose->add_option("--out", out_path, "also write the report as CSV");

  std::uint64_t gc_seed = 1;
  bool inject_fault = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "run the invariant battery");
  gradcheck->add_option("--seed", gc_seed, "battery seed");
  gradcheck->add_flag("--inject-gamma-fault", inject_fault,
                      "test hook: mis-initialize the adapter gain (expected to fail)");

  dpr::cli::SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "emit a seeded regime-switch synthetic series");
  synth->add_option("--out", synth_args.out_path, "output CSV")->required();
  synth->add_option("--seed", synth_args.seed, "generator seed");
  synth->add_option("--length", synth_args.length, "series length (>= 512)");
  synth->add_option("--block-len", synth_args.block_len, "regime block length");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) {
      if (seed_set) train_args.seed = seed_flag;
      dpr::cli::run_train(train_args);
    } else if (eval->parsed()) {
      dpr::cli::run_eval(ckpt, data, split_name);
    } else if (forecast->parsed()) {
      dpr::cli::run_forecast(ckpt, data, out_path);
    } else if (diagnose->parsed()) {
      dpr::cli::run_diagnose(diag_paths, out_path);
    } else if (gradcheck->parsed()) {
      if (!dpr::cli::run_gradcheck(gc_seed, inject_fault)) return 1;
    } else if (synth->parsed()) {
      dpr::cli::run_synth(synth_args);
    }
  } catch (const dpr::Error& e) {
    std::cerr << "error (" << e.category() << "): " << e.what() << "\n";
    return code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  }
  return 0;
}
