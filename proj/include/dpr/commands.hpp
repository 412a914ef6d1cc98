// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dpr/config.hpp"
#include "dpr/data.hpp"

namespace dpr::cli {

struct TrainArgs {
  std::string config_path;  // optional; defaults apply when empty
  std::string data_path;    // overrides the config's data key when set
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> ablations;  // mscale, ortho, init, route
};

/// Train, write <out>/model.dprc, <out>/epochs.csv, <out>/metrics.txt.
void run_train(const TrainArgs& args, std::ostream& os = std::cout);

struct EvalOutput {
  double mse = 0.0, mae = 0.0;
  std::string split;
};

EvalOutput run_eval(const std::string& checkpoint_path, const std::string& data_path,
                    const std::string& split, std::ostream& os = std::cout);

/// Forecast from the trailing lookback window of `data_path`, in the data's
/// original scale; CSV goes to `out_path` or stdout when empty.
void run_forecast(const std::string& checkpoint_path, const std::string& data_path,
                  const std::string& out_path, std::ostream& os = std::cout);

void run_diagnose(const std::vector<std::string>& data_paths, const std::string& out_csv,
                  std::ostream& os = std::cout);

/// Invariant battery; prints one PASS/FAIL line per invariant. Returns true
/// when everything passed. `inject_gamma_fault` mis-initializes the adapter
/// gain (negative-control hook).
bool run_gradcheck(std::uint64_t seed, bool inject_gamma_fault, std::ostream& os = std::cout);

struct SynthArgs {
  std::string out_path;
  std::uint64_t seed = 1;
  Index length = 2048;
  Index block_len = 0;  // 0 = default schedule
};

void run_synth(const SynthArgs& args, std::ostream& os = std::cout);

}  // namespace dpr::cli
