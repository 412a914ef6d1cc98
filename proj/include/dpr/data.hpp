// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpr/errors.hpp"
#include "dpr/tensor.hpp"

namespace dpr {

/// Multivariate series, row-major T x C. Timestamps are optional; when they
/// parse as calendar datetimes the sampling rate (points per day) is inferred
/// and used by frequency-aware diagnostics.
struct SeriesFrame {
  std::vector<std::string> channel_names;
  std::vector<std::string> timestamps;  // empty, or one per row
  std::vector<double> values;
  Index n_rows = 0;
  Index n_cols = 0;
  double points_per_day = 0.0;  // 0 = unknown

  Index rows() const { return n_rows; }
  Index cols() const { return n_cols; }
  double at(Index t, Index c) const { return values[static_cast<std::size_t>(t * n_cols + c)]; }
  double& at(Index t, Index c) { return values[static_cast<std::size_t>(t * n_cols + c)]; }
  std::vector<double> channel(Index c) const;
};

/// Parse a comma-separated file: header row, optional leading timestamp
/// column, numeric cells. Missing values are linearly interpolated (edges
/// replicate the nearest observation). Throws DataError with row/column
/// coordinates on unparsable cells.
SeriesFrame load_csv(const std::string& path);

void write_csv(const SeriesFrame& frame, const std::string& path);

struct SplitFrames {
  SeriesFrame train, val, test;
};

/// Chronological contiguous partition with boundaries floor(T * cum_ratio).
SplitFrames split(const SeriesFrame& frame, double r_train, double r_val, double r_test);

struct ChannelStats {
  std::vector<double> mean, std;
};

/// Per-channel mean and (population) std.
ChannelStats channel_stats(const SeriesFrame& frame);

/// (x - mean) / std per channel; zero-variance channels keep scale 1.
SeriesFrame standardize(const SeriesFrame& frame, const ChannelStats& stats);

/// Regime-switch generator: the series alternates fixed-length blocks of a
/// calm sinusoid and a noisy high-amplitude burst. Block k covers rows
/// [k*block_len, (k+1)*block_len); even k is calm. Boundaries are therefore
/// known to tests: multiples of block_len.
struct RegimeSpec {
  Index block_len = 512;
  double calm_amp = 1.0;
  double calm_period = 24.0;
  double calm_noise = 0.05;
  double burst_amp = 4.0;
  double burst_period = 12.0;
  double burst_noise = 0.25;
};

SeriesFrame make_regime_synthetic(std::uint64_t seed, Index total_rows, const RegimeSpec& spec = {});

}  // namespace dpr
