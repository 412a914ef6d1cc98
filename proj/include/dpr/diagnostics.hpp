// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <complex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpr/data.hpp"
#include "dpr/errors.hpp"

namespace dpr {

/// In-place iterative radix-2 FFT; size must be a power of two.
void fft_pow2(std::vector<std::complex<double>>& a);

/// Normalized Shannon entropy of the DC-excluded power spectrum, in [0,1].
/// The channel is z-normalized first; the transform length is the largest
/// power of two <= x.size(). Constant series raise UndefinedDiagnosticError.
double spectral_entropy(std::span<const double> x);

/// Volatility of volatility: std/mean of the rolling-window standard
/// deviation (window w, stride 1). Constant series raise
/// UndefinedDiagnosticError.
double vov(std::span<const double> x, Index window);

/// Diagnostics rolling window: about one day of samples, in [2, 256];
/// falls back to 24 when the sampling rate is unknown.
Index vov_window(double points_per_day);

struct AdfResult {
  double t_stat = 0.0;
  double p_value = 1.0;
  int lags = 0;
};

/// Augmented Dickey-Fuller test with constant and linear trend:
///   dy_t = a + b*t + g*y_{t-1} + sum_i d_i * dy_{t-i} + e_t
/// Lag order by the Schwert rule floor(12*(T/100)^(1/4)). The p-value
/// interpolates the asymptotic trend-case distribution quantiles and is
/// clamped to [0.001, 0.999].
AdfResult adf_test(std::span<const double> x);

/// Per-dataset diagnostic profile. Channels after the first 16 are skipped;
/// channels whose diagnostics are undefined are excluded from the averages
/// and counted in `undefined_channels`.
struct DiagnosticsReport {
  std::string name;
  std::vector<double> channel_adf_p, channel_entropy, channel_vov;  // NaN = undefined
  double adf_p = 0.0, entropy = 0.0, vov = 0.0;                     // channel averages
  int sampled_channels = 0;
  int undefined_channels = 0;
};

DiagnosticsReport profile_frame(const SeriesFrame& frame, const std::string& name);

struct ScoredDataset {
  std::string name;
  double entropy = 0.0, vov = 0.0;
  int rank_entropy = 0, rank_vov = 0;
  int score = 0;
};

/// Ascending competition ranks (1 = lowest; ties share the lower rank and the
/// next rank is skipped); score = rank(H_s) + rank(VoV).
std::vector<ScoredDataset> composite_score(const std::vector<DiagnosticsReport>& reports);

}  // namespace dpr
