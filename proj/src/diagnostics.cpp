// SPDX-License-Identifier: Apache-2.0
#include "dpr/diagnostics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace dpr {

void fft_pow2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw ContractError("fft_pow2: size must be a power of two");
  // bit-reversal permutation
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * M_PI / double(len);
    std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        auto u = a[i + j];
        auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

namespace {

std::vector<double> z_normalize(std::span<const double> x) {
  double mean = std::accumulate(x.begin(), x.end(), 0.0) / double(x.size());
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= double(x.size());
  if (var <= 0) throw UndefinedDiagnosticError("constant series");
  double inv = 1.0 / std::sqrt(var);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv;
  return out;
}

}  // namespace

double spectral_entropy(std::span<const double> x) {
  if (x.size() < 4) throw ConfigError("spectral_entropy: need at least 4 samples");
  auto z = z_normalize(x);
  std::size_t n = 1;
  while (n * 2 <= z.size()) n *= 2;
  std::vector<std::complex<double>> buf(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = z[i];
  fft_pow2(buf);
  const std::size_t n_f = n / 2;  // positive-frequency bins 1..n/2, DC excluded
  double total = 0;
  std::vector<double> power(n_f);
  for (std::size_t k = 1; k <= n_f; ++k) {
    double p = std::norm(buf[k]);
    power[k - 1] = p;
    total += p;
  }
  if (total <= 0) throw UndefinedDiagnosticError("all-zero spectrum");
  double h = 0;
  for (double p : power) {
    double q = p / total;
    if (q > 0) h -= q * std::log(q);
  }
  return h / std::log(double(n_f));
}

Index vov_window(double points_per_day) {
  if (points_per_day <= 0) return 24;
  return std::min<Index>(256, std::max<Index>(2, static_cast<Index>(std::llround(points_per_day))));
}

double vov(std::span<const double> x, Index window) {
  if (window < 2) throw ConfigError("vov: window must be >= 2");
  const Index T = static_cast<Index>(x.size());
  if (T < 2 * window) throw ConfigError("vov: need at least 2 windows of data");
  // rolling population std via prefix sums
  std::vector<double> ps(static_cast<std::size_t>(T) + 1, 0.0), ps2(static_cast<std::size_t>(T) + 1, 0.0);
  for (Index t = 0; t < T; ++t) {
    ps[static_cast<std::size_t>(t + 1)] = ps[static_cast<std::size_t>(t)] + x[static_cast<std::size_t>(t)];
    ps2[static_cast<std::size_t>(t + 1)] =
        ps2[static_cast<std::size_t>(t)] + x[static_cast<std::size_t>(t)] * x[static_cast<std::size_t>(t)];
  }
  const Index count = T - window + 1;
  double mean_sigma = 0;
  std::vector<double> sigma(static_cast<std::size_t>(count));
  for (Index t = 0; t < count; ++t) {
    double s = ps[static_cast<std::size_t>(t + window)] - ps[static_cast<std::size_t>(t)];
    double s2 = ps2[static_cast<std::size_t>(t + window)] - ps2[static_cast<std::size_t>(t)];
    double m = s / double(window);
    double var = std::max(0.0, s2 / double(window) - m * m);
    sigma[static_cast<std::size_t>(t)] = std::sqrt(var);
    mean_sigma += sigma[static_cast<std::size_t>(t)];
  }
  mean_sigma /= double(count);
  if (mean_sigma < 1e-12) throw UndefinedDiagnosticError("constant series (zero rolling volatility)");
  double var_sigma = 0;
  for (double s : sigma) var_sigma += (s - mean_sigma) * (s - mean_sigma);
  var_sigma /= double(count);
  return std::sqrt(var_sigma) / mean_sigma;
}

namespace {

// Asymptotic quantiles of the Dickey-Fuller t-distribution for the
// constant-plus-trend regression (Fuller's tabulation, T -> infinity).
constexpr double kDfProbs[] = {0.01, 0.025, 0.05, 0.10, 0.90, 0.95, 0.975, 0.99};
constexpr double kDfQuantiles[] = {-3.96, -3.66, -3.41, -3.12, -1.25, -0.94, -0.66, -0.33};
constexpr int kDfTable = 8;

double df_p_value(double t_stat) {
  if (t_stat <= kDfQuantiles[0]) return 0.001;
  if (t_stat >= kDfQuantiles[kDfTable - 1]) return 0.999;
  int hi = 1;
  while (t_stat > kDfQuantiles[hi]) ++hi;
  double w = (t_stat - kDfQuantiles[hi - 1]) / (kDfQuantiles[hi] - kDfQuantiles[hi - 1]);
  double p = kDfProbs[hi - 1] + w * (kDfProbs[hi] - kDfProbs[hi - 1]);
  return std::clamp(p, 0.001, 0.999);
}

}  // namespace

AdfResult adf_test(std::span<const double> x) {
  const Index T = static_cast<Index>(x.size());
  if (T < 50) throw ConfigError("adf_test: need at least 50 samples, got " + std::to_string(T));
  const int lags = static_cast<int>(std::floor(12.0 * std::pow(double(T) / 100.0, 0.25)));
  const Index rows = T - 1 - lags;
  const int cols = 3 + lags;  // constant, trend, y_{t-1}, lagged diffs
  if (rows <= cols) throw ConfigError("adf_test: series too short for lag order " + std::to_string(lags));

  std::vector<double> dy(static_cast<std::size_t>(T - 1));
  for (Index t = 1; t < T; ++t)
    dy[static_cast<std::size_t>(t - 1)] = x[static_cast<std::size_t>(t)] - x[static_cast<std::size_t>(t - 1)];

  Eigen::MatrixXd X(rows, cols);
  Eigen::VectorXd y(rows);
  for (Index r = 0; r < rows; ++r) {
    Index t = r + lags;  // dy index of the regressand
    y(r) = dy[static_cast<std::size_t>(t)];
    X(r, 0) = 1.0;
    X(r, 1) = double(t + 1);                    // linear trend
    X(r, 2) = x[static_cast<std::size_t>(t)];   // y_{t-1}
    for (int i = 1; i <= lags; ++i) X(r, 2 + i) = dy[static_cast<std::size_t>(t - i)];
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < cols) throw NumericError("adf_test: singular regression matrix");
  Eigen::VectorXd beta = qr.solve(y);
  Eigen::VectorXd resid = y - X * beta;
  double dof = double(rows - cols);
  double sigma2 = resid.squaredNorm() / dof;
  // var(beta_g) = sigma^2 * [(X'X)^{-1}]_gg via the QR factors
  Eigen::MatrixXd xtx_inv = (X.transpose() * X).ldlt().solve(Eigen::MatrixXd::Identity(cols, cols));
  double se = std::sqrt(sigma2 * xtx_inv(2, 2));
  if (!(se > 0) || !std::isfinite(se)) throw NumericError("adf_test: degenerate standard error");
  double t_stat = beta(2) / se;
  return AdfResult{t_stat, df_p_value(t_stat), lags};
}

DiagnosticsReport profile_frame(const SeriesFrame& frame, const std::string& name) {
  DiagnosticsReport rep;
  rep.name = name;
  const Index C = std::min<Index>(frame.cols(), 16);
  rep.sampled_channels = static_cast<int>(C);
  const Index w = vov_window(frame.points_per_day);
  double sum_p = 0, sum_h = 0, sum_v = 0;
  int ok = 0;
  for (Index c = 0; c < C; ++c) {
    auto x = frame.channel(c);
    double p = std::nan(""), h = std::nan(""), v = std::nan("");
    try {
      auto z = z_normalize(x);
      h = spectral_entropy(z);
      v = vov(z, std::min<Index>(w, static_cast<Index>(z.size()) / 2));
      p = adf_test(z).p_value;
      sum_p += p;
      sum_h += h;
      sum_v += v;
      ++ok;
    } catch (const Error&) {
      ++rep.undefined_channels;
    }
    rep.channel_adf_p.push_back(p);
    rep.channel_entropy.push_back(h);
    rep.channel_vov.push_back(v);
  }
  if (ok == 0) throw UndefinedDiagnosticError(name + ": every sampled channel is degenerate");
  rep.adf_p = sum_p / ok;
  rep.entropy = sum_h / ok;
  rep.vov = sum_v / ok;
  return rep;
}

namespace {

// Competition ranking, ascending: ties share the lower rank, next rank skips.
std::vector<int> ascending_ranks(const std::vector<double>& vals) {
  const std::size_t n = vals.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
  std::vector<int> ranks(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0 && vals[order[i]] == vals[order[i - 1]])
      ranks[order[i]] = ranks[order[i - 1]];
    else
      ranks[order[i]] = static_cast<int>(i) + 1;
  }
  return ranks;
}

}  // namespace

std::vector<ScoredDataset> composite_score(const std::vector<DiagnosticsReport>& reports) {
  if (reports.size() < 2) throw ConfigError("composite_score: need at least 2 datasets");
  std::vector<double> hs, vv;
  for (const auto& r : reports) {
    hs.push_back(r.entropy);
    vv.push_back(r.vov);
  }
  auto rh = ascending_ranks(hs);
  auto rv = ascending_ranks(vv);
  std::vector<ScoredDataset> out;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    ScoredDataset s;
    s.name = reports[i].name;
    s.entropy = reports[i].entropy;
    s.vov = reports[i].vov;
    s.rank_entropy = rh[i];
    s.rank_vov = rv[i];
    s.score = rh[i] + rv[i];
    out.push_back(s);
  }
  return out;
}

}  // namespace dpr
