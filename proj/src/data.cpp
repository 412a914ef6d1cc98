// SPDX-License-Identifier: Apache-2.0
#include "dpr/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dpr/rng.hpp"

namespace dpr {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  cells.push_back(trim(cur));
  return cells;
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* begin = s.data();
  const char* end = begin + s.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

// "YYYY-MM-DD[ HH:MM[:SS]]" (also 'T' separator, '/' date separators).
bool parse_datetime(const std::string& s, double& epoch_seconds) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, se = 0;
  std::string t = s;
  for (auto& ch : t)
    if (ch == 'T' || ch == '/') ch = (ch == '/') ? '-' : ' ';
  int n = std::sscanf(t.c_str(), "%d-%d-%d %d:%d:%d", &y, &mo, &d, &h, &mi, &se);
  if (n < 3) return false;
  if (y < 1400 || mo < 1 || mo > 12 || d < 1 || d > 31) return false;
  using namespace std::chrono;
  year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) return false;
  sys_days days{ymd};
  epoch_seconds = double(days.time_since_epoch().count()) * 86400.0 + h * 3600.0 + mi * 60.0 + se;
  return true;
}

bool looks_like_timestamp_header(const std::string& name) {
  std::string low;
  for (char c : name) low.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  return low == "date" || low == "datetime" || low == "time" || low == "timestamp" || low == "t" ||
         low == "ds";
}

double infer_points_per_day(const std::vector<std::string>& timestamps) {
  if (timestamps.size() < 3) return 0.0;
  std::vector<double> deltas;
  double prev = 0.0;
  bool have_prev = false;
  for (const auto& ts : timestamps) {
    double sec;
    if (!parse_datetime(ts, sec)) return 0.0;
    if (have_prev) deltas.push_back(sec - prev);
    prev = sec;
    have_prev = true;
  }
  std::nth_element(deltas.begin(), deltas.begin() + deltas.size() / 2, deltas.end());
  double median = deltas[deltas.size() / 2];
  if (median <= 0) return 0.0;
  return 86400.0 / median;
}

// Linear interpolation over NaN runs; edge runs replicate the nearest value.
void interpolate_channel(std::vector<double>& values, Index rows, Index cols, Index c) {
  auto v = [&](Index t) -> double& { return values[static_cast<std::size_t>(t * cols + c)]; };
  Index t = 0;
  while (t < rows) {
    if (!std::isnan(v(t))) {
      ++t;
      continue;
    }
    Index run_start = t;
    while (t < rows && std::isnan(v(t))) ++t;
    Index run_end = t;  // one past
    bool has_left = run_start > 0, has_right = run_end < rows;
    if (!has_left && !has_right)
      throw DataError("column " + std::to_string(c) + " has no numeric values");
    if (!has_left) {
      for (Index i = run_start; i < run_end; ++i) v(i) = v(run_end);
    } else if (!has_right) {
      for (Index i = run_start; i < run_end; ++i) v(i) = v(run_start - 1);
    } else {
      double left = v(run_start - 1), right = v(run_end);
      double span = double(run_end - (run_start - 1));
      for (Index i = run_start; i < run_end; ++i)
        v(i) = left + (right - left) * double(i - (run_start - 1)) / span;
    }
  }
}

}  // namespace

std::vector<double> SeriesFrame::channel(Index c) const {
  std::vector<double> out(static_cast<std::size_t>(n_rows));
  for (Index t = 0; t < n_rows; ++t) out[static_cast<std::size_t>(t)] = at(t, c);
  return out;
}

SeriesFrame load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  auto header = split_line(line);
  if (header.empty()) throw DataError(path + ": empty header");

  bool has_timestamp = looks_like_timestamp_header(header[0]);
  SeriesFrame frame;
  std::size_t first_data_col = has_timestamp ? 1 : 0;
  if (header.size() <= first_data_col) throw DataError(path + ": header declares no data columns");
  for (std::size_t i = first_data_col; i < header.size(); ++i) frame.channel_names.push_back(header[i]);
  frame.n_cols = static_cast<Index>(frame.channel_names.size());

  Index row = 0;
  bool any_missing = false;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != header.size())
      throw DataError(path + ": row " + std::to_string(row + 2) + " has " + std::to_string(cells.size()) +
                      " cells, expected " + std::to_string(header.size()));
    if (has_timestamp) frame.timestamps.push_back(cells[0]);
    for (std::size_t i = first_data_col; i < cells.size(); ++i) {
      double v;
      if (cells[i].empty()) {
        v = std::nan("");
        any_missing = true;
      } else if (!parse_double(cells[i], v)) {
        throw DataError(path + ": unparsable cell at row " + std::to_string(row + 2) + ", column " +
                        std::to_string(i + 1) + ": '" + cells[i] + "'");
      }
      frame.values.push_back(v);
    }
    ++row;
  }
  frame.n_rows = row;
  if (frame.n_rows < 2) throw DataError(path + ": need at least 2 data rows, got " + std::to_string(row));
  if (any_missing)
    for (Index c = 0; c < frame.n_cols; ++c) interpolate_channel(frame.values, frame.n_rows, frame.n_cols, c);
  frame.points_per_day = infer_points_per_day(frame.timestamps);
  return frame;
}

void write_csv(const SeriesFrame& frame, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  bool has_ts = !frame.timestamps.empty();
  if (has_ts) out << "date";
  for (std::size_t i = 0; i < frame.channel_names.size(); ++i)
    out << (has_ts || i ? "," : "") << frame.channel_names[i];
  out << '\n';
  out.precision(17);
  for (Index t = 0; t < frame.rows(); ++t) {
    if (has_ts) out << frame.timestamps[static_cast<std::size_t>(t)];
    for (Index c = 0; c < frame.cols(); ++c) out << (has_ts || c ? "," : "") << frame.at(t, c);
    out << '\n';
  }
  if (!out) throw DataError("write failed for " + path);
}

SplitFrames split(const SeriesFrame& frame, double r_train, double r_val, double r_test) {
  if (r_train <= 0 || r_val <= 0 || r_test <= 0)
    throw ConfigError("split: ratios must be positive");
  if (r_train + r_val + r_test > 1.0 + 1e-9)
    throw ConfigError("split: ratios sum to " + std::to_string(r_train + r_val + r_test) + " > 1");
  const Index T = frame.rows();
  // nudge before flooring: cumulative ratios like 0.7+0.1 land just below
  // their exact value in binary floating point
  auto boundary = [&](double cum) { return static_cast<Index>(std::floor(double(T) * cum + 1e-6)); };
  Index b1 = boundary(r_train);
  Index b2 = boundary(r_train + r_val);
  Index b3 = boundary(r_train + r_val + r_test);
  auto slice = [&](Index lo, Index hi) {
    SeriesFrame out;
    out.channel_names = frame.channel_names;
    out.n_cols = frame.cols();
    out.n_rows = hi - lo;
    out.points_per_day = frame.points_per_day;
    out.values.assign(frame.values.begin() + lo * frame.cols(), frame.values.begin() + hi * frame.cols());
    if (!frame.timestamps.empty())
      out.timestamps.assign(frame.timestamps.begin() + lo, frame.timestamps.begin() + hi);
    return out;
  };
  return SplitFrames{slice(0, b1), slice(b1, b2), slice(b2, b3)};
}

ChannelStats channel_stats(const SeriesFrame& frame) {
  ChannelStats stats;
  const Index T = frame.rows(), C = frame.cols();
  stats.mean.assign(static_cast<std::size_t>(C), 0.0);
  stats.std.assign(static_cast<std::size_t>(C), 0.0);
  for (Index c = 0; c < C; ++c) {
    double mean = 0;
    for (Index t = 0; t < T; ++t) mean += frame.at(t, c);
    mean /= double(T);
    double var = 0;
    for (Index t = 0; t < T; ++t) {
      double d = frame.at(t, c) - mean;
      var += d * d;
    }
    var /= double(T);
    stats.mean[static_cast<std::size_t>(c)] = mean;
    double sd = std::sqrt(var);
    stats.std[static_cast<std::size_t>(c)] = sd > 0 ? sd : 1.0;
  }
  return stats;
}

SeriesFrame standardize(const SeriesFrame& frame, const ChannelStats& stats) {
  if (static_cast<Index>(stats.mean.size()) != frame.cols())
    throw ConfigError("standardize: stats have " + std::to_string(stats.mean.size()) + " channels, frame has " +
                      std::to_string(frame.cols()));
  SeriesFrame out = frame;
  for (Index t = 0; t < frame.rows(); ++t)
    for (Index c = 0; c < frame.cols(); ++c)
      out.at(t, c) = (frame.at(t, c) - stats.mean[static_cast<std::size_t>(c)]) /
                     stats.std[static_cast<std::size_t>(c)];
  return out;
}

SeriesFrame make_regime_synthetic(std::uint64_t seed, Index total_rows, const RegimeSpec& spec) {
  if (total_rows < 512) throw ConfigError("make_regime_synthetic: need at least 512 rows");
  if (spec.block_len < 2) throw ConfigError("make_regime_synthetic: block length must be >= 2");
  SeriesFrame frame;
  frame.channel_names = {"value"};
  frame.n_cols = 1;
  frame.n_rows = total_rows;
  frame.values.resize(static_cast<std::size_t>(total_rows));
  frame.points_per_day = 24.0;  // nominal hourly cadence
  Rng rng(mix64(seed, 0x5e60));
  const double two_pi = 2.0 * M_PI;
  for (Index t = 0; t < total_rows; ++t) {
    bool burst = (t / spec.block_len) % 2 == 1;
    double amp = burst ? spec.burst_amp : spec.calm_amp;
    double period = burst ? spec.burst_period : spec.calm_period;
    double noise = burst ? spec.burst_noise : spec.calm_noise;
    frame.values[static_cast<std::size_t>(t)] =
        amp * std::sin(two_pi * double(t) / period) + noise * rng.normal();
  }
  // hourly timestamps so frequency-aware consumers see one day = 24 rows
  frame.timestamps.resize(static_cast<std::size_t>(total_rows));
  using namespace std::chrono;
  sys_days base = sys_days{year{2000} / 1 / 1};
  for (Index t = 0; t < total_rows; ++t) {
    auto tp = base + hours{t};
    auto dayp = floor<days>(tp);
    year_month_day ymd{dayp};
    int hh = static_cast<int>(duration_cast<hours>(tp - dayp).count());
    char buf[40];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u %02d:00:00", int(ymd.year()), unsigned(ymd.month()),
                  unsigned(ymd.day()), hh);
    frame.timestamps[static_cast<std::size_t>(t)] = buf;
  }
  return frame;
}

}  // namespace dpr
