// SPDX-License-Identifier: Apache-2.0
#include "dpr/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>

#include "dpr/checkpoint.hpp"
#include "dpr/diagnostics.hpp"
#include "dpr/train.hpp"

namespace dpr::cli {

namespace {

namespace fs = std::filesystem;

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> named_tensors(DprNetModel<S>& model) {
  auto tensors = model.parameters();
  tensors.emplace_back("scaler.mean", model.scaler_mean);
  tensors.emplace_back("scaler.std", model.scaler_std);
  return tensors;
}

template <typename S>
void save_model(const std::string& path, DprNetModel<S>& model, const RunConfig& rc) {
  save_checkpoint(path, rc.to_text(), named_tensors(model));
}

template <typename S>
DprNetModel<S> model_from_checkpoint(const CheckpointData& ck, const RunConfig& rc) {
  const auto* mean = ck.find("scaler.mean");
  if (!mean) throw DataError("checkpoint has no scaler.mean entry");
  int channels = static_cast<int>(mean->shape.at(0));
  auto model = DprNetModel<S>::init(rc.backbone(channels), rc.seed);
  auto fill = [&](const std::string& name, Tensor<S>& t) {
    const auto* entry = ck.find(name);
    if (!entry) throw DataError("checkpoint missing tensor '" + name + "'");
    if (entry->shape != t.shape())
      throw ConfigError("checkpoint tensor '" + name + "' has shape " + shape_str(entry->shape) +
                        ", model wants " + shape_str(t.shape()));
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(entry->values[static_cast<std::size_t>(i)]);
  };
  model.visit_params(fill);
  fill("scaler.mean", model.scaler_mean);
  fill("scaler.std", model.scaler_std);
  return model;
}

template <typename S>
ChannelStats stored_scaler(DprNetModel<S>& model) {
  ChannelStats stats;
  for (Index c = 0; c < model.scaler_mean.size(); ++c) {
    stats.mean.push_back(double(model.scaler_mean.data()[c]));
    stats.std.push_back(double(model.scaler_std.data()[c]));
  }
  return stats;
}

std::string format_metric(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename S>
void run_train_typed(const RunConfig& rc, const SeriesFrame& frame, const std::string& out_dir,
                     std::ostream& os) {
  auto splits = split(frame, rc.split_train, rc.split_val, rc.split_test);
  auto model = DprNetModel<S>::init(rc.backbone(static_cast<int>(frame.cols())), rc.seed);
  fs::create_directories(out_dir);

  std::ofstream epoch_log(out_dir + "/epochs.csv");
  if (!epoch_log) throw DataError("cannot write " + out_dir + "/epochs.csv");
  epoch_log << "epoch,train_loss,val_mse,orth_penalty\n";
  auto result = train(model, splits, rc.train_config(), &epoch_log);
  epoch_log.close();

  auto test_frame = standardize(splits.test, result.scaler);
  auto [test_mse, test_mae] = evaluate(result.best_model, test_frame);
  save_model(out_dir + "/model.dprc", result.best_model, rc);

  std::ofstream metrics(out_dir + "/metrics.txt");
  metrics << "best_epoch = " << result.best_epoch << "\n";
  metrics << "epochs_run = " << result.history.size() << "\n";
  metrics << "best_val_mse = " << format_metric(result.best_val_mse) << "\n";
  metrics << "test_mse = " << format_metric(test_mse) << "\n";
  metrics << "test_mae = " << format_metric(test_mae) << "\n";
  metrics << "param_count = " << result.best_model.param_count() << "\n";

  os << "trained " << result.history.size() << " epochs (best epoch " << result.best_epoch
     << ", val mse " << result.best_val_mse << ")\n";
  os << "test_mse = " << test_mse << "\ntest_mae = " << test_mae << "\n";
  os << "checkpoint: " << out_dir << "/model.dprc\n";
}

struct LoadedModel {
  RunConfig config;
  std::uint32_t precision = 8;
  // exactly one is populated, matching `precision`
  std::optional<DprNetModel<double>> f64;
  std::optional<DprNetModel<float>> f32;
};

LoadedModel load_model(const std::string& path) {
  auto ck = load_checkpoint(path);
  LoadedModel lm;
  lm.config = RunConfig::parse_text(ck.config_text, path + "#config");
  lm.precision = ck.precision;
  if (ck.precision == 4)
    lm.f32 = model_from_checkpoint<float>(ck, lm.config);
  else
    lm.f64 = model_from_checkpoint<double>(ck, lm.config);
  return lm;
}

template <typename S>
EvalOutput eval_typed(DprNetModel<S>& model, const RunConfig& rc, const SeriesFrame& frame,
                      const std::string& which) {
  if (frame.cols() != model.cfg.channels)
    throw ConfigError("data has " + std::to_string(frame.cols()) + " channels, checkpoint expects " +
                      std::to_string(model.cfg.channels));
  auto splits = split(frame, rc.split_train, rc.split_val, rc.split_test);
  const SeriesFrame* part = nullptr;
  if (which == "train") part = &splits.train;
  else if (which == "val") part = &splits.val;
  else if (which == "test") part = &splits.test;
  else
    throw ConfigError("unknown split '" + which + "' (expected train, val, test)");
  auto standardized = standardize(*part, stored_scaler(model));
  auto [mse, mae] = evaluate(model, standardized);
  return EvalOutput{mse, mae, which};
}

template <typename S>
void forecast_typed(DprNetModel<S>& model, const SeriesFrame& frame, const std::string& out_path,
                    std::ostream& os) {
  const Index T = model.cfg.lookback, C = model.cfg.channels, H = model.cfg.horizon;
  if (frame.cols() != C)
    throw ConfigError("data has " + std::to_string(frame.cols()) + " channels, checkpoint expects " +
                      std::to_string(C));
  if (frame.rows() < T)
    throw DataError("forecast input has " + std::to_string(frame.rows()) + " rows; need at least " +
                    std::to_string(T));
  auto stats = stored_scaler(model);
  Tensor<S> x(Shape{1, T, C});
  const Index base = frame.rows() - T;
  for (Index t = 0; t < T; ++t)
    for (Index c = 0; c < C; ++c)
      x.data()[t * C + c] = static_cast<S>((frame.at(base + t, c) - stats.mean[static_cast<std::size_t>(c)]) /
                                           stats.std[static_cast<std::size_t>(c)]);
  auto out = model_forward(x, model);
  SeriesFrame forecast;
  forecast.channel_names = frame.channel_names;
  forecast.n_cols = C;
  forecast.n_rows = H;
  forecast.values.resize(static_cast<std::size_t>(H * C));
  for (Index h = 0; h < H; ++h)
    for (Index c = 0; c < C; ++c)
      forecast.at(h, c) = double(out.forecast.data()[h * C + c]) * stats.std[static_cast<std::size_t>(c)] +
                          stats.mean[static_cast<std::size_t>(c)];
  if (out_path.empty()) {
    for (std::size_t i = 0; i < forecast.channel_names.size(); ++i)
      os << (i ? "," : "") << forecast.channel_names[i];
    os << '\n';
    os << std::setprecision(17);
    for (Index h = 0; h < H; ++h) {
      for (Index c = 0; c < C; ++c) os << (c ? "," : "") << forecast.at(h, c);
      os << '\n';
    }
  } else {
    write_csv(forecast, out_path);
    os << "forecast written to " << out_path << " (" << H << " rows x " << C << " channels)\n";
  }
}

}  // namespace

void run_train(const TrainArgs& args, std::ostream& os) {
  RunConfig rc = args.config_path.empty() ? RunConfig() : RunConfig::parse_file(args.config_path);
  if (!args.data_path.empty()) rc.data_path = args.data_path;
  if (args.seed) rc.seed = *args.seed;
  for (const auto& a : args.ablations) rc.apply_ablation(a);
  if (rc.data_path.empty()) throw ConfigError("train: no data file (set --data or the config's data key)");
  if (args.out_dir.empty()) throw ConfigError("train: no output directory (set --out)");
  auto frame = load_csv(rc.data_path);
  if (rc.precision == "single")
    run_train_typed<float>(rc, frame, args.out_dir, os);
  else
    run_train_typed<double>(rc, frame, args.out_dir, os);
}

EvalOutput run_eval(const std::string& checkpoint_path, const std::string& data_path,
                    const std::string& split_name, std::ostream& os) {
  auto lm = load_model(checkpoint_path);
  auto frame = load_csv(data_path);
  EvalOutput out = lm.f64 ? eval_typed(*lm.f64, lm.config, frame, split_name)
                          : eval_typed(*lm.f32, lm.config, frame, split_name);
  os << "split = " << out.split << "\n";
  os << "mse = " << format_metric(out.mse) << "\n";
  os << "mae = " << format_metric(out.mae) << "\n";
  return out;
}

void run_forecast(const std::string& checkpoint_path, const std::string& data_path,
                  const std::string& out_path, std::ostream& os) {
  auto lm = load_model(checkpoint_path);
  auto frame = load_csv(data_path);
  if (lm.f64)
    forecast_typed(*lm.f64, frame, out_path, os);
  else
    forecast_typed(*lm.f32, frame, out_path, os);
}

void run_diagnose(const std::vector<std::string>& data_paths, const std::string& out_csv,
                  std::ostream& os) {
  if (data_paths.empty()) throw ConfigError("diagnose: need at least one dataset");
  std::vector<DiagnosticsReport> reports;
  for (const auto& path : data_paths) {
    auto frame = load_csv(path);
    reports.push_back(profile_frame(frame, fs::path(path).stem().string()));
  }
  std::vector<ScoredDataset> scored;
  if (reports.size() >= 2) scored = composite_score(reports);

  os << std::left << std::setw(20) << "dataset" << std::right << std::setw(10) << "adf_p"
     << std::setw(10) << "H_s" << std::setw(10) << "VoV";
  if (!scored.empty()) os << std::setw(9) << "rank_Hs" << std::setw(10) << "rank_VoV" << std::setw(7) << "score";
  os << "\n";
  int total_undefined = 0;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    os << std::left << std::setw(20) << r.name << std::right << std::fixed << std::setprecision(4)
       << std::setw(10) << r.adf_p << std::setw(10) << r.entropy << std::setw(10) << r.vov;
    if (!scored.empty())
      os << std::setw(9) << scored[i].rank_entropy << std::setw(10) << scored[i].rank_vov << std::setw(7)
         << scored[i].score;
    os << "\n";
    os.unsetf(std::ios::fixed);
    total_undefined += r.undefined_channels;
  }
  if (total_undefined > 0)
    os << "note: " << total_undefined
       << " channel(s) had undefined diagnostics (constant) and were excluded from averages\n";

  if (!out_csv.empty()) {
    std::ofstream out(out_csv);
    if (!out) throw DataError("cannot write " + out_csv);
    out << "dataset,adf_p,spectral_entropy,vov,rank_entropy,rank_vov,score,undefined_channels\n";
    out << std::setprecision(17);
    for (std::size_t i = 0; i < reports.size(); ++i) {
      const auto& r = reports[i];
      out << r.name << ',' << r.adf_p << ',' << r.entropy << ',' << r.vov << ',';
      if (!scored.empty())
        out << scored[i].rank_entropy << ',' << scored[i].rank_vov << ',' << scored[i].score;
      else
        out << ",,";
      out << ',' << r.undefined_channels << "\n";
    }
  }
}

void run_synth(const SynthArgs& args, std::ostream& os) {
  if (args.out_path.empty()) throw ConfigError("synth: no output path (set --out)");
  RegimeSpec spec;
  if (args.block_len > 0) spec.block_len = args.block_len;
  auto frame = make_regime_synthetic(args.seed, args.length, spec);
  write_csv(frame, args.out_path);
  os << "wrote " << frame.rows() << " rows to " << args.out_path << " (block length "
     << spec.block_len << ")\n";
}

// ---------------------------------------------------------------------------
// gradcheck battery
// ---------------------------------------------------------------------------

namespace {

struct FdReport {
  // worst |analytic - fd| / (rtol*|fd| + atol); pass when <= 1
  double max_violation = 0.0;
  std::string worst;
};

FdReport fd_check(const std::function<Tensor<double>()>& forward,
                  std::vector<std::pair<std::string, Tensor<double>>> params, double h = 1e-5,
                  double rtol = 1e-5, double atol = 1e-7) {
  for (auto& [name, p] : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(forward());
  }
  FdReport rep;
  for (auto& [name, p] : params) {
    auto& vals = p.values();
    const auto& grad = p.grad();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double orig = vals[i];
      vals[i] = orig + h;
      double fp = forward().item();
      vals[i] = orig - h;
      double fm = forward().item();
      vals[i] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double violation = std::abs(grad[i] - fd) / (rtol * std::abs(fd) + atol);
      if (violation > rep.max_violation) {
        rep.max_violation = violation;
        rep.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

bool report(std::ostream& os, const std::string& name, bool ok, const std::string& detail = "") {
  os << (ok ? "[PASS] " : "[FAIL] ") << name;
  if (!ok && !detail.empty()) os << " (" << detail << ")";
  os << "\n";
  return ok;
}

}  // namespace

bool run_gradcheck(std::uint64_t seed, bool inject_gamma_fault, std::ostream& os) {
  bool all = true;
  Rng rng(mix64(seed, 0x6c));

  {  // finite differences through the core operator set
    auto x = random_tensor({2, 3, 4}, rng);
    auto w = random_tensor({4, 4}, rng);
    auto g = random_tensor({4}, rng, 0.5, 1.5);
    auto b = random_tensor({4}, rng);
    auto target = random_tensor({2, 3, 8}, rng);
    auto forward = [&]() {
      auto h = gelu(layer_norm(matmul(x, w), g, b));
      auto sm = softmax_lastdim(h);
      auto nm = l2_normalize_lastdim(add(h, sm));
      return mse_loss(concat_lastdim<double>({nm, h}), target);
    };
    auto rep = fd_check(forward, {{"x", x}, {"w", w}, {"gain", g}, {"bias", b}});
    all &= report(os, "op-gradients-vs-fd", rep.max_violation <= 1.0,
                  "violation " + std::to_string(rep.max_violation) + " at " + rep.worst);
  }

  DprConfig acfg;
  acfg.hidden_dim = 8;
  acfg.patterns = 3;
  {  // adapter gradients
    auto params = DprParams<double>::init(acfg, seed, "a.");
    params.gain.values()[0] = 0.45;
    auto h = random_tensor({2, 5, 8}, rng);
    auto target = random_tensor({2, 5, 8}, rng);
    auto forward = [&]() {
      auto out = dpr_forward(h, params, acfg);
      return add(mse_loss(out.hidden, target), scale(out.penalty, 0.1));
    };
    std::vector<std::pair<std::string, Tensor<double>>> named;
    params.visit("", [&](const std::string& n, Tensor<double>& t) { named.emplace_back(n, t); });
    auto rep = fd_check(forward, named);
    all &= report(os, "adapter-gradients-vs-fd", rep.max_violation <= 1.0,
                  "violation " + std::to_string(rep.max_violation) + " at " + rep.worst);
  }

  BackboneConfig micro;
  micro.lookback = 16;
  micro.horizon = 8;
  micro.channels = 2;
  micro.patch_len = 4;
  micro.patch_stride = 2;
  micro.hidden_dim = 8;
  micro.n_blocks = 1;
  micro.dropout = 0.0;
  micro.adapter.patterns = 3;
  {  // end-to-end model gradients
    auto model = DprNetModel<double>::init(micro, seed);
    for (auto& blk : model.blocks) blk.adapter.gain.values()[0] = 0.4;
    auto x = random_tensor({2, 16, 2}, rng);
    auto target = random_tensor({2, 8, 2}, rng);
    auto forward = [&]() {
      auto out = model_forward(x, model);
      return add(mse_loss(out.forecast, target), scale(out.penalty, 0.05));
    };
    auto rep = fd_check(forward, model.parameters());
    all &= report(os, "model-gradients-vs-fd", rep.max_violation <= 1.0,
                  "violation " + std::to_string(rep.max_violation) + " at " + rep.worst);
  }

  {  // routing weights on the simplex; hard mode exactly one-hot
    auto params = DprParams<double>::init(acfg, mix64(seed, 2), "a.");
    bool ok = true;
    double worst = 0;
    for (int rep = 0; rep < 100 && ok; ++rep) {
      auto h = random_tensor({2, 5, 8}, rng, -3, 3);
      auto routing = route(perceive(h, params, acfg), params, acfg);
      for (Index r = 0; r < 10; ++r) {
        double sum = 0;
        for (Index k = 0; k < 3; ++k) {
          double v = routing.weights.values()[static_cast<std::size_t>(r * 3 + k)];
          if (v < 0) ok = false;
          sum += v;
        }
        worst = std::max(worst, std::abs(sum - 1.0));
      }
    }
    all &= report(os, "routing-simplex", ok && worst < 1e-9, "max |sum-1| " + std::to_string(worst));

    DprConfig hard = acfg;
    hard.routing = RoutingMode::kHard;
    auto h = random_tensor({2, 5, 8}, rng);
    auto weights = route(perceive(h, params, hard), params, hard).weights;
    bool onehot = true;
    for (Index r = 0; r < 10; ++r) {
      int ones = 0;
      for (Index k = 0; k < 3; ++k) {
        double v = weights.values()[static_cast<std::size_t>(r * 3 + k)];
        if (v == 1.0) ++ones;
        else if (v != 0.0) onehot = false;
      }
      if (ones != 1) onehot = false;
    }
    all &= report(os, "hard-routing-onehot", onehot);
  }

  {  // orthogonal penalty oracles
    Tensor<double> ortho(Shape{2, 3}, {1, 0, 0, 0, 1, 0});
    Tensor<double> dup(Shape{2, 3}, {1, 0, 0, 1, 0, 0});
    Tensor<double> one(Shape{1, 4}, {0.3, -2, 0.7, 1.1});
    bool ok = std::abs(orth_penalty(ortho).item()) < 1e-12 &&
              std::abs(orth_penalty(dup).item() - 1.0) < 1e-12 &&
              std::abs(orth_penalty(one).item()) < 1e-12;
    all &= report(os, "orthogonality-oracle", ok);
  }

  {  // modulation Lipschitz bound
    bool ok = true;
    for (int draw = 0; draw < 1000 && ok; ++draw) {
      DprConfig c;
      c.hidden_dim = 6;
      c.patterns = 3;
      auto params = DprParams<double>::init(c, mix64(seed, 100 + draw), "a.");
      params.gain.values()[0] = rng.uniform(-2, 2);
      auto h = random_tensor({1, 2, 6}, rng, -2, 2);
      auto out = dpr_forward(h, params, c).hidden;
      double max_inf = 0;
      for (double v : params.basis.values()) max_inf = std::max(max_inf, std::abs(v));
      double factor = 1.0 + std::abs(params.gain.item()) * max_inf;
      for (Index l = 0; l < 2; ++l) {
        double nh = 0, no = 0;
        for (Index j = 0; j < 6; ++j) {
          nh += h.values()[static_cast<std::size_t>(l * 6 + j)] * h.values()[static_cast<std::size_t>(l * 6 + j)];
          no += out.values()[static_cast<std::size_t>(l * 6 + j)] * out.values()[static_cast<std::size_t>(l * 6 + j)];
        }
        if (std::sqrt(no) > factor * std::sqrt(nh) + 1e-9) ok = false;
      }
    }
    all &= report(os, "lipschitz-bound", ok);
  }

  {  // identity at initialization vs the adapter-deleted model
    auto model = DprNetModel<double>::init(micro, mix64(seed, 7));
    if (inject_gamma_fault)
      for (auto& blk : model.blocks) blk.adapter.gain.values()[0] = 0.5;
    BackboneConfig ab = micro;
    ab.use_adapter = false;
    auto deleted = DprNetModel<double>::init(ab, mix64(seed, 7));
    bool ok = true;
    for (int trial = 0; trial < 10 && ok; ++trial) {
      auto x = random_tensor({2, 16, 2}, rng, -4, 4);
      auto a = model_forward(x, model).forecast;
      auto d = model_forward(x, deleted).forecast;
      ok = a.values() == d.values();
    }
    all &= report(os, "identity-at-init", ok);
  }

  {  // RevIN round trip, including near-constant windows
    auto gain = Tensor<double>(Shape{2}, 1.0);
    auto bias = Tensor<double>(Shape{2}, 0.0);
    bool ok = true;
    for (int trial = 0; trial < 1000 && ok; ++trial) {
      Tensor<double> x(Shape{1, 8, 2});
      if (trial % 4 == 0) {
        double base = rng.uniform(-5, 5);
        for (auto& v : x.values()) v = base + rng.uniform(-1e-9, 1e-9);
      } else {
        for (auto& v : x.values()) v = rng.uniform(-10, 10);
      }
      auto [norm, state] = revin_normalize(x, gain, bias);
      auto back = revin_denormalize(norm, state, gain, bias);
      for (std::size_t i = 0; i < x.values().size(); ++i)
        if (std::abs(back.values()[i] - x.values()[i]) >= 1e-6) ok = false;
    }
    all &= report(os, "revin-roundtrip", ok);
  }

  os << (all ? "all invariants passed" : "INVARIANT FAILURE") << "\n";
  return all;
}

}  // namespace dpr::cli
