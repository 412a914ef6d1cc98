// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "dpr/train.hpp"
#include "testutil.hpp"

using dpr::BackboneConfig;
using dpr::DprNetModel;
using dpr::SeriesFrame;
using dpr::Shape;
using dpr::Tensor;
using dpr::TrainConfig;

namespace {

SeriesFrame sine_frame(dpr::Index rows, double noise, std::uint64_t seed) {
  SeriesFrame f;
  f.channel_names = {"v"};
  f.n_cols = 1;
  f.n_rows = rows;
  dpr::Rng rng(seed);
  for (dpr::Index t = 0; t < rows; ++t)
    f.values.push_back(std::sin(2.0 * M_PI * double(t) / 24.0) + noise * rng.normal());
  return f;
}

BackboneConfig tiny_backbone() {
  BackboneConfig cfg;
  cfg.lookback = 16;
  cfg.horizon = 4;
  cfg.channels = 1;
  cfg.patch_len = 4;
  cfg.patch_stride = 2;
  cfg.hidden_dim = 8;
  cfg.n_blocks = 1;
  cfg.dropout = 0.0;
  cfg.adapter.patterns = 3;
  return cfg;
}

DprNetModel<double> zeroed_model(BackboneConfig cfg) {
  auto model = DprNetModel<double>::init(cfg, 1);
  for (auto* t : {&model.embed_w, &model.embed_b, &model.head_w, &model.head_b})
    std::fill(t->values().begin(), t->values().end(), 0.0);
  for (auto& blk : model.blocks)
    for (auto* t : {&blk.mlp.w1, &blk.mlp.b1, &blk.mlp.w2, &blk.mlp.b2})
      std::fill(t->values().begin(), t->values().end(), 0.0);
  return model;
}

}  // namespace

TEST_CASE("total_loss oracles") {
  Tensor<double> p(Shape{2, 2}, {1, 2, 3, 4});
  auto zero_pen = Tensor<double>::scalar(0.0);
  CHECK(dpr::total_loss(p, p, zero_pen, 1e-4).item() == 0.0);

  Tensor<double> q(Shape{2, 2}, {2, 3, 4, 5});
  CHECK(dpr::total_loss(q, p, zero_pen, 1e-4).item() == doctest::Approx(1.0).epsilon(1e-15));

  // L_pred = 0.5, penalty = 1, lambda = 1e-4 -> 0.5001
  Tensor<double> a(Shape{2}, {0, 0});
  Tensor<double> b(Shape{2}, {1, 0});
  auto pen = Tensor<double>::scalar(1.0);
  CHECK(dpr::total_loss(a, b, pen, 1e-4).item() == doctest::Approx(0.5001).epsilon(1e-12));
}

TEST_CASE("total_loss decomposition: subtracting the penalty term recovers the MSE") {
  dpr::Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = testutil::random_tensor({3, 4}, rng);
    auto t = testutil::random_tensor({3, 4}, rng);
    auto pen = Tensor<double>::scalar(rng.uniform(0, 5));
    double lambda = rng.uniform(0, 0.1);
    double total = dpr::total_loss(p, t, pen, lambda).item();
    double mse = dpr::mse_loss(p, t).item();
    CHECK(std::abs((total - lambda * pen.item()) - mse) < 1e-12);
  }
}

TEST_CASE("adam_step: zero gradient leaves parameters unchanged") {
  Tensor<double> theta(Shape{3}, {1, -2, 0.5});
  theta.set_requires_grad(true);
  theta.grad();  // allocate zeros
  std::vector<std::pair<std::string, Tensor<double>>> params{{"theta", theta}};
  auto st = dpr::AdamState<double>::init(params);
  dpr::adam_step(params, st, 0.1);
  CHECK(theta.values() == std::vector<double>{1, -2, 0.5});
}

TEST_CASE("adam_step: first step moves by about lr (bias corrections cancel)") {
  Tensor<double> theta(Shape{1}, {1.0});
  theta.set_requires_grad(true);
  theta.grad()[0] = 2.0;  // d(theta^2)/dtheta at theta=1
  std::vector<std::pair<std::string, Tensor<double>>> params{{"theta", theta}};
  auto st = dpr::AdamState<double>::init(params);
  dpr::adam_step(params, st, 0.1);
  CHECK(theta.values()[0] == doctest::Approx(0.9).epsilon(1e-7));
}

TEST_CASE("adam_step: constant gradient approaches a steady step of lr") {
  Tensor<double> theta(Shape{1}, {10.0});
  theta.set_requires_grad(true);
  std::vector<std::pair<std::string, Tensor<double>>> params{{"theta", theta}};
  auto st = dpr::AdamState<double>::init(params);
  double prev = theta.values()[0];
  double last_step = 0;
  for (int i = 0; i < 200; ++i) {
    theta.zero_grad();
    theta.grad()[0] = 3.0;
    dpr::adam_step(params, st, 0.05);
    double cur = theta.values()[0];
    CHECK(cur < prev);  // monotone under a constant positive gradient
    last_step = prev - cur;
    prev = cur;
  }
  CHECK(last_step == doctest::Approx(0.05).epsilon(1e-6));
}

TEST_CASE("adam_step: NaN gradient aborts naming the parameter") {
  Tensor<double> theta(Shape{1}, {1.0});
  theta.set_requires_grad(true);
  theta.grad()[0] = std::nan("");
  std::vector<std::pair<std::string, Tensor<double>>> params{{"theta.weird", theta}};
  auto st = dpr::AdamState<double>::init(params);
  try {
    dpr::adam_step(params, st, 0.1);
    FAIL("expected NumericError");
  } catch (const dpr::NumericError& e) {
    CHECK(std::string(e.what()).find("theta.weird") != std::string::npos);
  }
}

TEST_CASE("early stopper follows the spec trace") {
  // val losses 3.0, 2.0, 2.1, 2.2, ... with patience 2: stop after epoch 4,
  // keep the epoch-2 model
  dpr::EarlyStopper stop{2};
  CHECK(stop.update(3.0, 1));
  CHECK_FALSE(stop.should_stop());
  CHECK(stop.update(2.0, 2));
  CHECK_FALSE(stop.should_stop());
  CHECK_FALSE(stop.update(2.1, 3));
  CHECK_FALSE(stop.should_stop());
  CHECK_FALSE(stop.update(2.2, 4));
  CHECK(stop.should_stop());
  CHECK(stop.best_epoch == 2);
  CHECK(stop.best == 2.0);
}

TEST_CASE("window sampler counts and boundaries") {
  dpr::WindowSampler sampler{16, 4};
  SeriesFrame f = sine_frame(100, 0.0, 1);
  CHECK(sampler.count(f) == 81);
  SeriesFrame tiny = sine_frame(19, 0.0, 1);
  CHECK(sampler.count(tiny) == 0);

  std::vector<dpr::Index> starts{0, 80};
  Tensor<double> x, y;
  sampler.fill(f, starts, x, y);
  CHECK(x.shape() == Shape{2, 16, 1});
  CHECK(y.shape() == Shape{2, 4, 1});
  CHECK(x.values()[0] == f.at(0, 0));
  CHECK(y.values()[4] == f.at(96, 0));  // second window target starts at row 96
}

TEST_CASE("evaluate: metric oracles through a mean-predicting model") {
  BackboneConfig cfg = tiny_backbone();
  cfg.lookback = 2;
  cfg.horizon = 1;
  cfg.patch_len = 2;
  cfg.patch_stride = 1;
  auto model = zeroed_model(cfg);

  // constant series: the window-mean prediction is perfect
  SeriesFrame constf;
  constf.channel_names = {"v"};
  constf.n_cols = 1;
  constf.n_rows = 10;
  constf.values.assign(10, 3.0);
  auto [mse0, mae0] = dpr::evaluate(model, constf);
  CHECK(mse0 == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(mae0 == doctest::Approx(0.0).epsilon(1e-12));

  // alternating 0,2: every residual has magnitude 1 -> mse = mae = 1
  SeriesFrame alt = constf;
  for (dpr::Index t = 0; t < 10; ++t) alt.values[(std::size_t)t] = (t % 2 == 0) ? 0.0 : 2.0;
  auto [mse1, mae1] = dpr::evaluate(model, alt);
  CHECK(mse1 == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(mae1 == doctest::Approx(1.0).epsilon(1e-9));

  // residuals {0, 2}: mse = 2, mae = 1
  SeriesFrame mixed = constf;
  mixed.n_rows = 4;
  mixed.values = {2, 2, 2, 4};
  auto [mse2, mae2] = dpr::evaluate(model, mixed);
  CHECK(mse2 == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(mae2 == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("train: runs all epochs when patience exceeds them, stops early otherwise") {
  auto frame = sine_frame(240, 0.05, 5);
  auto splits = dpr::split(frame, 0.7, 0.15, 0.15);
  BackboneConfig cfg = tiny_backbone();
  TrainConfig tc;
  tc.max_epochs = 3;
  tc.patience = 10;
  tc.batch_size = 16;
  tc.seed = 7;
  auto model = DprNetModel<double>::init(cfg, tc.seed);
  auto result = dpr::train(model, splits, tc);
  CHECK(result.history.size() == 3);
  CHECK(result.best_epoch >= 1);

  // best val mse is never worse than any epoch's val mse
  double best = 1e300;
  for (auto& row : result.history) best = std::min(best, row.val_mse);
  CHECK(result.best_val_mse == doctest::Approx(best).epsilon(1e-15));
}

TEST_CASE("train: seeded determinism gives bit-identical histories") {
  auto frame = sine_frame(200, 0.1, 9);
  auto splits = dpr::split(frame, 0.7, 0.15, 0.15);
  BackboneConfig cfg = tiny_backbone();
  TrainConfig tc;
  tc.max_epochs = 3;
  tc.batch_size = 16;
  tc.seed = 21;

  auto run = [&]() {
    auto model = DprNetModel<double>::init(cfg, tc.seed);
    std::ostringstream log;
    auto result = dpr::train(model, splits, tc, &log);
    return std::make_pair(log.str(), result.best_val_mse);
  };
  auto [log1, best1] = run();
  auto [log2, best2] = run();
  CHECK(log1 == log2);
  CHECK(best1 == best2);
  CHECK(log1.find(',') != std::string::npos);
}

TEST_CASE("train: empty split is a config error") {
  auto frame = sine_frame(60, 0.0, 3);
  auto splits = dpr::split(frame, 0.7, 0.15, 0.15);  // val split has 9 rows < 20
  BackboneConfig cfg = tiny_backbone();
  auto model = DprNetModel<double>::init(cfg, 1);
  TrainConfig tc;
  tc.max_epochs = 1;
  CHECK_THROWS_AS(dpr::train(model, splits, tc), dpr::ConfigError);
}

TEST_CASE("train: sharded workers agree with the single-thread path") {
  auto frame = sine_frame(200, 0.1, 15);
  auto splits = dpr::split(frame, 0.7, 0.15, 0.15);
  BackboneConfig cfg = tiny_backbone();  // dropout 0: sharding must not change the math
  TrainConfig tc;
  tc.max_epochs = 2;
  tc.batch_size = 16;
  tc.seed = 33;

  auto run = [&]() {
    auto model = DprNetModel<double>::init(cfg, tc.seed);
    return dpr::train(model, splits, tc).history;
  };
  unsetenv("DPR_THREADS");
  auto solo = run();
  setenv("DPR_THREADS", "3", 1);
  auto sharded1 = run();
  auto sharded2 = run();
  unsetenv("DPR_THREADS");

  REQUIRE(solo.size() == sharded1.size());
  for (std::size_t i = 0; i < solo.size(); ++i) {
    // shard merge changes only summation order
    CHECK(sharded1[i].train_loss == doctest::Approx(solo[i].train_loss).epsilon(1e-9));
    CHECK(sharded1[i].val_mse == doctest::Approx(solo[i].val_mse).epsilon(1e-9));
    // a fixed worker count is bit-reproducible
    CHECK(sharded1[i].train_loss == sharded2[i].train_loss);
    CHECK(sharded1[i].val_mse == sharded2[i].val_mse);
  }
}

TEST_CASE("train: orth penalty decreases from a near-duplicated basis") {
  auto frame = sine_frame(300, 0.05, 11);
  auto splits = dpr::split(frame, 0.7, 0.15, 0.15);
  BackboneConfig cfg = tiny_backbone();
  TrainConfig tc;
  tc.max_epochs = 5;
  tc.patience = 10;
  tc.batch_size = 16;
  tc.seed = 13;
  tc.lambda_orth = 0.01;
  auto model = DprNetModel<double>::init(cfg, tc.seed);
  // near-duplicated modulation basis (exact duplication is a fixed point)
  dpr::Rng rng(14);
  auto& basis = model.blocks[0].adapter.basis;
  for (int k = 1; k < 3; ++k)
    for (int j = 0; j < 8; ++j)
      basis.values()[(std::size_t)(k * 8 + j)] = basis.values()[(std::size_t)j] + rng.uniform(-1e-2, 1e-2);

  auto result = dpr::train(model, splits, tc);
  REQUIRE(result.history.size() == 5);
  CHECK(result.history.front().orth_penalty > 0.5);
  for (std::size_t i = 1; i < result.history.size(); ++i)
    CHECK(result.history[i].orth_penalty <= result.history[i - 1].orth_penalty + 1e-9);
}
