// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dpr/ops.hpp"
#include "testutil.hpp"

using dpr::Shape;
using dpr::Tape;
using dpr::TapeScope;
using dpr::Tensor;
using testutil::random_tensor;

namespace {

Tensor<double> t2x2_identity() { return dpr::identity_matrix<double>(2); }

}  // namespace

TEST_CASE("matmul: identity and hand-contraction oracles") {
  // I2 * [[3],[4]] = [[3],[4]]
  Tensor<double> v(Shape{2, 1}, {3, 4});
  auto r = dpr::matmul(t2x2_identity(), v);
  CHECK(r.shape() == Shape{2, 1});
  CHECK(r.values()[0] == doctest::Approx(3).epsilon(1e-15));
  CHECK(r.values()[1] == doctest::Approx(4).epsilon(1e-15));

  // [[1,2]] * [[3],[4]] = [[11]] (hand contraction: 1*3 + 2*4)
  Tensor<double> a(Shape{1, 2}, {1, 2});
  auto s = dpr::matmul(a, v);
  CHECK(s.size() == 1);
  CHECK(s.item() == doctest::Approx(11).epsilon(1e-15));

  // inner extent mismatch reports both shapes
  Tensor<double> b(Shape{1, 2}, {3, 4});
  CHECK_THROWS_AS(dpr::matmul(a, b), dpr::DimensionError);
  try {
    dpr::matmul(a, b);
  } catch (const dpr::DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[1,2]") != std::string::npos);
  }
}

TEST_CASE("matmul: batched broadcast") {
  dpr::Rng rng(7);
  auto a = random_tensor({2, 1, 3, 4}, rng);
  auto b = random_tensor({5, 4, 2}, rng);
  auto c = dpr::matmul(a, b);
  CHECK(c.shape() == Shape{2, 5, 3, 2});
  // spot check one batch element against a flat loop
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double acc = 0;
      for (int k = 0; k < 4; ++k)
        acc += a.values()[(std::size_t)((1 * 3 + i) * 4 + k)] *
               b.values()[(std::size_t)((3 * 4 + k) * 2 + j)];
      // batch index (1, 3): a broadcasts over axis 1, b over axis 0
      double got = c.values()[(std::size_t)(((1 * 5 + 3) * 3 + i) * 2 + j)];
      CHECK(got == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("depthwise_conv1d: identity kernel, hand oracle, parity rule") {
  dpr::Rng rng(3);
  auto x = random_tensor({2, 3, 5}, rng);
  Tensor<double> ident(Shape{3, 3}, {0, 1, 0, 0, 1, 0, 0, 1, 0});
  auto y = dpr::depthwise_conv1d(x, ident);
  for (std::size_t i = 0; i < x.values().size(); ++i) CHECK(y.values()[i] == x.values()[i]);

  // kernel [1,1,1] on constant-1 input of length 4: zero padding -> [2,3,3,2]
  Tensor<double> ones(Shape{1, 1, 4}, {1, 1, 1, 1});
  Tensor<double> k3(Shape{1, 3}, {1, 1, 1});
  auto z = dpr::depthwise_conv1d(ones, k3);
  CHECK(z.values() == std::vector<double>{2, 3, 3, 2});

  Tensor<double> k4(Shape{1, 4}, {1, 1, 1, 1});
  CHECK_THROWS_AS(dpr::depthwise_conv1d(ones, k4), dpr::ConfigError);
}

TEST_CASE("depthwise_conv1d: kernel wider than sequence and channel isolation") {
  dpr::Rng rng(11);
  // k > L is allowed: contributions come from padding only
  auto x = random_tensor({1, 1, 2}, rng);
  Tensor<double> k5(Shape{1, 5}, {1, 1, 1, 1, 1});
  auto y = dpr::depthwise_conv1d(x, k5);
  CHECK(y.values()[0] == doctest::Approx(x.values()[0] + x.values()[1]));

  // perturbing channel c changes only channel c of the output
  auto h = random_tensor({2, 4, 6}, rng);
  auto k = random_tensor({4, 3}, rng);
  auto base = dpr::depthwise_conv1d(h, k);
  auto h2 = h.clone();
  for (int l = 0; l < 6; ++l) h2.values()[(std::size_t)(1 * 6 + l)] += 0.5;  // batch 0, channel 1
  auto out2 = dpr::depthwise_conv1d(h2, k);
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 4; ++c)
      for (int l = 0; l < 6; ++l) {
        std::size_t i = (std::size_t)((b * 4 + c) * 6 + l);
        if (b == 0 && c == 1)
          continue;
        CHECK(out2.values()[i] == base.values()[i]);
      }
}

TEST_CASE("softmax_lastdim: closed-form oracles and stability") {
  Tensor<double> sym(Shape{2}, {0, 0});
  auto y = dpr::softmax_lastdim(sym);
  CHECK(y.values()[0] == doctest::Approx(0.5).epsilon(1e-15));

  // softmax(ln 2, 0) = (2/3, 1/3)
  Tensor<double> x(Shape{2}, {std::log(2.0), 0.0});
  auto z = dpr::softmax_lastdim(x);
  CHECK(z.values()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(z.values()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  Tensor<double> big(Shape{2}, {1000.0, 0.0});
  auto w = dpr::softmax_lastdim(big);
  CHECK(std::isfinite(w.values()[0]));
  CHECK(w.values()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w.values()[1] == doctest::Approx(0.0).epsilon(1e-12));

  Tensor<double> bad(Shape{2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(dpr::softmax_lastdim(bad), dpr::NumericError);
}

TEST_CASE("softmax rows stay on the simplex for 1000 random rows") {
  dpr::Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    double mag = (trial % 3 == 0) ? 1e3 : 1.0;
    auto x = random_tensor({4}, rng, -mag, mag);
    auto y = dpr::softmax_lastdim(x);
    double sum = 0;
    for (double v : y.values()) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("layer_norm oracles") {
  Tensor<double> gain(Shape{3}, {1, 1, 1});
  Tensor<double> bias(Shape{3}, {0, 0, 0});
  Tensor<double> flat(Shape{3}, {5, 5, 5});
  auto y = dpr::layer_norm(flat, gain, bias);
  for (double v : y.values()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

  Tensor<double> g2(Shape{2}, {1, 1});
  Tensor<double> b2(Shape{2}, {0, 0});
  Tensor<double> x(Shape{2}, {1, 3});
  auto z = dpr::layer_norm(x, g2, b2);
  CHECK(z.values()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(z.values()[1] == doctest::Approx(1.0).epsilon(1e-4));

  Tensor<double> g0(Shape{2}, {0, 0});
  Tensor<double> b7(Shape{2}, {7, 7});
  auto w = dpr::layer_norm(x, g0, b7);
  CHECK(w.values()[0] == doctest::Approx(7.0).epsilon(1e-15));
  CHECK(w.values()[1] == doctest::Approx(7.0).epsilon(1e-15));
}

TEST_CASE("gelu oracles") {
  Tensor<double> x(Shape{3}, {0.0, 10.0, 1.0});
  auto y = dpr::gelu(x);
  CHECK(y.values()[0] == 0.0);
  CHECK(std::abs(y.values()[1] - 10.0) < 1e-9);
  // 1 * Phi(1) via erf
  double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
  CHECK(y.values()[2] == doctest::Approx(phi1).epsilon(1e-12));
  CHECK(y.values()[2] == doctest::Approx(0.8413447).epsilon(1e-6));
}

TEST_CASE("l2_normalize_lastdim oracles") {
  Tensor<double> x(Shape{2}, {3, 4});
  auto y = dpr::l2_normalize_lastdim(x);
  CHECK(y.values()[0] == doctest::Approx(0.6).epsilon(1e-14));
  CHECK(y.values()[1] == doctest::Approx(0.8).epsilon(1e-14));

  Tensor<double> zero(Shape{2}, {0, 0});
  auto z = dpr::l2_normalize_lastdim(zero);
  CHECK(z.values()[0] == 0.0);
  CHECK(z.values()[1] == 0.0);

  Tensor<double> unit(Shape{2}, {1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0)});
  auto u = dpr::l2_normalize_lastdim(unit);
  CHECK(std::abs(u.values()[0] - unit.values()[0]) < 1e-12);
}

TEST_CASE("patchify window arithmetic") {
  dpr::Rng rng(5);
  auto x = random_tensor({1, 96}, rng);
  auto p = dpr::patchify(x, 16, 8);
  CHECK(p.shape() == Shape{1, 11, 16});

  auto x2 = random_tensor({1, 16}, rng);
  auto p2 = dpr::patchify(x2, 16, 8);
  CHECK(p2.shape() == Shape{1, 1, 16});
  for (int i = 0; i < 16; ++i) CHECK(p2.values()[(std::size_t)i] == x2.values()[(std::size_t)i]);

  // T = P+1: one stride hangs over, tail is replicate-padded
  auto x3 = random_tensor({1, 17}, rng);
  auto p3 = dpr::patchify(x3, 16, 8);
  CHECK(p3.shape() == Shape{1, 2, 16});
  for (int i = 0; i < 16; ++i) {
    int src = std::min(8 + i, 16);
    CHECK(p3.values()[(std::size_t)(16 + i)] == x3.values()[(std::size_t)src]);
  }

  CHECK_THROWS_AS(dpr::patchify(random_tensor({1, 8}, rng), 16, 8), dpr::ConfigError);
}

TEST_CASE("backward: sum and elementwise-square oracles") {
  Tensor<double> x(Shape{3}, {1, 2, 3});
  x.set_requires_grad(true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = dpr::sum_all(x);
    tape.backward(loss);
  }
  CHECK(x.grad() == std::vector<double>{1, 1, 1});

  Tensor<double> y(Shape{2}, {1, 2});
  y.set_requires_grad(true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = dpr::sum_all(dpr::mul(y, y));
    tape.backward(loss);
  }
  CHECK(y.grad()[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(y.grad()[1] == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("backward: non-scalar loss is a contract error") {
  Tensor<double> x(Shape{2}, {1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = dpr::mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), dpr::ContractError);
}

TEST_CASE("backward: determinism (two sweeps, bit-identical grads)") {
  dpr::Rng rng(23);
  auto x = random_tensor({4, 4}, rng);
  x.set_requires_grad(true);
  auto w = random_tensor({4, 4}, rng);
  w.set_requires_grad(true);

  auto run = [&]() {
    x.zero_grad();
    w.zero_grad();
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto y = dpr::gelu(dpr::matmul(x, w));
    auto loss = dpr::mse_loss(y, dpr::scale(x, 0.0));
    tape.backward(loss);
    return std::make_pair(x.grad(), w.grad());
  };
  auto [gx1, gw1] = run();
  auto [gx2, gw2] = run();
  CHECK(gx1 == gx2);
  CHECK(gw1 == gw2);
}

TEST_CASE("backward: repeated sweeps of one tape are bit-identical") {
  dpr::Rng rng(29);
  auto x = random_tensor({3, 3}, rng);
  x.set_requires_grad(true);
  Tape<double> tape;
  Tensor<double> loss;
  {
    TapeScope<double> scope(tape);
    loss = dpr::sum_squares(dpr::softmax_lastdim(dpr::mul(x, x)));
  }
  tape.backward(loss);
  auto first = x.grad();
  x.zero_grad();
  tape.backward(loss);
  CHECK(x.grad() == first);
}

TEST_CASE("gradient check: composed graph touching every op") {
  dpr::Rng rng(41);
  auto x = random_tensor({2, 3, 4}, rng);
  auto w = random_tensor({4, 4}, rng, -0.7, 0.7);
  auto b = random_tensor({4}, rng, -0.5, 0.5);
  auto g = random_tensor({4}, rng, 0.5, 1.5);
  auto bb = random_tensor({4}, rng, -0.5, 0.5);
  auto kern = random_tensor({4, 3}, rng, -0.8, 0.8);
  auto s = random_tensor({1}, rng, 0.5, 1.5);

  auto forward = [&]() {
    auto h = dpr::matmul(x, w);                     // [2,3,4]
    h = dpr::add_bias(h, b);
    h = dpr::layer_norm(h, g, bb);
    h = dpr::gelu(h);
    auto hc = dpr::swap_last2(h);                   // [2,4,3]
    hc = dpr::depthwise_conv1d(dpr::reshape(hc, {2, 4, 3}), kern);
    h = dpr::swap_last2(hc);
    auto sm = dpr::softmax_lastdim(h);
    auto nm = dpr::l2_normalize_lastdim(dpr::add(h, sm));
    auto mixed = dpr::concat_lastdim<double>({nm, dpr::scalar_mul(s, h)});
    auto e = dpr::exp_elem(dpr::scale(mixed, 0.1));
    auto flat = dpr::reshape(e, {6, 8});
    auto red = dpr::sub(flat, dpr::add_const(dpr::scale(flat, 0.5), 0.1));
    return dpr::sum_squares(red);
  };

  auto rep = testutil::check_gradients(forward, {{"x", x}, {"w", w}, {"b", b}, {"gain", g},
                                                 {"bias", bb}, {"kern", kern}, {"s", s}});
  INFO("worst: ", rep.worst, " rel err ", rep.max_rel_err);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("gradient check: matmul broadcast, patchify, dropout-free paths") {
  dpr::Rng rng(43);
  auto a = random_tensor({2, 1, 3, 4}, rng);
  auto b = random_tensor({2, 4, 2}, rng);
  auto series = random_tensor({2, 13}, rng);

  auto forward = [&]() {
    auto c = dpr::matmul(a, b);                 // [2,2,3,2]
    auto p = dpr::patchify(series, 4, 3);       // [2,4,4]
    auto q = dpr::mse_loss(dpr::reshape(c, {24}), dpr::scale(dpr::reshape(c, {24}), 0.0));
    return dpr::add(q, dpr::scale(dpr::sum_squares(p), 0.01));
  };
  auto rep = testutil::check_gradients(forward, {{"a", a}, {"b", b}, {"series", series}});
  INFO("worst: ", rep.worst, " rel err ", rep.max_rel_err);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("one_hot_argmax_lastdim: lowest-index tie break, no tracking") {
  Tensor<double> x(Shape{2, 3}, {1, 3, 3, 2, 2, 2});
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = dpr::one_hot_argmax_lastdim(x);
  CHECK(y.values() == std::vector<double>{0, 1, 0, 1, 0, 0});
  CHECK_FALSE(tape.tracked(y));
}

TEST_CASE("dropout: off returns input, on rescales kept entries") {
  dpr::Rng rng(2);
  auto x = random_tensor({100}, rng, 1.0, 2.0);
  dpr::Rng mask_rng(9);
  auto y = dpr::dropout(x, 0.0, mask_rng);
  CHECK(y.id() == x.id());

  dpr::Rng mask_rng2(9);
  auto z = dpr::dropout(x, 0.5, mask_rng2);
  int zeros = 0;
  for (std::size_t i = 0; i < z.values().size(); ++i) {
    if (z.values()[i] == 0.0)
      ++zeros;
    else
      CHECK(z.values()[i] == doctest::Approx(2.0 * x.values()[i]).epsilon(1e-12));
  }
  CHECK(zeros > 20);
  CHECK(zeros < 80);
}
