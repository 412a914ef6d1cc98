// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dpr/ops.hpp"
#include "dpr/rng.hpp"
#include "dpr/tensor.hpp"

namespace testutil {

using dpr::Index;
using dpr::Tensor;

inline Tensor<double> random_tensor(dpr::Shape shape, dpr::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // "name[i]"
};

/// Central finite differences against tape gradients. `forward` must rebuild
/// the graph from the current parameter values on every call; it runs under an
/// active tape only for the analytic pass.
inline GradCheckReport check_gradients(const std::function<Tensor<double>()>& forward,
                                       std::vector<std::pair<std::string, Tensor<double>>> params,
                                       double h = 1e-5) {
  for (auto& [name, p] : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  dpr::Tape<double> tape;
  {
    dpr::TapeScope<double> scope(tape);
    Tensor<double> loss = forward();
    tape.backward(loss);
  }
  GradCheckReport rep;
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
      double rel = std::abs(grad[i] - fd) / (std::abs(fd) + 1e-8);
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

/// O(n^2) discrete Fourier transform magnitude-squared, the oracle for the
/// radix-2 FFT used by the diagnostics.
inline std::vector<double> naive_power_spectrum(const std::vector<double>& x) {
  std::size_t n = x.size();
  std::vector<double> power(n);
  for (std::size_t k = 0; k < n; ++k) {
    double re = 0, im = 0;
    for (std::size_t t = 0; t < n; ++t) {
      double ang = -2.0 * M_PI * double(k) * double(t) / double(n);
      re += x[t] * std::cos(ang);
      im += x[t] * std::sin(ang);
    }
    power[k] = re * re + im * im;
  }
  return power;
}

}  // namespace testutil
