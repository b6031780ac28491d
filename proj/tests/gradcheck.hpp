#pragma once
// Central finite differences against the tape's analytic gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "granmoe/tensor/tape.hpp"

namespace gradcheck {

using granmoe::DoubleTape;
using granmoe::Matrix;
using granmoe::Tensor;
using granmoe::Var;

using LossFn = std::function<Var(DoubleTape&, const std::vector<Var>&)>;

inline Matrix random_matrix(std::mt19937_64& rng, long r, long c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline double eval(std::vector<Tensor>& xs, const LossFn& f) {
  DoubleTape tape;
  std::vector<Var> vars;
  for (auto& x : xs) vars.push_back(tape.parameter(x));
  return f(tape, vars).item();
}

// Largest relative error |a - n| / max(1e-8, |a| + |n|) over every entry.
inline double max_rel_error(std::vector<Tensor> xs, const LossFn& f, double h = 1e-5) {
  for (auto& x : xs) x.zero_grad();
  {
    DoubleTape tape;
    std::vector<Var> vars;
    for (auto& x : xs) vars.push_back(tape.parameter(x));
    tape.backward(f(tape, vars));
  }
  double worst = 0;
  for (auto& x : xs) {
    for (long i = 0; i < x.size(); ++i) {
      double& v = x.values().data()[i];
      const double keep = v;
      v = keep + h;
      const double up = eval(xs, f);
      v = keep - h;
      const double down = eval(xs, f);
      v = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = x.grad().data()[i];
      const double denom = std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      if (std::abs(analytic - numeric) < 1e-9) continue;  // both tiny
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace gradcheck
