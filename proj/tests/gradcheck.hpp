#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "spikesr/ops.hpp"
#include "spikesr/tensor.hpp"

namespace testutil {

using spikesr::Shape;
using spikesr::Tensor;

inline Tensor randn(Shape shape, std::uint64_t seed, double scale = 1.0, bool grad = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(static_cast<std::size_t>(spikesr::shape_numel(shape)));
  for (auto& x : v) x = nd(rng);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

inline Tensor randu(Shape shape, std::uint64_t seed, double lo, double hi, bool grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ud(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(spikesr::shape_numel(shape)));
  for (auto& x : v) x = ud(rng);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Random linear functional so that the checked scalar depends on every output.
inline Tensor project(const Tensor& t, std::uint64_t seed = 99) {
  return spikesr::ops::sum(spikesr::ops::mul(t, randn(t.shape(), seed)));
}

struct GradCheck {
  double rel_error = 0.0;
  double analytic_norm = 0.0;
  int coords = 0;
};

// Central differences against the analytic gradient over a sample of
// coordinates of every input that requires grad. Error is
// ||a - n|| / max(||a||, ||n||).
inline GradCheck gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                           double h = 1e-5, int max_coords = 48, std::uint64_t seed = 7) {
  for (auto& t : inputs)
    if (t.requires_grad()) t.zero_grad();
  spikesr::backward(f(inputs));
  std::mt19937_64 rng(seed);
  double diff2 = 0, a2 = 0, n2 = 0;
  GradCheck r;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(t.numel()), 0.0);
    std::vector<std::size_t> idx(static_cast<std::size_t>(t.numel()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    if (static_cast<int>(idx.size()) > max_coords) idx.resize(static_cast<std::size_t>(max_coords));
    for (std::size_t i : idx) {
      auto d = t.mutable_data();
      const double x0 = d[i];
      double fp, fm;
      {
        spikesr::NoGradGuard ng;
        d[i] = x0 + h;
        fp = f(inputs).item();
        d[i] = x0 - h;
        fm = f(inputs).item();
      }
      d[i] = x0;
      const double num = (fp - fm) / (2 * h);
      diff2 += (num - analytic[i]) * (num - analytic[i]);
      a2 += analytic[i] * analytic[i];
      n2 += num * num;
      ++r.coords;
    }
  }
  const double denom = std::sqrt(std::max({a2, n2, 1e-300}));
  r.rel_error = std::sqrt(diff2) / denom;
  r.analytic_norm = std::sqrt(a2);
  return r;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.values().size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

}  // namespace testutil
