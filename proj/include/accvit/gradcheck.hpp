#pragma once

// Central finite-difference gradient checking in double precision.
//
// Error metric per leaf: max_i |analytic_i - numeric_i| divided by
// max(max_i |numeric_i|, max_i |analytic_i|, floor). Normalizing by the
// leaf's gradient scale keeps near-zero entries from dominating.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "accvit/ops.hpp"
#include "accvit/tensor.hpp"

namespace accvit {

struct GradcheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst_leaf;
};

struct GradcheckOptions {
  double step = 1e-4;
  double floor = 1e-8;
  // Upper bound on checked entries per leaf (randomly sampled); 0 = all.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
};

/// `loss` must rebuild the graph from the leaves each call and return a
/// scalar. Leaves are restored to their original values afterwards.
inline GradcheckResult gradcheck(const std::function<Tensor<double>()>& loss,
                                 std::vector<Tensor<double>> leaves,
                                 const GradcheckOptions& opt = {}) {
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  backward(loss());
  GradcheckResult res;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const std::size_t n = leaf.numel();
    std::vector<double> analytic(n, 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (opt.max_entries && n > opt.max_entries) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_entries);
    }
    double max_diff = 0, scale = opt.floor;
    auto data = leaf.mutable_data();
    {
      NoGradGuard guard;
      for (const auto i : idx) {
        const double orig = data[i];
        data[i] = orig + opt.step;
        const double plus = loss().item();
        data[i] = orig - opt.step;
        const double minus = loss().item();
        data[i] = orig;
        const double numeric = (plus - minus) / (2 * opt.step);
        max_diff = std::max(max_diff, std::abs(numeric - analytic[i]));
        scale = std::max({scale, std::abs(numeric), std::abs(analytic[i])});
        ++res.checked;
      }
    }
    const double rel = max_diff / scale;
    if (rel >= res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_leaf = "leaf " + std::to_string(li) + " " + to_string(leaf.shape());
    }
  }
  return res;
}

/// sum(f(x) * r) with a fixed random r, so every output entry gets a
/// distinct weight in the checked scalar.
inline Tensor<double> random_projection(const Tensor<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> r(y.numel());
  for (auto& v : r) v = u(rng);
  return sum(mul(y, Tensor<double>::from(y.shape(), std::move(r))));
}

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng,
                                    double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>::from(shape, std::move(v), true);
}

}  // namespace accvit
