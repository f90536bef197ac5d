#pragma once

// Toy training loop: full-batch SGD with momentum on label-smoothed
// cross-entropy over a fixed synthetic brightness-classification set.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "accvit/model.hpp"
#include "accvit/ops.hpp"

namespace accvit {

struct SyntheticSet {
  Tensor<float> images;  // [n, 3, size, size]
  std::vector<std::size_t> labels;
};

/// Class 0: dark noisy images, class 1: bright noisy images (alternating).
inline SyntheticSet brightness_dataset(std::size_t n, std::size_t size,
                                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> noise(0.0f, 0.3f);
  std::vector<float> v(n * 3 * size * size);
  std::vector<std::size_t> labels(n);
  const std::size_t per = 3 * size * size;
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = i % 2;
    const float base = labels[i] == 0 ? 0.0f : 0.7f;
    for (std::size_t j = 0; j < per; ++j) {
      // standardized around mid-gray
      v[i * per + j] = (base + noise(rng) - 0.5f) / 0.25f;
    }
  }
  return {Tensor<float>::from({n, 3, size, size}, std::move(v)), std::move(labels)};
}

struct TrainOptions {
  std::size_t steps = 200;
  double lr = 0.01;
  double momentum = 0.9;
  double label_smoothing = 0.1;
};

/// Returns the loss before each update.
inline std::vector<double> train_smoke(AccVitModel<float>& model,
                                       const SyntheticSet& data,
                                       const TrainOptions& opt) {
  auto params = model.named_parameters();
  std::vector<std::vector<float>> velocity;
  for (const auto& [name, t] : params) velocity.emplace_back(t->numel(), 0.0f);
  std::vector<double> trace;
  trace.reserve(opt.steps);
  for (std::size_t step = 0; step < opt.steps; ++step) {
    for (auto& [name, t] : params) t->zero_grad();
    auto loss = cross_entropy(model.forward(data.images), data.labels,
                              static_cast<float>(opt.label_smoothing));
    trace.push_back(loss.item());
    backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<float>& p = *params[i].second;
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.mutable_data();
      auto& v = velocity[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = static_cast<float>(opt.momentum) * v[j] + g[j];
        w[j] -= static_cast<float>(opt.lr) * v[j];
      }
    }
  }
  return trace;
}

/// Final smoothed loss (mean of the last `window` steps) over the initial
/// loss (step 0, before any update).
inline std::optional<double> smoothed_loss_ratio(const std::vector<double>& trace,
                                                 std::size_t window = 10) {
  if (trace.empty() || trace.front() == 0) return std::nullopt;
  const std::size_t w = std::min(window, trace.size());
  double last = 0;
  for (std::size_t i = trace.size() - w; i < trace.size(); ++i) last += trace[i];
  return last / static_cast<double>(w) / trace.front();
}

}  // namespace accvit
