#pragma once

// Input-conditioned softmax gates over k parallel branches and the gated sum.
//
// Gate tensors are laid out [k, b, c, h, w]. Logits come from a pointwise
// map of the block input: dense (c -> k*c, 1x1) or per-channel (a grouped
// 1x1 conv giving each channel k logits from its own value). GELU is applied
// before the softmax over k.

#include <algorithm>
#include <string>
#include <vector>

#include "accvit/cost.hpp"
#include "accvit/error.hpp"
#include "accvit/ops.hpp"
#include "accvit/params.hpp"
#include "accvit/tensor.hpp"

namespace accvit {

enum class GateMode { kDense, kPerChannel };

/// out = sum_k g[k] * ys[k], clamped to the per-element [min_k, max_k]
/// envelope of the branches. The exact value already lies in the envelope;
/// the clamp only absorbs rounding, so identical branches reproduce exactly.
/// The backward rule is that of the unclamped sum.
template <typename T>
Tensor<T> gated_sum(const Tensor<T>& g, const std::vector<Tensor<T>>& ys) {
  if (ys.empty() || g.ndim() < 1 || g.dim(0) != ys.size()) {
    throw Error(ErrorCode::kBranchCountMismatch,
                "gate has " + std::to_string(g.ndim() ? g.dim(0) : 0) +
                    " branches, got " + std::to_string(ys.size()) + " inputs");
  }
  const Shape& s = ys[0].shape();
  for (const auto& y : ys) {
    if (y.shape() != s) {
      throw Error(ErrorCode::kShapeMismatch,
                  "branch shapes differ: " + to_string(y.shape()) + " vs " +
                      to_string(s));
    }
  }
  Shape gs(g.shape().begin() + 1, g.shape().end());
  if (gs != s) {
    throw Error(ErrorCode::kShapeMismatch,
                "gate " + to_string(g.shape()) + " does not match branches " +
                    to_string(s));
  }
  const std::size_t n = numel(s), k = ys.size();
  const auto gv = g.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    T acc = 0, lo = ys[0].data()[i], hi = lo;
    for (std::size_t b = 0; b < k; ++b) {
      const T y = ys[b].data()[i];
      acc += gv[b * n + i] * y;
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
    out[i] = std::clamp(acc, lo, hi);
  }
  std::vector<typename Tensor<T>::NodePtr> inputs{g.node()};
  for (const auto& y : ys) inputs.push_back(y.node());
  return detail::make_result<T>(
      "gated_sum", s, std::move(out), inputs,
      [inputs, n, k](const detail::Node<T>& o) {
        const auto& gn = inputs[0];
        for (std::size_t b = 0; b < k; ++b) {
          const auto& yn = inputs[b + 1];
          if (gn->requires_grad) {
            auto& gg = gn->grad_buffer();
            for (std::size_t i = 0; i < n; ++i)
              gg[b * n + i] += o.grad[i] * yn->value[i];
          }
          if (yn->requires_grad) {
            auto& gy = yn->grad_buffer();
            for (std::size_t i = 0; i < n; ++i)
              gy[i] += o.grad[i] * gn->value[b * n + i];
          }
        }
      });
}

template <typename T>
class GateUnit {
 public:
  GateUnit() = default;

  GateUnit(std::size_t channels, std::size_t branches, GateMode mode,
           ParamInit& init)
      : channels_(channels), branches_(branches), mode_(mode) {
    if (channels == 0 || branches == 0) {
      throw Error(ErrorCode::kInvalidConfig, "gate needs channels and branches");
    }
    // A single branch always receives weight 1, so it owns no parameters.
    if (branches == 1) return;
    if (mode == GateMode::kDense) {
      weight = init.trunc_normal<T>({branches * channels, channels});
      bias = init.zeros<T>({branches * channels});
    } else {
      weight = init.trunc_normal<T>({channels, branches});
      bias = init.zeros<T>({channels, branches});
    }
  }

  std::size_t channels() const { return channels_; }
  std::size_t branches() const { return branches_; }
  GateMode mode() const { return mode_; }

  /// Pre-activation logits, [k, b, c, h, w].
  Tensor<T> logits(const Tensor<T>& x) const {
    check_input(x);
    const std::size_t b = x.dim(0), c = channels_, h = x.dim(2), w = x.dim(3);
    const std::size_t k = branches_;
    if (k == 1) return Tensor<T>::zeros({1, b, c, h, w});
    if (mode_ == GateMode::kDense) {
      auto y = conv2d(x, reshape(weight, {k * c, c, 1, 1}), bias);
      return permute(reshape(y, {b, k, c, h, w}), {1, 0, 2, 3, 4});
    }
    // Grouped 1x1 conv: group ch emits channels ch*k .. ch*k+k-1.
    auto y = conv2d(x, reshape(weight, {c * k, 1, 1, 1}),
                    reshape(bias, {c * k}), {.groups = c});
    return permute(reshape(y, {b, c, k, h, w}), {2, 0, 1, 3, 4});
  }

  /// Convex weights over the branches, [k, b, c, h, w].
  Tensor<T> weights(const Tensor<T>& x) const {
    check_input(x);
    if (branches_ == 1) {
      return Tensor<T>::full({1, x.dim(0), channels_, x.dim(2), x.dim(3)}, T(1));
    }
    return softmax(gelu(logits(x)), 0);
  }

  /// sum_k g_k * branches[k], gates computed from x.
  Tensor<T> fuse(const Tensor<T>& x, const std::vector<Tensor<T>>& branches) const {
    if (branches.size() != branches_) {
      throw Error(ErrorCode::kBranchCountMismatch,
                  "gate expects " + std::to_string(branches_) + " branches, got " +
                      std::to_string(branches.size()));
    }
    for (const auto& y : branches) {
      if (y.shape() != x.shape()) {
        throw Error(ErrorCode::kShapeMismatch,
                    "branch " + to_string(y.shape()) + " vs gate input " +
                        to_string(x.shape()));
      }
    }
    return gated_sum(weights(x), branches);
  }

  void parameters(const std::string& prefix, ParamList<T>& out) {
    if (weight.defined()) out.emplace_back(prefix + ".weight", &weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", &bias);
  }

  /// Cost of computing gates from a [1, c, h, w] input and fusing.
  void cost(const std::string& module, std::size_t h, std::size_t w,
            CostSink& sink) const {
    const std::uint64_t n = h * w, c = channels_, k = branches_;
    if (k > 1) {
      const std::uint64_t macs = mode_ == GateMode::kDense ? k * c * c * n : k * c * n;
      // bias, GELU, softmax (3 passes)
      sink.add<T>(module, "gate_logits", CostKind::kConv,
                  {{"weight", &weight}, {"bias", &bias}}, macs, 5 * k * c * n);
    }
    sink.add_plain(module, "gated_sum", CostKind::kElementwise, 0, 2 * k * c * n);
  }

  Tensor<T> weight;
  Tensor<T> bias;

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != channels_) {
      throw Error(ErrorCode::kShapeMismatch,
                  "gate over " + std::to_string(channels_) +
                      " channels got input " + to_string(x.shape()));
    }
  }

  std::size_t channels_ = 0;
  std::size_t branches_ = 1;
  GateMode mode_ = GateMode::kDense;
};

}  // namespace accvit
