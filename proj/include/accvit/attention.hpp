#pragma once

// Windowed multi-head self-attention with a relative position bias table, and
// the atrous attention layer built from it.
//
// Layer data flow for input x [b, c, h, w]:
//   per branch (undilated, then each dilation d in order):
//     partition(x, d) -> P_eff windows -> LN -> attention heads
//     -> merge windows -> departition                      = h_d
//   fused = sum_d gate_d(x) * h_d
//   y     = proj(fused) + x
//   out   = MLP(LN(y)) + y
// The attention weights (LN, qkv, bias table, output projection) are shared
// by all branches. With no dilations this is a plain windowed transformer
// layer.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "accvit/cost.hpp"
#include "accvit/error.hpp"
#include "accvit/gating.hpp"
#include "accvit/ops.hpp"
#include "accvit/params.hpp"
#include "accvit/partition.hpp"
#include "accvit/tensor.hpp"

namespace accvit {

inline std::size_t heads_for(std::size_t dim, std::size_t head_dim) {
  return std::max<std::size_t>(1, dim / head_dim);
}

/// Table row for the offset between window positions (qi, qj) and (ki, kj).
inline std::size_t rel_index(std::size_t window, long di, long dj) {
  const long p = static_cast<long>(window);
  return static_cast<std::size_t>((di + p - 1) * (2 * p - 1) + (dj + p - 1));
}

template <typename T>
class WindowedMHSA {
 public:
  WindowedMHSA() = default;

  WindowedMHSA(std::size_t dim, std::size_t head_dim, std::size_t window,
               ParamInit& init)
      : dim_(dim), heads_(heads_for(dim, head_dim)), window_(window) {
    if (dim == 0 || window == 0 || dim % heads_) {
      throw Error(ErrorCode::kInvalidConfig,
                  "attention dim " + std::to_string(dim) +
                      " is not divisible into " + std::to_string(heads_) +
                      " heads");
    }
    qkv_weight = init.trunc_normal<T>({3 * dim, dim});
    qkv_bias = init.zeros<T>({3 * dim});
    proj_weight = init.trunc_normal<T>({dim, dim});
    proj_bias = init.zeros<T>({dim});
    rel_table = init.zeros<T>({(2 * window - 1) * (2 * window - 1), heads_});
  }

  std::size_t dim() const { return dim_; }
  std::size_t num_heads() const { return heads_; }
  std::size_t head_dim() const { return dim_ / heads_; }
  std::size_t window() const { return window_; }

  /// Bias [heads, p*p, p*p] for a p x p window (p <= window).
  Tensor<T> rel_bias(std::size_t p) const {
    const std::size_t l = p * p;
    auto index = std::make_shared<std::vector<std::size_t>>();
    index->reserve(heads_ * l * l);
    for (std::size_t h = 0; h < heads_; ++h)
      for (std::size_t q = 0; q < l; ++q)
        for (std::size_t k = 0; k < l; ++k) {
          const long di = static_cast<long>(q / p) - static_cast<long>(k / p);
          const long dj = static_cast<long>(q % p) - static_cast<long>(k % p);
          index->push_back(rel_index(window_, di, dj) * heads_ + h);
        }
    return gather<T>(rel_table, std::move(index), {heads_, l, l});
  }

  /// Softmax attention weights [nw, heads, L, L] for windows [nw, L, c].
  Tensor<T> attention_weights(const Tensor<T>& windows, std::size_t p) const {
    auto [q, k, v] = split_qkv(windows, p);
    return scores(q, k, p);
  }

  /// Per-head attention outputs concatenated over heads, [nw, L, c],
  /// before the output projection.
  Tensor<T> attend_heads(const Tensor<T>& windows, std::size_t p) const {
    auto [q, k, v] = split_qkv(windows, p);
    auto o = matmul(scores(q, k, p), v);  // [nw, heads, L, hd]
    return reshape(permute(o, {0, 2, 1, 3}), {windows.dim(0), p * p, dim_});
  }

  /// Full W-MHSA: projection of the concatenated heads.
  Tensor<T> forward(const Tensor<T>& windows, std::size_t p) const {
    return project(attend_heads(windows, p));
  }

  Tensor<T> project(const Tensor<T>& heads) const {
    return linear(heads, proj_weight, proj_bias);
  }

  void parameters(const std::string& prefix, ParamList<T>& out) {
    out.emplace_back(prefix + ".qkv.weight", &qkv_weight);
    out.emplace_back(prefix + ".qkv.bias", &qkv_bias);
    out.emplace_back(prefix + ".proj.weight", &proj_weight);
    out.emplace_back(prefix + ".proj.bias", &proj_bias);
    out.emplace_back(prefix + ".rel_table", &rel_table);
  }

  Tensor<T> qkv_weight, qkv_bias, proj_weight, proj_bias, rel_table;

 private:
  struct Qkv {
    Tensor<T> q, k, v;
  };

  Qkv split_qkv(const Tensor<T>& windows, std::size_t p) const {
    if (windows.ndim() != 3 || windows.dim(1) != p * p || windows.dim(2) != dim_ ||
        p > window_ || p == 0) {
      throw Error(ErrorCode::kShapeMismatch,
                  "attention over " + std::to_string(p) + "x" + std::to_string(p) +
                      " windows of dim " + std::to_string(dim_) + " got " +
                      to_string(windows.shape()));
    }
    const std::size_t nw = windows.dim(0), l = p * p, hd = head_dim();
    auto qkv = linear(windows, qkv_weight, qkv_bias);  // [nw, L, 3c]
    auto parts = permute(reshape(qkv, {nw, l, 3, heads_, hd}), {2, 0, 3, 1, 4});
    auto pick = [&](std::size_t i) {
      return reshape(slice(parts, 0, i, 1), {nw, heads_, l, hd});
    };
    return {pick(0), pick(1), pick(2)};
  }

  Tensor<T> scores(const Tensor<T>& q, const Tensor<T>& k, std::size_t p) const {
    const T s = T(1) / std::sqrt(static_cast<T>(head_dim()));
    auto logits = matmul(scale(q, s), permute(k, {0, 1, 3, 2}));
    return softmax(add(logits, rel_bias(p)), -1);
  }

  std::size_t dim_ = 0;
  std::size_t heads_ = 1;
  std::size_t window_ = 1;
};

template <typename T>
class AtrousAttentionLayer {
 public:
  AtrousAttentionLayer() = default;

  AtrousAttentionLayer(std::size_t dim, std::vector<std::size_t> dilations,
                       std::size_t head_dim, std::size_t window,
                       std::size_t mlp_ratio, ParamInit& init)
      : dim_(dim), dilations_(std::move(dilations)) {
    for (auto d : dilations_) {
      if (d < 2) {
        throw Error(ErrorCode::kInvalidConfig,
                    "dilation levels must be >= 2 (the undilated branch is implicit)");
      }
    }
    norm1_gamma = init.ones<T>({dim});
    norm1_beta = init.zeros<T>({dim});
    attn = WindowedMHSA<T>(dim, head_dim, window, init);
    gate = GateUnit<T>(dim, branch_count(), GateMode::kDense, init);
    norm2_gamma = init.ones<T>({dim});
    norm2_beta = init.zeros<T>({dim});
    fc1_weight = init.trunc_normal<T>({mlp_ratio * dim, dim});
    fc1_bias = init.zeros<T>({mlp_ratio * dim});
    fc2_weight = init.trunc_normal<T>({dim, mlp_ratio * dim});
    fc2_bias = init.zeros<T>({dim});
  }

  std::size_t dim() const { return dim_; }
  const std::vector<std::size_t>& dilations() const { return dilations_; }
  std::size_t branch_count() const { return dilations_.size() + 1; }

  /// All branch dilations including the undilated one, in fusion order.
  std::vector<std::size_t> branch_dilations() const {
    std::vector<std::size_t> all{1};
    all.insert(all.end(), dilations_.begin(), dilations_.end());
    return all;
  }

  /// Unprojected attention heads of one branch, back in [b, c, h, w] layout.
  Tensor<T> branch_heads(const Tensor<T>& x, std::size_t d) const {
    auto part = partition(x, d);
    const auto& ph = part.phases;
    const std::size_t p = effective_window(attn.window(), ph.dim(2), ph.dim(3));
    auto grid = window_split(ph, p);
    grid.windows = attn.attend_heads(
        layernorm(grid.windows, norm1_gamma, norm1_beta, kEps), p);
    part.phases = window_merge(grid);
    return departition(part);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != dim_) {
      throw Error(ErrorCode::kShapeMismatch,
                  "attention layer of dim " + std::to_string(dim_) + " got " +
                      to_string(x.shape()));
    }
    std::vector<Tensor<T>> heads;
    for (auto d : branch_dilations()) heads.push_back(branch_heads(x, d));
    auto fused = gate.fuse(x, heads);
    auto y = add(attn.project(permute(fused, {0, 2, 3, 1})),
                 permute(x, {0, 2, 3, 1}));
    auto out = add(y, mlp(layernorm(y, norm2_gamma, norm2_beta, kEps)));
    return permute(out, {0, 3, 1, 2});
  }

  /// Shared feed-forward on channels-last tokens.
  Tensor<T> mlp(const Tensor<T>& t) const {
    return linear(gelu(linear(t, fc1_weight, fc1_bias)), fc2_weight, fc2_bias);
  }

  void parameters(const std::string& prefix, ParamList<T>& out) {
    out.emplace_back(prefix + ".norm1.gamma", &norm1_gamma);
    out.emplace_back(prefix + ".norm1.beta", &norm1_beta);
    attn.parameters(prefix + ".attn", out);
    gate.parameters(prefix + ".gate", out);
    out.emplace_back(prefix + ".norm2.gamma", &norm2_gamma);
    out.emplace_back(prefix + ".norm2.beta", &norm2_beta);
    out.emplace_back(prefix + ".mlp.fc1.weight", &fc1_weight);
    out.emplace_back(prefix + ".mlp.fc1.bias", &fc1_bias);
    out.emplace_back(prefix + ".mlp.fc2.weight", &fc2_weight);
    out.emplace_back(prefix + ".mlp.fc2.bias", &fc2_bias);
  }

  /// Analytic cost for one [1, c, h, w] input.
  void cost(const std::string& m, std::size_t h, std::size_t w, CostSink& sink) const {
    const std::uint64_t c = dim_, n = h * w, heads = attn.num_heads();
    const std::uint64_t r = fc1_weight.dim(0) / dim_;
    bool first = true;
    for (auto d : branch_dilations()) {
      if (h % d || w % d) {
        throw Error(ErrorCode::kIndivisibleDims,
                    "dilation " + std::to_string(d) + " does not divide " +
                        std::to_string(h) + "x" + std::to_string(w));
      }
      const std::uint64_t p = effective_window(attn.window(), h / d, w / d);
      const std::uint64_t l = p * p;
      const std::string b = ".branch" + std::to_string(d);
      // Shared weights are attributed to the first branch only.
      auto shared = [&](CostSink::Refs<T> ps) {
        return first ? ps : CostSink::Refs<T>{};
      };
      sink.add<T>(m, "norm1" + b, CostKind::kElementwise,
                  shared({{"norm1.gamma", &norm1_gamma}, {"norm1.beta", &norm1_beta}}),
                  0, 6 * n * c);
      sink.add<T>(m, "qkv" + b, CostKind::kLinear,
                  shared({{"attn.qkv.weight", &attn.qkv_weight},
                          {"attn.qkv.bias", &attn.qkv_bias}}),
                  3 * c * c * n, 3 * c * n);
      // QK^T and AV: per window and head, L*L*hd each; summed over windows
      // and heads this is n*L*c.
      sink.add<T>(m, "attention" + b, CostKind::kAttentionMatmul,
                  shared({{"attn.rel_table", &attn.rel_table}}), 2 * n * l * c,
                  n * c + 5 * heads * n * l);  // scale, bias add, softmax
      first = false;
    }
    gate.cost(m + ".gate", h, w, sink);
    sink.add<T>(m, "proj", CostKind::kLinear,
                {{"attn.proj.weight", &attn.proj_weight},
                 {"attn.proj.bias", &attn.proj_bias}},
                c * c * n, 2 * c * n);  // bias, residual
    sink.add<T>(m, "norm2", CostKind::kElementwise,
                {{"norm2.gamma", &norm2_gamma}, {"norm2.beta", &norm2_beta}}, 0,
                6 * n * c);
    sink.add<T>(m, "mlp.fc1", CostKind::kLinear,
                {{"mlp.fc1.weight", &fc1_weight}, {"mlp.fc1.bias", &fc1_bias}},
                r * c * c * n, 2 * r * c * n);  // bias, GELU
    sink.add<T>(m, "mlp.fc2", CostKind::kLinear,
                {{"mlp.fc2.weight", &fc2_weight}, {"mlp.fc2.bias", &fc2_bias}},
                r * c * c * n, 2 * c * n);  // bias, residual
  }

  static constexpr double kEps = 1e-5;

  Tensor<T> norm1_gamma, norm1_beta;
  WindowedMHSA<T> attn;
  GateUnit<T> gate;
  Tensor<T> norm2_gamma, norm2_beta;
  Tensor<T> fc1_weight, fc1_bias, fc2_weight, fc2_bias;

 private:
  std::size_t dim_ = 0;
  std::vector<std::size_t> dilations_;
};

}  // namespace accvit
