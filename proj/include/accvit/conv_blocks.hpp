#pragma once

// Convolutional stem, squeeze-and-excitation, and the atrous inverted
// residual block:
//
//   e     = GELU(expand_1x1(norm(x)))                     [b, 4c, h, w]
//   y_i   = GELU(depthwise_3x3(e, dilation=i, pad=i))     i = 1, 2, 3
//   f     = sum_i gate_i(e) * y_i                         per-channel gate
//   out   = project_1x1(SE(f)) + shortcut(x)
//
// Stride 2 goes on all three depthwise convs; the gate then reads e pooled
// 2x2 so it matches the branch resolution, and the shortcut is a 2x2 average
// pool followed by a 1x1 projection. The shortcut is the identity when the
// stride is 1 and the channel count does not change.

#include <string>
#include <vector>

#include "accvit/cost.hpp"
#include "accvit/error.hpp"
#include "accvit/gating.hpp"
#include "accvit/ops.hpp"
#include "accvit/params.hpp"
#include "accvit/tensor.hpp"

namespace accvit {

/// Per-sample normalization over (C, H, W) with a per-channel affine.
template <typename T>
class SampleNorm {
 public:
  SampleNorm() = default;
  SampleNorm(std::size_t channels, ParamInit& init)
      : gamma(init.ones<T>({channels})), beta(init.zeros<T>({channels})) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    const std::size_t b = x.dim(0), c = x.dim(1);
    if (c != gamma.numel()) {
      throw Error(ErrorCode::kShapeMismatch,
                  "norm over " + std::to_string(gamma.numel()) +
                      " channels got " + to_string(x.shape()));
    }
    auto n = reshape(layernorm<T>(reshape(x, {b, x.numel() / b}), std::nullopt,
                                  std::nullopt, kEps),
                     x.shape());
    return add(mul(n, reshape(gamma, {1, c, 1, 1})), reshape(beta, {1, c, 1, 1}));
  }

  void parameters(const std::string& prefix, ParamList<T>& out) {
    out.emplace_back(prefix + ".gamma", &gamma);
    out.emplace_back(prefix + ".beta", &beta);
  }

  static constexpr double kEps = 1e-5;
  Tensor<T> gamma, beta;
};

template <typename T>
class SqueezeExcite {
 public:
  SqueezeExcite() = default;
  SqueezeExcite(std::size_t channels, std::size_t hidden, ParamInit& init)
      : fc1_weight(init.trunc_normal<T>({hidden, channels})),
        fc1_bias(init.zeros<T>({hidden})),
        fc2_weight(init.trunc_normal<T>({channels, hidden})),
        fc2_bias(init.zeros<T>({channels})) {}

  std::size_t channels() const { return fc1_weight.dim(1); }
  std::size_t hidden() const { return fc1_weight.dim(0); }

  /// Per-channel factors in (0, 1), [b, C].
  Tensor<T> scales(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != channels()) {
      throw Error(ErrorCode::kShapeMismatch,
                  "SE over " + std::to_string(channels()) + " channels got " +
                      to_string(x.shape()));
    }
    auto z = gelu(linear(global_avg_pool(x), fc1_weight, fc1_bias));
    return sigmoid(linear(z, fc2_weight, fc2_bias));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return mul(x, reshape(scales(x), {x.dim(0), x.dim(1), 1, 1}));
  }

  void parameters(const std::string& prefix, ParamList<T>& out) {
    out.emplace_back(prefix + ".fc1.weight", &fc1_weight);
    out.emplace_back(prefix + ".fc1.bias", &fc1_bias);
    out.emplace_back(prefix + ".fc2.weight", &fc2_weight);
    out.emplace_back(prefix + ".fc2.bias", &fc2_bias);
  }

  void cost(const std::string& m, std::size_t h, std::size_t w, CostSink& sink) const {
    const std::uint64_t c = channels(), r = hidden(), n = h * w;
    sink.add<T>(m, "pool", CostKind::kElementwise, {}, 0, c * n);
    sink.add<T>(m, "fc1", CostKind::kLinear,
                {{"fc1.weight", &fc1_weight}, {"fc1.bias", &fc1_bias}}, c * r,
                2 * r, false);
    sink.add<T>(m, "fc2", CostKind::kLinear,
                {{"fc2.weight", &fc2_weight}, {"fc2.bias", &fc2_bias}}, c * r,
                2 * c, false);
    sink.add<T>(m, "scale", CostKind::kElementwise, {}, 0, c * n);
  }

  Tensor<T> fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};

template <typename T>
class AtrousMBConv {
 public:
  static constexpr std::size_t kBranches = 3;  // dilations 1, 2, 3

  AtrousMBConv() = default;

  AtrousMBConv(std::size_t in_channels, std::size_t out_channels,
               std::size_t stride, ParamInit& init, std::size_t expansion = 4)
      : in_(in_channels), out_(out_channels), stride_(stride) {
    if (in_channels == 0 || out_channels == 0 || (stride != 1 && stride != 2)) {
      throw Error(ErrorCode::kInvalidConfig, "MBConv needs channels and stride 1 or 2");
    }
    const std::size_t m = expansion * out_channels;
    norm = SampleNorm<T>(in_channels, init);
    expand_weight = init.conv_weight<T>({m, in_channels, 1, 1});
    expand_bias = init.zeros<T>({m});
    for (std::size_t i = 0; i < kBranches; ++i) {
      dw_weight[i] = init.conv_weight<T>({m, 1, 3, 3});
      dw_bias[i] = init.zeros<T>({m});
    }
    gate = GateUnit<T>(m, kBranches, GateMode::kPerChannel, init);
    se = SqueezeExcite<T>(m, out_channels, init);
    proj_weight = init.conv_weight<T>({out_channels, m, 1, 1});
    proj_bias = init.zeros<T>({out_channels});
    if (has_projection_shortcut()) {
      shortcut_weight = init.conv_weight<T>({out_channels, in_channels, 1, 1});
      shortcut_bias = init.zeros<T>({out_channels});
    }
  }

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  std::size_t hidden() const { return expand_weight.dim(0); }
  std::size_t stride() const { return stride_; }
  bool has_projection_shortcut() const { return stride_ != 1 || in_ != out_; }

  /// e = GELU(expand(norm(x))).
  Tensor<T> expand(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != in_) {
      throw Error(ErrorCode::kShapeMismatch,
                  "MBConv with " + std::to_string(in_) + " input channels got " +
                      to_string(x.shape()));
    }
    return gelu(conv2d(norm.forward(x), expand_weight, expand_bias));
  }

  /// The three dilated depthwise branches of e.
  std::vector<Tensor<T>> branches(const Tensor<T>& e) const {
    std::vector<Tensor<T>> ys;
    for (std::size_t i = 0; i < kBranches; ++i) {
      const std::size_t d = i + 1;
      ys.push_back(gelu(conv2d(e, dw_weight[i], dw_bias[i],
                               {.stride = stride_, .padding = d, .dilation = d,
                                .groups = hidden()})));
    }
    return ys;
  }

  /// Gated fusion of the branches, the featuremap the SE unit rescales.
  Tensor<T> fuse(const Tensor<T>& e) const {
    auto ys = branches(e);
    const Tensor<T> gate_in = stride_ == 1 ? e : avg_pool2d(e, stride_);
    return gate.fuse(gate_in, ys);
  }

  Tensor<T> shortcut(const Tensor<T>& x) const {
    if (!has_projection_shortcut()) return x;
    const Tensor<T> pooled = stride_ == 1 ? x : avg_pool2d(x, stride_);
    return conv2d(pooled, shortcut_weight, shortcut_bias);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (stride_ != 1 && (x.ndim() != 4 || x.dim(2) % stride_ || x.dim(3) % stride_)) {
      throw Error(ErrorCode::kIndivisibleDims,
                  "stride-2 MBConv needs even spatial dims, got " + to_string(x.shape()));
    }
    auto f = fuse(expand(x));
    return add(conv2d(se.forward(f), proj_weight, proj_bias), shortcut(x));
  }

  void parameters(const std::string& prefix, ParamList<T>& out) {
    norm.parameters(prefix + ".norm", out);
    out.emplace_back(prefix + ".expand.weight", &expand_weight);
    out.emplace_back(prefix + ".expand.bias", &expand_bias);
    for (std::size_t i = 0; i < kBranches; ++i) {
      const std::string p = prefix + ".dw" + std::to_string(i + 1);
      out.emplace_back(p + ".weight", &dw_weight[i]);
      out.emplace_back(p + ".bias", &dw_bias[i]);
    }
    gate.parameters(prefix + ".gate", out);
    se.parameters(prefix + ".se", out);
    out.emplace_back(prefix + ".proj.weight", &proj_weight);
    out.emplace_back(prefix + ".proj.bias", &proj_bias);
    if (has_projection_shortcut()) {
      out.emplace_back(prefix + ".shortcut.weight", &shortcut_weight);
      out.emplace_back(prefix + ".shortcut.bias", &shortcut_bias);
    }
  }

  /// Analytic cost for one [1, c_in, h, w] input.
  void cost(const std::string& m, std::size_t h, std::size_t w, CostSink& sink) const {
    const std::uint64_t ci = in_, co = out_, hid = hidden();
    const std::uint64_t n_in = h * w;
    const std::uint64_t ho = (h - 1) / stride_ + 1, wo = (w - 1) / stride_ + 1;
    const std::uint64_t n = ho * wo;
    sink.add<T>(m, "norm", CostKind::kElementwise,
                {{"norm.gamma", &norm.gamma}, {"norm.beta", &norm.beta}}, 0,
                6 * ci * n_in);
    sink.add<T>(m, "expand", CostKind::kConv,
                {{"expand.weight", &expand_weight}, {"expand.bias", &expand_bias}},
                hid * ci * n_in, 2 * hid * n_in);  // bias, GELU
    for (std::size_t i = 0; i < kBranches; ++i) {
      const std::string d = "dw" + std::to_string(i + 1);
      sink.add<T>(m, d, CostKind::kConv,
                  {{d + ".weight", &dw_weight[i]}, {d + ".bias", &dw_bias[i]}},
                  9 * hid * n, 2 * hid * n);
    }
    if (stride_ != 1) sink.add_plain(m, "gate_pool", CostKind::kElementwise, 0, hid * n_in);
    gate.cost(m + ".gate", ho, wo, sink);
    se.cost(m + ".se", ho, wo, sink);
    sink.add<T>(m, "proj", CostKind::kConv,
                {{"proj.weight", &proj_weight}, {"proj.bias", &proj_bias}},
                co * hid * n, 2 * co * n);  // bias, residual
    if (has_projection_shortcut()) {
      sink.add<T>(m, "shortcut", CostKind::kConv,
                  {{"shortcut.weight", &shortcut_weight},
                   {"shortcut.bias", &shortcut_bias}},
                  co * ci * n, co * n + (stride_ != 1 ? ci * n_in : 0));
    }
  }

  SampleNorm<T> norm;
  Tensor<T> expand_weight, expand_bias;
  Tensor<T> dw_weight[kBranches], dw_bias[kBranches];
  GateUnit<T> gate;
  SqueezeExcite<T> se;
  Tensor<T> proj_weight, proj_bias;
  Tensor<T> shortcut_weight, shortcut_bias;

 private:
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  std::size_t stride_ = 1;
};

/// conv3x3(3 -> C, stride 2) -> GELU -> conv3x3(C -> C).
template <typename T>
class Stem {
 public:
  Stem() = default;
  Stem(std::size_t in_channels, std::size_t width, ParamInit& init)
      : conv1_weight(init.conv_weight<T>({width, in_channels, 3, 3})),
        conv1_bias(init.zeros<T>({width})),
        conv2_weight(init.conv_weight<T>({width, width, 3, 3})),
        conv2_bias(init.zeros<T>({width})) {}

  std::size_t width() const { return conv1_weight.dim(0); }

  Tensor<T> forward(const Tensor<T>& image) const {
    if (image.ndim() != 4 || image.dim(1) != conv1_weight.dim(1)) {
      throw Error(ErrorCode::kShapeMismatch,
                  "stem expects [b," + std::to_string(conv1_weight.dim(1)) +
                      ",h,w], got " + to_string(image.shape()));
    }
    if (image.dim(2) % 2 || image.dim(3) % 2) {
      throw Error(ErrorCode::kOddInput,
                  "stem needs even height and width, got " + to_string(image.shape()));
    }
    auto y = gelu(conv2d(image, conv1_weight, conv1_bias, {.stride = 2, .padding = 1}));
    return conv2d(y, conv2_weight, conv2_bias, {.padding = 1});
  }

  void parameters(const std::string& prefix, ParamList<T>& out) {
    out.emplace_back(prefix + ".conv1.weight", &conv1_weight);
    out.emplace_back(prefix + ".conv1.bias", &conv1_bias);
    out.emplace_back(prefix + ".conv2.weight", &conv2_weight);
    out.emplace_back(prefix + ".conv2.bias", &conv2_bias);
  }

  void cost(const std::string& m, std::size_t h, std::size_t w, CostSink& sink) const {
    const std::uint64_t c = width(), cin = conv1_weight.dim(1);
    const std::uint64_t n = (h / 2) * (w / 2);
    sink.add<T>(m, "conv1", CostKind::kConv,
                {{"conv1.weight", &conv1_weight}, {"conv1.bias", &conv1_bias}},
                9 * cin * c * n, 2 * c * n);  // bias, GELU
    sink.add<T>(m, "conv2", CostKind::kConv,
                {{"conv2.weight", &conv2_weight}, {"conv2.bias", &conv2_bias}},
                9 * c * c * n, c * n);
  }

  Tensor<T> conv1_weight, conv1_bias, conv2_weight, conv2_bias;
};

}  // namespace accvit
