#pragma once

// Full network: stem, four stages of (AtrousMBConv -> AtrousAttentionLayer)
// layers, and a GAP -> LN -> linear classifier. The six published variants
// plus a small "micro" variant for fast tests are available by name.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "accvit/attention.hpp"
#include "accvit/conv_blocks.hpp"
#include "accvit/cost.hpp"
#include "accvit/error.hpp"
#include "accvit/ops.hpp"
#include "accvit/params.hpp"
#include "accvit/tensor.hpp"

namespace accvit {

struct ModelConfig {
  std::string name;
  std::size_t stem_width = 64;
  std::array<std::size_t, 4> blocks{};
  std::array<std::size_t, 4> channels{};
  std::size_t head_dim = 32;
  std::size_t window = 7;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 1000;
  std::array<std::vector<std::size_t>, 4> dilations{
      std::vector<std::size_t>{2, 4, 8}, {2, 4}, {2}, {}};

  bool operator==(const ModelConfig&) const = default;
};

struct VariantInfo {
  ModelConfig config;
  // Published totals at 224x224; absent for the non-published micro variant.
  std::optional<double> published_params_m;
  std::optional<double> published_gmacs;
};

inline const std::vector<VariantInfo>& variant_table() {
  static const std::vector<VariantInfo> table = [] {
    auto make = [](std::string name, std::size_t stem, std::array<std::size_t, 4> b,
                   std::array<std::size_t, 4> c) {
      ModelConfig cfg;
      cfg.name = std::move(name);
      cfg.stem_width = stem;
      cfg.blocks = b;
      cfg.channels = c;
      return cfg;
    };
    return std::vector<VariantInfo>{
        {make("tiny", 64, {2, 3, 6, 2}, {64, 128, 256, 512}), 28.367, 5.694},
        {make("small", 64, {2, 3, 6, 2}, {96, 192, 384, 768}), 62.886, 11.59},
        {make("base", 64, {4, 6, 14, 2}, {96, 192, 384, 768}), 103.576, 22.316},
        {make("nano", 64, {1, 2, 4, 1}, {64, 128, 256, 512}), 16.649, 3.812},
        {make("pico", 48, {1, 2, 4, 1}, {48, 96, 192, 384}), 9.55, 2.217},
        {make("femto", 32, {1, 2, 4, 1}, {32, 64, 128, 256}), 4.4, 1.049},
        {make("micro", 16, {1, 1, 1, 1}, {16, 32, 64, 128}), std::nullopt,
         std::nullopt},
    };
  }();
  return table;
}

inline std::vector<std::string> variant_names() {
  std::vector<std::string> names;
  for (const auto& v : variant_table()) names.push_back(v.config.name);
  return names;
}

inline const VariantInfo& variant_info(const std::string& name) {
  for (const auto& v : variant_table()) {
    if (v.config.name == name) return v;
  }
  std::string valid;
  for (const auto& n : variant_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw Error(ErrorCode::kUnknownVariant,
              "unknown variant '" + name + "'; valid names: " + valid);
}

inline ModelConfig variant(const std::string& name,
                           std::optional<std::size_t> num_classes = std::nullopt) {
  ModelConfig cfg = variant_info(name).config;
  if (num_classes) cfg.num_classes = *num_classes;
  return cfg;
}

inline void validate(const ModelConfig& cfg) {
  auto fail = [](const std::string& msg) {
    throw Error(ErrorCode::kInvalidConfig, msg);
  };
  if (cfg.stem_width == 0 || cfg.num_classes == 0 || cfg.window == 0 ||
      cfg.head_dim == 0 || cfg.mlp_ratio == 0) {
    fail("stem width, classes, window, head_dim and mlp_ratio must be positive");
  }
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t c = cfg.channels[s];
    if (cfg.blocks[s] == 0 || c == 0) {
      fail("stage " + std::to_string(s + 1) + " needs at least one block and channel");
    }
    const std::size_t heads = heads_for(c, cfg.head_dim);
    if (c % heads) {
      fail("stage " + std::to_string(s + 1) + " width " + std::to_string(c) +
           " is not divisible by " + std::to_string(heads) + " heads");
    }
    for (auto d : cfg.dilations[s]) {
      if (d < 2) fail("dilation levels must be >= 2");
    }
  }
}

template <typename T>
struct AccVitLayer {
  AtrousMBConv<T> conv;
  AtrousAttentionLayer<T> attn;
};

template <typename T>
class AccVitModel {
 public:
  AccVitModel() = default;

  /// Deterministic build: parameters are drawn in a fixed order from `seed`.
  AccVitModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    validate(config_);
    ParamInit init(seed);
    stem = Stem<T>(3, config_.stem_width, init);
    std::size_t cin = config_.stem_width;
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t c = config_.channels[s];
      for (std::size_t l = 0; l < config_.blocks[s]; ++l) {
        AccVitLayer<T> layer;
        layer.conv = AtrousMBConv<T>(cin, c, l == 0 ? 2 : 1, init);
        layer.attn = AtrousAttentionLayer<T>(c, config_.dilations[s], config_.head_dim,
                                             config_.window, config_.mlp_ratio, init);
        stages[s].push_back(std::move(layer));
        cin = c;
      }
    }
    head_norm_gamma = init.ones<T>({cin});
    head_norm_beta = init.zeros<T>({cin});
    head_weight = init.trunc_normal<T>({config_.num_classes, cin});
    head_bias = init.zeros<T>({config_.num_classes});
  }

  const ModelConfig& config() const { return config_; }

  /// Checks the input resolution against the stage pyramid and dilations.
  void check_resolution(std::size_t h, std::size_t w) const {
    if (h % 32 || w % 32 || h == 0 || w == 0) {
      throw Error(ErrorCode::kIndivisibleDims,
                  "input " + std::to_string(h) + "x" + std::to_string(w) +
                      " must be divisible by 32");
    }
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t f = std::size_t{4} << s;
      for (auto d : config_.dilations[s]) {
        if ((h / f) % d || (w / f) % d) {
          throw Error(ErrorCode::kIndivisibleDims,
                      "stage " + std::to_string(s + 1) + " map " +
                          std::to_string(h / f) + "x" + std::to_string(w / f) +
                          " is not divisible by dilation " + std::to_string(d));
        }
      }
    }
  }

  /// Logits [b, classes]; `features` (if given) receives the stem output and
  /// every stage output.
  Tensor<T> forward(const Tensor<T>& images,
                    std::vector<Tensor<T>>* features = nullptr) const {
    if (images.ndim() != 4 || images.dim(1) != 3) {
      throw Error(ErrorCode::kShapeMismatch,
                  "expected images [b,3,h,w], got " + to_string(images.shape()));
    }
    check_resolution(images.dim(2), images.dim(3));
    auto x = stem.forward(images);
    if (features) features->push_back(x);
    for (const auto& stage : stages) {
      for (const auto& layer : stage) x = layer.attn.forward(layer.conv.forward(x));
      if (features) features->push_back(x);
    }
    return head(x);
  }

  Tensor<T> head(const Tensor<T>& x) const {
    auto pooled = layernorm(global_avg_pool(x), head_norm_gamma, head_norm_beta, 1e-5);
    return linear(pooled, head_weight, head_bias);
  }

  /// Every parameter exactly once, in build order.
  ParamList<T> named_parameters() {
    ParamList<T> out;
    stem.parameters("stem", out);
    for (std::size_t s = 0; s < 4; ++s) {
      for (std::size_t l = 0; l < stages[s].size(); ++l) {
        const std::string p = layer_name(s, l);
        stages[s][l].conv.parameters(p + ".conv", out);
        stages[s][l].attn.parameters(p + ".attn", out);
      }
    }
    out.emplace_back("head.norm.gamma", &head_norm_gamma);
    out.emplace_back("head.norm.beta", &head_norm_beta);
    out.emplace_back("head.fc.weight", &head_weight);
    out.emplace_back("head.fc.bias", &head_bias);
    return out;
  }

  std::size_t parameter_count() { return count_parameters(named_parameters()); }

  /// Analytic per-op cost of one image at h x w.
  CostSink cost(std::size_t h, std::size_t w) const {
    check_resolution(h, w);
    CostSink sink;
    stem.cost("stem", h, w, sink);
    std::size_t ch = h / 2, cw = w / 2;
    for (std::size_t s = 0; s < 4; ++s) {
      for (std::size_t l = 0; l < stages[s].size(); ++l) {
        const auto& layer = stages[s][l];
        const std::string p = layer_name(s, l);
        layer.conv.cost(p + ".conv", ch, cw, sink);
        ch = (ch - 1) / layer.conv.stride() + 1;
        cw = (cw - 1) / layer.conv.stride() + 1;
        layer.attn.cost(p + ".attn", ch, cw, sink);
      }
    }
    const std::uint64_t c = head_weight.dim(1), k = head_weight.dim(0);
    sink.add<T>("head", "pool", CostKind::kElementwise, {}, 0, c * ch * cw);
    sink.add<T>("head", "norm", CostKind::kElementwise,
                {{"norm.gamma", &head_norm_gamma}, {"norm.beta", &head_norm_beta}}, 0,
                6 * c, false);
    sink.add<T>("head", "fc", CostKind::kLinear,
                {{"fc.weight", &head_weight}, {"fc.bias", &head_bias}}, c * k, k, false);
    return sink;
  }

  static std::string layer_name(std::size_t stage, std::size_t layer) {
    return "stages." + std::to_string(stage + 1) + "." + std::to_string(layer);
  }

  Stem<T> stem;
  std::array<std::vector<AccVitLayer<T>>, 4> stages;
  Tensor<T> head_norm_gamma, head_norm_beta, head_weight, head_bias;

 private:
  ModelConfig config_;
};

}  // namespace accvit
