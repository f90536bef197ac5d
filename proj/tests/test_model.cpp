#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <set>

#include "accvit/model.hpp"
#include "accvit/verify.hpp"
#include "oracles.hpp"

using namespace accvit;
using F = Tensor<float>;

TEST(Variants, TableLookup) {
  const std::vector<std::string> published{"tiny", "small", "base", "nano", "pico", "femto"};
  for (const auto& n : published) {
    const auto& v = variant_info(n);
    EXPECT_EQ(v.config.name, n);
    ASSERT_TRUE(v.published_params_m.has_value());
    ASSERT_TRUE(v.published_gmacs.has_value());
    for (std::size_t s = 1; s < 4; ++s) EXPECT_GE(v.config.channels[s], v.config.channels[s - 1]);
    EXPECT_EQ(v.config.dilations[0], (std::vector<std::size_t>{2, 4, 8}));
    EXPECT_EQ(v.config.dilations[1], (std::vector<std::size_t>{2, 4}));
    EXPECT_EQ(v.config.dilations[2], (std::vector<std::size_t>{2}));
    EXPECT_TRUE(v.config.dilations[3].empty());
  }
  EXPECT_FALSE(variant_info("micro").published_params_m.has_value());
  const auto& tiny = variant("tiny");
  EXPECT_EQ(tiny.blocks, (std::array<std::size_t, 4>{2, 3, 6, 2}));
  EXPECT_EQ(tiny.channels, (std::array<std::size_t, 4>{64, 128, 256, 512}));
  EXPECT_EQ(variant("base").blocks, (std::array<std::size_t, 4>{4, 6, 14, 2}));
  EXPECT_EQ(variant("pico").stem_width, 48u);
  try {
    variant("bogus");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownVariant);
    EXPECT_NE(std::string(e.what()).find("femto"), std::string::npos);
  }
}

TEST(Variants, InvalidConfig) {
  auto cfg = variant("femto");
  cfg.channels[1] = 100;  // three heads, 100 % 3 != 0
  try {
    AccVitModel<float> m(cfg, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidConfig);
    EXPECT_NE(std::string(e.what()).find("divisible"), std::string::npos);
  }
  cfg = variant("femto");
  cfg.blocks[2] = 0;
  EXPECT_THROW(AccVitModel<float>(cfg, 0), Error);
}

TEST(Model, ClassifierRowsDifference) {
  AccVitModel<float> a(variant("femto", 10), 0), b(variant("femto", 1000), 0);
  EXPECT_EQ(b.parameter_count() - a.parameter_count(), 256u * 990u + 990u);
}

TEST(Model, SeedDeterminism) {
  AccVitModel<float> a(variant("micro"), 3), b(variant("micro"), 3), c(variant("micro"), 4);
  auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto x = pa[i].second->data(), y = pb[i].second->data(), z = pc[i].second->data();
    EXPECT_EQ(std::memcmp(x.data(), y.data(), x.size_bytes()), 0) << pa[i].first;
    any_diff = any_diff || std::memcmp(x.data(), z.data(), x.size_bytes()) != 0;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Model, InitializationRule) {
  AccVitModel<float> m(variant("micro"), 0);
  for (const auto& [name, t] : m.named_parameters()) {
    const auto v = t->data();
    const bool is_bias = name.ends_with("bias") || name.ends_with("beta") ||
                         name.ends_with("rel_table");
    const bool is_gain = name.ends_with("gamma");
    for (float x : v) {
      if (is_bias) ASSERT_EQ(x, 0.0f) << name;
      if (is_gain) ASSERT_EQ(x, 1.0f) << name;
    }
    if (name.ends_with("fc.weight") || name.ends_with("qkv.weight")) {
      for (float x : v) ASSERT_LE(std::abs(x), 0.04f + 1e-6f) << name;
    }
  }
}

TEST(Model, NamesAreUniqueAndUnaliased) {
  AccVitModel<float> m(variant("nano"), 0);
  std::set<std::string> names;
  std::set<const void*> storage;
  for (const auto& [name, t] : m.named_parameters()) {
    EXPECT_TRUE(names.insert(name).second) << name;
    EXPECT_TRUE(storage.insert(t->data().data()).second) << name;
  }
}

TEST(Model, SmallForwardShapes) {
  AccVitModel<float> m(variant("femto", 4), 0);
  std::mt19937_64 rng(1);
  std::vector<F> feats;
  auto y = m.forward(oracle::random<float>({2, 3, 64, 64}, rng), &feats);
  EXPECT_EQ(y.shape(), (Shape{2, 4}));
  const std::size_t want[] = {32, 16, 8, 4, 2};
  ASSERT_EQ(feats.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(feats[i].dim(2), want[i]);
}

TEST(Model, ConstantGrayImageIsBatchConsistent) {
  NoGradGuard guard;
  AccVitModel<float> m(variant("femto"), 2);
  auto y = m.forward(F::full({3, 3, 64, 64}, 0.25f));
  for (auto v : y.data()) ASSERT_TRUE(std::isfinite(v));
  for (std::size_t b = 1; b < 3; ++b)
    for (std::size_t k = 0; k < 1000; ++k) EXPECT_EQ(y.at({b, k}), y.at({0, k}));
}

TEST(Model, ResolutionErrors) {
  AccVitModel<float> m(variant("micro"), 0);
  for (std::size_t s : {48u, 100u, 0u}) {
    try {
      m.check_resolution(s, s);
      FAIL() << s;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kIndivisibleDims);
    }
  }
  // Any multiple of 32 satisfies the published dilation schedule.
  EXPECT_NO_THROW(m.check_resolution(32, 32));
  EXPECT_NO_THROW(m.check_resolution(96, 160));
  try {
    m.forward(F::zeros({1, 1, 64, 64}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

TEST(Model, EveryParameterReceivesGradient) {
  AccVitModel<float> m(variant("micro", 3), 5);
  std::mt19937_64 rng(5);
  auto x = oracle::random<float>({2, 3, 64, 64}, rng);
  const std::vector<std::size_t> labels{0, 2};
  backward(cross_entropy(m.forward(x), labels, 0.1f));
  for (const auto& [name, t] : m.named_parameters()) {
    ASSERT_TRUE(t->has_grad()) << name;
    double norm = 0;
    for (auto g : t->grad()) norm += std::abs(g);
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(Model, ShapesSuiteTiny224) {
  for (const auto& c : verify_shapes()) EXPECT_TRUE(c.passed) << c.name << ": " << c.detail;
}
