#include <gtest/gtest.h>

#include <cmath>

#include "accvit/train.hpp"

using namespace accvit;

namespace {

std::vector<double> run(std::size_t steps, double lr, std::uint64_t seed = 0) {
  AccVitModel<float> m(variant("micro", 2), seed);
  TrainOptions opt;
  opt.steps = steps;
  opt.lr = lr;
  return train_smoke(m, brightness_dataset(4, 32, seed), opt);
}

}  // namespace

TEST(Train, DatasetAlternatesLabels) {
  const auto d = brightness_dataset(6, 8, 1);
  EXPECT_EQ(d.images.shape(), (Shape{6, 3, 8, 8}));
  EXPECT_EQ(d.labels, (std::vector<std::size_t>{0, 1, 0, 1, 0, 1}));
  const std::size_t per = 3 * 64;
  double dark = 0, bright = 0;
  for (std::size_t i = 0; i < per; ++i) {
    dark += d.images.data()[i];
    bright += d.images.data()[per + i];
  }
  EXPECT_LT(dark, bright);
}

TEST(Train, ZeroLearningRateKeepsLossConstant) {
  const auto trace = run(4, 0.0);
  ASSERT_EQ(trace.size(), 4u);
  for (auto l : trace) EXPECT_NEAR(l, trace[0], 1e-6);
  EXPECT_NEAR(*smoothed_loss_ratio(trace), 1.0, 1e-6);
}

TEST(Train, ZeroStepsGiveEmptyTrace) {
  const auto trace = run(0, 0.01);
  EXPECT_TRUE(trace.empty());
  EXPECT_FALSE(smoothed_loss_ratio(trace).has_value());
}

TEST(Train, Deterministic) {
  EXPECT_EQ(run(3, 0.01, 5), run(3, 0.01, 5));
}

TEST(Train, LossFallsOnShortRun) {
  const auto trace = run(30, 0.01);
  for (auto l : trace) ASSERT_TRUE(std::isfinite(l));
  EXPECT_LT(trace.back(), trace.front());
}

TEST(Train, RatioDefinition) {
  std::vector<double> t(20, 1.0);
  t[0] = 4.0;
  EXPECT_DOUBLE_EQ(*smoothed_loss_ratio(t), 0.25);
  EXPECT_DOUBLE_EQ(*smoothed_loss_ratio({2.0, 1.0}), 0.75);
  EXPECT_FALSE(smoothed_loss_ratio({0.0, 1.0}).has_value());
}
