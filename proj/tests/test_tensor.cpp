#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "accvit/gradcheck.hpp"
#include "accvit/ops.hpp"
#include "accvit/verify.hpp"
#include "oracles.hpp"

using namespace accvit;
using F = Tensor<float>;
using D = Tensor<double>;

namespace {

template <typename T>
std::vector<double> vals(const Tensor<T>& t) {
  return oracle::to_vec(t);
}

template <typename E>
void expect_code(E&& fn, ErrorCode code) {
  try {
    fn();
    FAIL() << "expected " << error_name(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

}  // namespace

TEST(Tensor, ConstructionAndAccess) {
  auto t = F::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.ndim(), 2u);
  EXPECT_EQ(t.dim(-1), 3u);
  EXPECT_FLOAT_EQ(t.at({1, 2}), 6.0f);
  expect_code([] { F::from({2, 2}, {1, 2, 3}); }, ErrorCode::kShapeMismatch);
  expect_code([&] { (void)t.item(); }, ErrorCode::kNotScalar);
}

TEST(Matmul, IdentityExample) {
  auto y = matmul(F::from({2, 2}, {1, 0, 0, 1}), F::from({2, 2}, {3, 4, 5, 6}));
  EXPECT_EQ(vals(y), (std::vector<double>{3, 4, 5, 6}));
}

TEST(Matmul, RowTimesColumn) {
  auto y = matmul(F::from({1, 2}, {1, 2}), F::from({2, 1}, {3, 4}));
  ASSERT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_FLOAT_EQ(y.data()[0], 11.0f);
}

TEST(Matmul, RandomAgainstTripleLoop) {
  std::mt19937_64 rng(1);
  auto a = oracle::random<float>({4, 5}, rng), b = oracle::random<float>({5, 3}, rng);
  EXPECT_LT(oracle::max_abs_diff(vals(matmul(a, b)), oracle::matmul(vals(a), vals(b), 4, 5, 3)),
            1e-6);
}

TEST(Matmul, HundredRandomShapesWithBatchBroadcast) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> dim(1, 9), bat(1, 3);
  for (int n = 0; n < 120; ++n) {
    const std::size_t m = dim(rng), k = dim(rng), p = dim(rng), bs = bat(rng);
    auto a = oracle::random<float>({bs, m, k}, rng);
    auto b = oracle::random<float>({k, p}, rng);
    auto y = matmul(a, b);
    ASSERT_EQ(y.shape(), (Shape{bs, m, p}));
    const auto av = vals(a), yv = vals(y);
    for (std::size_t i = 0; i < bs; ++i) {
      std::vector<double> ai(av.begin() + i * m * k, av.begin() + (i + 1) * m * k);
      std::vector<double> yi(yv.begin() + i * m * p, yv.begin() + (i + 1) * m * p);
      ASSERT_LT(oracle::max_abs_diff(yi, oracle::matmul(ai, vals(b), m, k, p)), 1e-5)
          << m << "x" << k << "x" << p;
    }
  }
}

TEST(Matmul, InnerMismatchThrows) {
  expect_code([] { matmul(F::zeros({2, 3}), F::zeros({4, 2})); }, ErrorCode::kShapeMismatch);
}

TEST(Matmul, BackwardRule) {
  std::mt19937_64 rng(3);
  auto a = oracle::random<double>({3, 4}, rng, -1, 1, true);
  auto b = oracle::random<double>({4, 2}, rng, -1, 1, true);
  backward(sum(matmul(a, b)));
  // d/dA sum(AB) = 1 * B^T, d/dB = A^T * 1
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 4; ++p)
      EXPECT_NEAR(a.grad()[i * 4 + p], b.at({p, 0}) + b.at({p, 1}), 1e-12);
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t j = 0; j < 2; ++j)
      EXPECT_NEAR(b.grad()[p * 2 + j], a.at({0, p}) + a.at({1, p}) + a.at({2, p}), 1e-12);
}

TEST(Conv2d, PointwiseScaling) {
  auto y = conv2d(F::full({1, 1, 3, 3}, 1.0f), F::full({1, 1, 1, 1}, 2.0f));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (auto v : y.data()) EXPECT_EQ(v, 2.0f);
}

TEST(Conv2d, DilatedImpulseResponse) {
  auto x = F::zeros({1, 1, 5, 5});
  x.mutable_data()[12] = 1.0f;
  std::vector<float> k(9);
  std::iota(k.begin(), k.end(), 1.0f);
  auto y = conv2d(x, F::from({1, 1, 3, 3}, k), std::nullopt, {.padding = 2, .dilation = 2});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 5, 5}));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      float want = 0;
      // Correlation flips the kernel position relative to the impulse.
      if (i % 2 == 0 && j % 2 == 0) want = k[(2 - i / 2) * 3 + (2 - j / 2)];
      EXPECT_EQ(y.at({0, 0, i, j}), want) << i << "," << j;
    }
}

TEST(Conv2d, DepthwiseDilation3AgainstNestedLoops) {
  std::mt19937_64 rng(4);
  auto x = oracle::random<float>({2, 4, 8, 8}, rng);
  auto w = oracle::random<float>({4, 1, 3, 3}, rng);
  auto y = conv2d(x, w, std::nullopt, {.padding = 3, .dilation = 3, .groups = 4});
  const oracle::ConvSpec s{2, 4, 8, 8, 4, 3, 3, 1, 3, 3, 4};
  EXPECT_LT(oracle::max_abs_diff(vals(y), oracle::conv2d(vals(x), vals(w), nullptr, s)), 1e-5);
}

TEST(Conv2d, HundredRandomConfigurations) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> g(1, 3), c(1, 3), hw(1, 9), k(1, 3), st(1, 2),
      pd(0, 3), dl(1, 3);
  int tested = 0;
  while (tested < 150) {
    oracle::ConvSpec s{};
    s.groups = g(rng);
    s.cin = s.groups * c(rng);
    s.cout = s.groups * c(rng);
    s.b = c(rng);
    s.h = hw(rng);
    s.w = hw(rng);
    s.kh = k(rng);
    s.kw = k(rng);
    s.stride = st(rng);
    s.pad = pd(rng);
    s.dil = dl(rng);
    if (s.h + 2 * s.pad < s.dil * (s.kh - 1) + 1 || s.w + 2 * s.pad < s.dil * (s.kw - 1) + 1)
      continue;
    auto x = oracle::random<float>({s.b, s.cin, s.h, s.w}, rng);
    auto w = oracle::random<float>({s.cout, s.cin / s.groups, s.kh, s.kw}, rng);
    auto bias = oracle::random<float>({s.cout}, rng);
    auto y = conv2d(x, w, bias,
                    {.stride = s.stride, .padding = s.pad, .dilation = s.dil, .groups = s.groups});
    ASSERT_EQ(y.shape(), (Shape{s.b, s.cout, s.oh(), s.ow()}));
    const auto bv = vals(bias);
    ASSERT_LT(oracle::max_abs_diff(vals(y), oracle::conv2d(vals(x), vals(w), &bv, s)), 1e-5)
        << "groups " << s.groups << " k " << s.kh << "x" << s.kw << " stride " << s.stride;
    ++tested;
  }
}

TEST(Conv2d, Errors) {
  expect_code([] { conv2d(F::zeros({1, 3, 4, 4}), F::zeros({2, 1, 1, 1}), std::nullopt,
                          {.groups = 2}); },
              ErrorCode::kInvalidGroups);
  expect_code([] { conv2d(F::zeros({1, 2, 4, 4}), F::zeros({2, 3, 1, 1})); },
              ErrorCode::kShapeMismatch);
  expect_code([] { conv2d(F::zeros({1, 1, 2, 2}), F::zeros({1, 1, 5, 5})); },
              ErrorCode::kShapeMismatch);
}

TEST(Conv2d, CountsMacs) {
  CountMacs counter;
  conv2d(F::zeros({1, 2, 4, 4}), F::zeros({3, 2, 1, 1}), F::zeros({3}));
  EXPECT_EQ(counter.macs(), 2u * 3u * 16u);
}

TEST(Softmax, Examples) {
  auto u = softmax(F::zeros({3}), 0);
  for (auto v : u.data()) EXPECT_NEAR(v, 1.0 / 3, 1e-7);
  auto big = softmax(F::from({2}, {1000, 1000}), 0);
  EXPECT_EQ(big.data()[0], 0.5f);
  EXPECT_EQ(big.data()[1], 0.5f);
  auto r = softmax(D::from({3}, {1, 2, 3}), 0);
  const double s = std::exp(-2.0) + std::exp(-1.0) + 1.0;
  EXPECT_NEAR(r.data()[0], std::exp(-2.0) / s, 1e-7);
  EXPECT_NEAR(r.data()[1], std::exp(-1.0) / s, 1e-7);
  EXPECT_NEAR(r.data()[2], 1.0 / s, 1e-7);
}

TEST(Softmax, RowsSumToOneAnyAxis) {
  std::mt19937_64 rng(6);
  auto x = oracle::random<float>({3, 4, 5}, rng, -20, 20);
  for (int axis = 0; axis < 3; ++axis) {
    auto y = softmax(x, axis);
    auto moved = permute(y, axis == 0 ? std::vector<std::size_t>{1, 2, 0}
                                      : axis == 1 ? std::vector<std::size_t>{0, 2, 1}
                                                  : std::vector<std::size_t>{0, 1, 2});
    const auto n = x.dim(axis);
    const auto v = vals(moved);
    for (std::size_t r = 0; r < v.size() / n; ++r) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        EXPECT_GT(v[r * n + i], 0.0 - 1e-12);
        s += v[r * n + i];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
  EXPECT_LT(oracle::max_abs_diff(vals(softmax(x, -1)), oracle::softmax_rows(vals(x), 5)), 1e-6);
}

TEST(LayerNorm, Examples) {
  auto c = layernorm(F::full({4}, 3.0f), F::full({4}, 1.0f), F::zeros({4}), 1e-5);
  for (auto v : c.data()) EXPECT_EQ(v, 0.0f);
  auto two = layernorm<double>(D::from({2}, {1, 3}), std::nullopt, std::nullopt, 0.0);
  EXPECT_DOUBLE_EQ(two.data()[0], -1.0);
  EXPECT_DOUBLE_EQ(two.data()[1], 1.0);
  std::mt19937_64 rng(7);
  auto x = oracle::random<double>({16}, rng, -3, 3);
  auto y = vals(layernorm<double>(x, std::nullopt, std::nullopt, 1e-5));
  double mu = 0, var = 0;
  for (double v : y) mu += v / 16;
  for (double v : y) var += (v - mu) * (v - mu) / 16;
  EXPECT_LT(std::abs(mu), 1e-6);
  EXPECT_LT(std::abs(var - 1), 1e-3);
}

TEST(LayerNorm, AffineAgainstOracleAndErrors) {
  std::mt19937_64 rng(8);
  auto x = oracle::random<float>({3, 6}, rng), g = oracle::random<float>({6}, rng),
       b = oracle::random<float>({6}, rng);
  EXPECT_LT(oracle::max_abs_diff(vals(layernorm(x, g, b, 1e-5)),
                                 oracle::layernorm_rows(vals(x), 6, vals(g), vals(b), 1e-5)),
            1e-5);
  expect_code([&] { layernorm(x, F::zeros({5}), b, 1e-5); }, ErrorCode::kShapeMismatch);
}

TEST(Backward, SumAndSquare) {
  auto x = D::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(x));
  for (auto g : x.grad()) EXPECT_EQ(g, 1.0);
  auto y = D::from({3}, {1, 2, 3}, true);
  backward(sum(mul(y, y)));
  EXPECT_EQ(vals(*y.grad_tensor()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, FanOutAccumulates) {
  auto x = D::from({2}, {1.5, -2}, true);
  auto y = add(x, scale(x, 3.0));
  backward(sum(mul(y, x)));  // 4 x^2 -> 8 x
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -16.0);
}

TEST(Backward, Errors) {
  auto x = D::from({2}, {1, 2}, true);
  expect_code([&] { backward(x); }, ErrorCode::kNotScalar);
  expect_code([] { backward(sum(D::from({2}, {1, 2}))); }, ErrorCode::kDetachedTensor);
  {
    NoGradGuard guard;
    auto y = sum(x);
    EXPECT_FALSE(y.requires_grad());
  }
}

TEST(Backward, Linearity) {
  std::mt19937_64 rng(9);
  auto x = oracle::random<double>({2, 5}, rng, -1, 1, true);
  auto f = [&] { return sum(gelu(x)); };
  auto g = [&] { return sum(mul(sigmoid(x), x)); };
  backward(f());
  const auto gf = vals(*x.grad_tensor());
  x.zero_grad();
  backward(g());
  const auto gg = vals(*x.grad_tensor());
  x.zero_grad();
  backward(add(scale(f(), 2.5), scale(g(), -0.75)));
  const auto gc = vals(*x.grad_tensor());
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], 2.5 * gf[i] - 0.75 * gg[i], 1e-6);
}

TEST(Elementwise, LoopOracles) {
  std::mt19937_64 rng(10);
  auto x = oracle::random<double>({3, 4}, rng, -3, 3);
  auto y = oracle::random<double>({4}, rng, -3, 3);
  const auto xv = vals(x), yv = vals(y);
  const auto ge = vals(gelu(x)), si = vals(sigmoid(x)), re = vals(relu(x));
  const auto ad = vals(add(x, y)), mu = vals(mul(x, y)), sb = vals(sub(x, y));
  const auto sc = vals(scale(x, 0.5)), as = vals(add_scalar(x, -2.0));
  for (std::size_t i = 0; i < xv.size(); ++i) {
    EXPECT_NEAR(ge[i], oracle::gelu(xv[i]), 1e-12);
    EXPECT_NEAR(si[i], oracle::sigmoid(xv[i]), 1e-12);
    EXPECT_EQ(re[i], std::max(0.0, xv[i]));
    EXPECT_EQ(ad[i], xv[i] + yv[i % 4]);
    EXPECT_EQ(sb[i], xv[i] - yv[i % 4]);
    EXPECT_EQ(mu[i], xv[i] * yv[i % 4]);
    EXPECT_EQ(sc[i], xv[i] * 0.5);
    EXPECT_EQ(as[i], xv[i] - 2.0);
  }
}

TEST(ShapeOps, LoopOracles) {
  std::vector<double> v(24);
  std::iota(v.begin(), v.end(), 0.0);
  auto x = D::from({2, 3, 4}, v);
  EXPECT_EQ(vals(reshape(x, {4, 6})), v);
  auto p = permute(x, {2, 0, 1});
  ASSERT_EQ(p.shape(), (Shape{4, 2, 3}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(p.at({k, i, j}), x.at({i, j, k}));
  auto s = slice(x, 1, 1, 2);
  ASSERT_EQ(s.shape(), (Shape{2, 2, 4}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(s.at({i, j, k}), x.at({i, j + 1, k}));
  auto c = concat<double>({x, s}, 1);
  ASSERT_EQ(c.shape(), (Shape{2, 5, 4}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_EQ(c.at({i, 2, k}), x.at({i, 2, k}));
      EXPECT_EQ(c.at({i, 4, k}), x.at({i, 2, k}));
    }
  expect_code([&] { reshape(x, {5, 5}); }, ErrorCode::kShapeMismatch);
}

TEST(Pooling, LoopOracles) {
  std::mt19937_64 rng(11);
  auto x = oracle::random<double>({2, 3, 4, 6}, rng);
  auto g = global_avg_pool(x);
  ASSERT_EQ(g.shape(), (Shape{2, 3}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 6; ++j) s += x.at({b, c, i, j});
      EXPECT_NEAR(g.at({b, c}), s / 24, 1e-12);
    }
  auto a = avg_pool2d(x, 2);
  ASSERT_EQ(a.shape(), (Shape{2, 3, 2, 3}));
  EXPECT_NEAR(a.at({1, 2, 1, 2}),
              (x.at({1, 2, 2, 4}) + x.at({1, 2, 2, 5}) + x.at({1, 2, 3, 4}) +
               x.at({1, 2, 3, 5})) / 4,
              1e-12);
}

TEST(Linear, LoopOracleAndMacs) {
  std::mt19937_64 rng(12);
  auto x = oracle::random<float>({2, 3, 8}, rng), w = oracle::random<float>({4, 8}, rng),
       b = oracle::random<float>({4}, rng);
  CountMacs counter;
  auto y = linear(x, w, b);
  EXPECT_EQ(counter.macs(), 6u * 8u * 4u);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 4}));
  EXPECT_LT(oracle::max_abs_diff(vals(y), oracle::linear(vals(x), vals(w), vals(b), 6, 8, 4)),
            1e-5);
}

TEST(CrossEntropy, SmoothedOracle) {
  std::mt19937_64 rng(13);
  auto z = oracle::random<double>({3, 4}, rng, -2, 2);
  const std::vector<std::size_t> labels{1, 0, 3};
  const double eps = 0.1;
  double want = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    double lse = 0;
    for (std::size_t i = 0; i < 4; ++i) lse += std::exp(z.at({r, i}));
    lse = std::log(lse);
    for (std::size_t i = 0; i < 4; ++i) {
      const double q = (i == labels[r] ? 1 - eps : 0) + eps / 4;
      want -= q * (z.at({r, i}) - lse);
    }
  }
  EXPECT_NEAR(cross_entropy(z, labels, eps).item(), want / 3, 1e-12);
}

class PrimitiveGradcheck : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradcheck, FiniteDifferences) {
  const auto cases = gradcheck_cases();
  const auto& c = cases.at(GetParam());
  const auto r = c.run();
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_error, c.composite ? kCompositeTolerance : kPrimitiveTolerance)
      << c.name << " worst " << r.worst_leaf;
}

INSTANTIATE_TEST_SUITE_P(All, PrimitiveGradcheck,
                         ::testing::Range<std::size_t>(0, gradcheck_cases().size()),
                         [](const auto& info) {
                           std::string n = gradcheck_cases()[info.param].name;
                           for (auto& ch : n)
                             if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
                           return n;
                         });
