#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "lmn/gradcheck.hpp"
#include "lmn/ops.hpp"
#include "lmn/rng.hpp"

namespace lmn {
namespace {

constexpr float kInf = std::numeric_limits<float>::infinity();

template <class T>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return BasicTensor<T>::from(std::move(shape), std::span<const T>(v), requires_grad);
}

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

TEST(Ops, MatmulByHand) {
  const auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const auto b = Tensor::from({2, 1}, {1, 1});
  EXPECT_EQ(values(matmul(a, b)), (std::vector<float>{3, 7}));
}

TEST(Ops, BatchedMatmulMatchesPerBatchProducts) {
  Rng rng(1);
  const auto a = random_tensor<float>({3, 2, 4}, rng, false);
  const auto b = random_tensor<float>({3, 4, 5}, rng, false);
  const auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double acc = 0;
        for (std::size_t k = 0; k < 4; ++k) acc += a[(n * 2 + i) * 4 + k] * b[(n * 4 + k) * 5 + j];
        EXPECT_NEAR(c[(n * 2 + i) * 5 + j], acc, 1e-5);
      }
}

TEST(Ops, LargeMatmulMatchesNaiveLoop) {
  Rng rng(2);
  const auto a = random_tensor<float>({33, 47}, rng, false);
  const auto b = random_tensor<float>({47, 29}, rng, false);
  const auto c = matmul(a, b);
  for (std::size_t i = 0; i < 33; ++i)
    for (std::size_t j = 0; j < 29; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 47; ++k) acc += static_cast<double>(a[i * 47 + k]) * b[k * 29 + j];
      EXPECT_NEAR(c[i * 29 + j], acc, 1e-4);
    }
}

TEST(Ops, SoftmaxExamples) {
  EXPECT_EQ(values(softmax(Tensor::from({2}, {0, 0}))), (std::vector<float>{0.5f, 0.5f}));
  EXPECT_EQ(values(softmax(Tensor::from({2}, {0, -kInf}))), (std::vector<float>{1.0f, 0.0f}));
}

TEST(Ops, SoftmaxRowFullyMaskedIsContractError) {
  EXPECT_THROW(softmax(Tensor::from({2}, {-kInf, -kInf})), ContractError);
}

TEST(Ops, SoftmaxRowsSumToOneAndMaskedAreExactZero) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = rng.uniform_int(1, 12);
    std::vector<float> v(4 * n);
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = i % n != 0 && rng.uniform(0, 1) < 0.4 ? -kInf : static_cast<float>(rng.normal(0, 5));
    }
    const auto y = softmax(Tensor::from({4, n}, std::span<const float>(v)));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (v[r * n + j] == -kInf) EXPECT_EQ(y[r * n + j], 0.0f);
        s += y[r * n + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Ops, ShapeMismatchNamesBothShapes) {
  try {
    (void)add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3, 2]"), std::string::npos) << msg;
  }
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Ops, ConcatThenSplitIsIdentity) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape s{rng.uniform_int(1, 4), rng.uniform_int(2, 6), rng.uniform_int(1, 3)};
    const auto x = random_tensor<float>(s, rng, false);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      if (s[axis] < 2) continue;
      const std::size_t cut = rng.uniform_int(1, s[axis] - 1);
      const auto back = concat(split(x, axis, {cut, s[axis] - cut}), axis);
      EXPECT_EQ(back.shape(), s);
      EXPECT_EQ(values(back), values(x));
    }
  }
}

TEST(Ops, IndexSelectNegativeIndexGivesZeroSlice) {
  const auto x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  const std::vector<std::int64_t> idx{2, -1, 0};
  EXPECT_EQ(values(index_select<float>(x, 0, idx)), (std::vector<float>{5, 6, 0, 0, 1, 2}));
}

TEST(Ops, TransposeSwapsAxes) {
  const auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto y = transpose(x, 0, 1);
  EXPECT_EQ(y.shape(), (Shape{3, 2}));
  EXPECT_EQ(values(y), (std::vector<float>{1, 4, 2, 5, 3, 6}));
}

TEST(Ops, DepthwiseConvMatchesPerChannelTaps) {
  const auto x = Tensor::from({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});  // [2m=4, C=2]
  const auto k = Tensor::from({2, 2}, {1, 10, 2, 20});            // channel c: (left, right)
  EXPECT_EQ(values(depthwise_conv1d_k2s2(x, k)), (std::vector<float>{1 + 30, 4 + 80, 5 + 70, 12 + 160}));
}

TEST(Ops, TransposedConvWidensByKernelMinusOne) {
  // y[j] = sum_m x[j - m] * w[m] with scalar channels.
  const auto x = Tensor::from({2, 1}, {1, 2});
  const auto w = Tensor::from({3, 1, 1}, {1, 10, 100});
  EXPECT_EQ(values(conv_transpose1d(x, w, Tensor())), (std::vector<float>{1, 12, 120, 200}));
}

TEST(Ops, LayerNormZeroMeanUnitVariance) {
  Rng rng(5);
  const auto x = random_tensor<float>({3, 16}, rng, false);
  const auto y = layer_norm(x, Tensor::full({16}, 1), Tensor::zeros({16}));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 16; ++j) m += y[r * 16 + j];
    m /= 16;
    for (std::size_t j = 0; j < 16; ++j) v += (y[r * 16 + j] - m) * (y[r * 16 + j] - m);
    EXPECT_NEAR(m, 0, 1e-6);
    EXPECT_NEAR(v / 16, 1, 1e-3);
  }
}

TEST(Backward, LinearFunction) {
  auto w = Tensor::from({2}, {1, 2}, true);
  const auto x = Tensor::from({2}, {3, 4});
  sum(mul(w, x)).backward();
  EXPECT_EQ(std::vector<float>(w.grad().begin(), w.grad().end()), (std::vector<float>{3, 4}));
}

TEST(Backward, CrossEntropyClosedForm) {
  auto logits = Tensor::from({1, 2}, {0, 0}, true);
  const std::vector<std::int32_t> target{0};
  const auto loss = cross_entropy(logits, std::span<const std::int32_t>(target));
  EXPECT_NEAR(loss.item(), std::log(2.0), 1e-7);
  loss.backward();
  EXPECT_NEAR(logits.grad()[0], -0.5, 1e-7);
  EXPECT_NEAR(logits.grad()[1], 0.5, 1e-7);
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(scale(x, 2.0f).backward(), ContractError);
}

TEST(Backward, SecondCallOnReleasedGraphIsContractError) {
  auto x = Tensor::from({2}, {1, 2}, true);
  const auto loss = sum(mul(x, x));
  loss.backward();
  EXPECT_THROW(loss.backward(), ContractError);
}

TEST(Backward, GradientsAccumulateAcrossGraphsUntilReset) {
  auto x = Tensor::from({1}, {3}, true);
  sum(mul(x, x)).backward();
  sum(mul(x, x)).backward();
  EXPECT_FLOAT_EQ(x.grad()[0], 12.0f);
  x.zero_grad();
  sum(mul(x, x)).backward();
  EXPECT_FLOAT_EQ(x.grad()[0], 6.0f);
}

TEST(Backward, EveryReachableLeafGetsGrad) {
  Rng rng(6);
  auto a = random_tensor<float>({2, 3}, rng);
  auto b = random_tensor<float>({3, 2}, rng);
  auto unused = random_tensor<float>({2}, rng);
  sum(matmul(a, b)).backward();
  EXPECT_TRUE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  EXPECT_FALSE(unused.has_grad());
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  EXPECT_FALSE(sum(mul(x, x)).requires_grad());
}

TEST(GradCheck, ExactQuadratic) {
  auto x = Tensor64::from({1}, {3.0}, true);
  NamedParams<double> params{{"x", x}};
  const auto r = grad_check<double>([&] { return sum(mul(x, x)); }, params, 1e-3);
  EXPECT_LE(r.max_rel_error, 1e-5);
}

TEST(GradCheck, ExactQuadratic32Bit) {
  auto x = Tensor::from({1}, {3.0f}, true);
  NamedParams<float> params{{"x", x}};
  const auto r = grad_check<float>([&] { return sum(mul(x, x)); }, params, 1e-3);
  EXPECT_LE(r.max_rel_error, 1e-3);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  auto x = Tensor64::from({3}, {1.0, 2.0, 3.0}, true);
  NamedParams<double> params{{"x", x}};
  const auto r = grad_check<double>([] { return Tensor64::scalar(4.0); }, params, 1e-3);
  EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(GradCheck, NonFiniteLossNamesTheParameter) {
  auto x = Tensor64::from({1}, {0.0}, true);
  NamedParams<double> params{{"weights", x}};
  try {
    const auto f = [&] { return Tensor64::scalar(x[0] == 0.0 ? 0.0 : std::numeric_limits<double>::infinity()); };
    (void)grad_check<double>(f, params, 1e-3);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("weights"), std::string::npos) << e.what();
  }
}

// Every differentiable op against central differences on random small shapes.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  Rng rng(100 + static_cast<std::uint64_t>(GetParam()));
  using T = double;
  auto a = random_tensor<T>({2, 3, 4}, rng);
  auto b = random_tensor<T>({2, 3, 4}, rng);
  auto w = random_tensor<T>({4, 5}, rng);
  auto bias = random_tensor<T>({5}, rng);
  auto bm = random_tensor<T>({2, 4, 3}, rng);
  auto gain = random_tensor<T>({4}, rng);
  auto table = random_tensor<T>({6, 4}, rng);
  auto dk = random_tensor<T>({4, 2}, rng);
  auto cw = random_tensor<T>({8, 3}, rng);
  auto tw = random_tensor<T>({3, 4, 2}, rng);
  const auto probe = random_tensor<T>({2, 3, 5}, rng, false);
  const std::vector<std::uint8_t> keep{1, 0, 1};
  const std::vector<std::int64_t> pick{2, -1, 0, 0};
  const std::vector<std::int32_t> ids{0, 5, 3, 3, 1, 2};
  const std::vector<std::int32_t> targets{0, 1, 2, 3, 0, 1};

  NamedParams<T> params{{"a", a}, {"b", b}, {"w", w}, {"bias", bias}, {"bm", bm}, {"gain", gain}, {"table", table},
                        {"dk", dk}, {"cw", cw}, {"tw", tw}};
  const auto sq = [](const BasicTensor<T>& x) { return sum(mul(x, x)); };
  std::function<BasicTensor<T>()> f;
  switch (GetParam()) {
    case 0: f = [&] { return sq(add(a, b)); }; break;
    case 1: f = [&] { return sq(sub(a, b)); }; break;
    case 2: f = [&] { return sum(mul(a, b)); }; break;
    case 3: f = [&] { return sq(scale(a, T(0.7))); }; break;
    case 4: f = [&] { return sum(mul(linear(a, w, bias), probe)); }; break;
    case 5: f = [&] { return sq(matmul(a, bm)); }; break;
    case 6: f = [&] { return sq(transpose(reshape(a, {6, 4}), 0, 1)); }; break;
    case 7: f = [&] { return sum(mul(concat<T>({a, b}, 1), concat<T>({b, a}, 1))); }; break;
    case 8: f = [&] { return sq(slice(a, 2, 1, 2)); }; break;
    case 9: f = [&] { return sq(index_select<T>(a, 2, pick)); }; break;
    case 10: f = [&] { return sum(mul(softmax(a), b)); }; break;
    case 11: f = [&] { return sum(mul(layer_norm(a, gain, reshape(slice(reshape(bias, {5}), 0, 0, 4), {4})), b)); }; break;
    case 12: f = [&] { return sq(embedding(table, std::span<const std::int32_t>(ids), {2, 3})); }; break;
    case 13: f = [&] { return cross_entropy(linear(a, w, bias), std::span<const std::int32_t>(targets)); }; break;
    case 14: f = [&] { return sq(depthwise_conv1d_k2s2(reshape(a, {2, 6, 2}), reshape(slice(reshape(dk, {8}), 0, 0, 4), {2, 2}))); }; break;
    case 15: f = [&] { return sq(conv1d_k2s2(reshape(a, {3, 2, 4}), cw, Tensor64())); }; break;
    case 16: f = [&] { return sq(conv_transpose1d(a, tw, Tensor64())); }; break;
    case 17: f = [&] { return sq(masked_fill(a, std::span<const std::uint8_t>(keep), T(0), 4)); }; break;
    case 18: f = [&] { return sq(add_bias(linear(a, w, Tensor64()), bias)); }; break;
    case 19: f = [&] { return sum(mul(relu(a), b)); }; break;
    case 20: f = [&] { return mean(mul(a, b)); }; break;
    case 21: f = [&] { return sum(mul(softmax(dot_scores(a, b, T(0.5), std::int64_t{0})), dot_scores(b, a, T(1)))); }; break;
  }
  const auto r = grad_check<T>(f, params, 1e-4);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "] analytic " << r.analytic << " numeric " << r.numeric;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, 22));

TEST(Determinism, SameSeedSameDraws) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.normal(), b.normal());
}

}  // namespace
}  // namespace lmn
