#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <vector>

#include "lmn/attention.hpp"
#include "lmn/gradcheck.hpp"

namespace lmn {
namespace {

template <class T = float>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return BasicTensor<T>::from(std::move(shape), std::span<const T>(v), requires_grad);
}

MemoryTensor<float> random_memory(std::size_t B, std::size_t L, std::size_t E, std::size_t levels, Rng& rng) {
  const auto s = LinearSummarizer<float>::init(E, true, rng);
  return parallel_memory(random_tensor({B, L, E}, rng), s, levels);
}

// Q, K, V rows for one-entry memories built by hand: [B=1, L=1, D, E].
Tensor rows(std::size_t D, std::size_t E, std::initializer_list<float> v) { return Tensor::from({1, 1, D, E}, std::vector<float>(v)); }

TEST(QkvProject, ZeroMemoryZeroBiasGivesZero) {
  Rng rng(1);
  QkvProjection<float> p = QkvProjection<float>::init(4, rng);
  p.bias = Tensor::zeros({12});
  const MemoryTensor<float> mem{Tensor::zeros({1, 3, 4, 4}), std::vector<std::uint8_t>(12, 1)};
  const auto qkv = qkv_project(mem, p);
  for (const auto* t : {&qkv.q, &qkv.k, &qkv.v})
    for (float v : t->data()) EXPECT_EQ(v, 0.0f);
}

TEST(QkvProject, IdentityBlocksCopyEntries) {
  Rng rng(2);
  const std::size_t E = 3;
  std::vector<float> w(E * 3 * E, 0.0f);
  for (std::size_t part = 0; part < 3; ++part)
    for (std::size_t i = 0; i < E; ++i) w[i * 3 * E + part * E + i] = 1.0f;
  const QkvProjection<float> p{Tensor::from({E, 3 * E}, std::span<const float>(w)), Tensor::zeros({3 * E})};
  const auto mem = random_memory(2, 6, E, 3, rng);
  const auto qkv = qkv_project(mem, p);
  for (std::size_t i = 0; i < mem.data.numel(); ++i) {
    EXPECT_EQ(qkv.q[i], mem.data[i]);
    EXPECT_EQ(qkv.k[i], mem.data[i]);
    EXPECT_EQ(qkv.v[i], mem.data[i]);
  }
}

TEST(QkvProject, MatchesPerEntryLoopAndRezeroesInvalid) {
  Rng rng(3);
  const std::size_t E = 4;
  const auto p = QkvProjection<float>::init(E, rng);
  const auto mem = random_memory(1, 7, E, 3, rng);
  const auto qkv = qkv_project(mem, p);
  const std::size_t D = mem.entries();
  for (std::size_t t = 0; t < 7; ++t)
    for (std::size_t i = 0; i < D; ++i)
      for (std::size_t part = 0; part < 3; ++part) {
        const Tensor& out = part == 0 ? qkv.q : part == 1 ? qkv.k : qkv.v;
        for (std::size_t j = 0; j < E; ++j) {
          double acc = p.bias[part * E + j];
          for (std::size_t c = 0; c < E; ++c) acc += static_cast<double>(mem.data[(t * D + i) * E + c]) * p.weight[c * 3 * E + part * E + j];
          const float got = out[(t * D + i) * E + j];
          if (mem.is_valid(t, i)) {
            EXPECT_NEAR(got, acc, 1e-5);
          } else {
            EXPECT_EQ(got, 0.0f);
          }
        }
      }
}

TEST(Scores, HandExamples) {
  const std::vector<std::uint8_t> valid{1, 1};
  // Level 1 query [1,0,0,0] against current key [2,0,0,0]: 2 / sqrt(4).
  const auto q = rows(2, 4, {0, 0, 0, 0, 1, 0, 0, 0});
  const auto k = rows(2, 4, {2, 0, 0, 0, 9, 9, 9, 9});
  const auto s = single_vector_scores(q, k, valid);
  EXPECT_FLOAT_EQ(s[1], 1.0f);
  const auto q2 = rows(2, 4, {0, 0, 0, 0, 0, 1, 0, 0});
  EXPECT_EQ(single_vector_scores(q2, k, valid)[1], 0.0f);
}

TEST(Scores, MatchNaiveDotProductsInBothOrientations) {
  Rng rng(4);
  const std::size_t B = 2, L = 9, E = 5;
  const auto mem = random_memory(B, L, E, 4, rng);
  const auto qkv = qkv_project(mem, QkvProjection<float>::init(E, rng));
  const std::size_t D = mem.entries();
  const auto lit = single_vector_scores(qkv.q, qkv.k, mem.valid, ScoreOrientation::literal);
  const auto swp = single_vector_scores(qkv.q, qkv.k, mem.valid, ScoreOrientation::swapped);
  const double scale = 1.0 / std::sqrt(static_cast<double>(E));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t i = 0; i < D; ++i) {
        const std::size_t row = (b * L + t) * D;
        double a = 0, c = 0;
        for (std::size_t e = 0; e < E; ++e) {
          a += static_cast<double>(qkv.q[(row + i) * E + e]) * qkv.k[row * E + e];
          c += static_cast<double>(qkv.q[row * E + e]) * qkv.k[(row + i) * E + e];
        }
        EXPECT_NEAR(lit[row + i], a * scale, 1e-5);
        EXPECT_NEAR(swp[row + i], c * scale, 1e-5);
      }
}

TEST(MaskSoftmax, Examples) {
  const auto two = mask_softmax(Tensor::from({1, 1, 2}, {0.3f, 0.3f}), std::vector<std::uint8_t>{1, 1});
  EXPECT_FLOAT_EQ(two[0], 0.5f);
  EXPECT_FLOAT_EQ(two[1], 0.5f);
  const auto one = mask_softmax(Tensor::from({1, 1, 3}, {0.3f, 7.0f, -2.0f}), std::vector<std::uint8_t>{1, 0, 0});
  EXPECT_EQ(one[0], 1.0f);
  EXPECT_EQ(one[1], 0.0f);
  EXPECT_EQ(one[2], 0.0f);
}

TEST(Attend, FirstPositionReturnsCurrentValue) {
  Rng rng(5);
  const auto mem = random_memory(2, 5, 4, 3, rng);
  const auto qkv = qkv_project(mem, QkvProjection<float>::init(4, rng));
  const auto out = attend(qkv, mem.valid);
  const std::size_t D = mem.entries();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t e = 0; e < 4; ++e) EXPECT_FLOAT_EQ(out.values[(b * 5) * 4 + e], qkv.v[(b * 5 * D) * 4 + e]);
}

TEST(WeightedSum, OneHotAndUniform) {
  const auto v = rows(2, 2, {1, 2, 5, 10});
  const auto one_hot = weighted_sum(Tensor::from({1, 1, 2}, {1, 0}), v);
  EXPECT_EQ(one_hot[0], 1.0f);
  EXPECT_EQ(one_hot[1], 2.0f);
  const auto uniform = weighted_sum(Tensor::from({1, 1, 2}, {0.5f, 0.5f}), v);
  EXPECT_EQ(uniform[0], 3.0f);
  EXPECT_EQ(uniform[1], 6.0f);
}

TEST(WeightedSum, MatchesTripleLoop) {
  Rng rng(6);
  const auto w = random_tensor({2, 3, 4}, rng);
  const auto v = random_tensor({2, 3, 4, 5}, rng);
  const auto out = weighted_sum(w, v);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t e = 0; e < 5; ++e) {
      double acc = 0;
      for (std::size_t i = 0; i < 4; ++i) acc += static_cast<double>(w[r * 4 + i]) * v[(r * 4 + i) * 5 + e];
      EXPECT_NEAR(out[r * 5 + e], acc, 1e-5);
    }
}

TEST(AttentionWeights, SumToOneWithExactZerosAtInvalid) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t L = rng.uniform_int(1, 40);
    const std::size_t E = rng.uniform_int(1, 6);
    const auto mem = random_memory(1, L, E, 6, rng);
    const auto out = single_vector_attention(mem, QkvProjection<float>::init(E, rng));
    const std::size_t D = mem.entries();
    for (std::size_t t = 0; t < L; ++t) {
      double s = 0;
      for (std::size_t i = 0; i < D; ++i) {
        const float w = out.weights[t * D + i];
        if (!mem.is_valid(t, i)) EXPECT_EQ(w, 0.0f);
        s += w;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(AttentionWeights, ArgmaxInvariantUnderPositiveQueryScaling) {
  Rng rng(8);
  const auto mem = random_memory(1, 31, 4, 5, rng);
  const auto qkv = qkv_project(mem, QkvProjection<float>::init(4, rng));
  const auto base = mask_softmax(single_vector_scores(qkv.q, qkv.k, mem.valid), mem.valid);
  const auto scaled = mask_softmax(single_vector_scores(scale(qkv.q, 3.5f), qkv.k, mem.valid), mem.valid);
  const std::size_t D = mem.entries();
  for (std::size_t t = 0; t < 31; ++t) {
    const auto row = [&](const Tensor& w) { return std::span<const float>(w.data()).subspan(t * D, D); };
    const auto a = row(base), b = row(scaled);
    EXPECT_EQ(std::max_element(a.begin(), a.end()) - a.begin(), std::max_element(b.begin(), b.end()) - b.begin());
  }
}

TEST(MultiBank, SingleBankIsIdentity) {
  Rng rng(9);
  const auto mem = random_memory(1, 5, 3, 3, rng);
  const auto combined = multi_bank_combine<float>({mem});
  EXPECT_EQ(combined.valid, mem.valid);
  EXPECT_EQ(combined.data.node(), mem.data.node());
}

TEST(MultiBank, TwoBanksDoubleEntriesAndValidCounts) {
  Rng rng(10);
  const auto x = random_tensor({1, 200, 2}, rng);
  const auto a = parallel_memory(x, LinearSummarizer<float>::init(2, true, rng), 9);
  const auto b = parallel_memory(x, LinearSummarizer<float>::init(2, true, rng), 9);
  const auto c = multi_bank_combine<float>({a, b});
  ASSERT_EQ(c.entries(), 20u);
  for (std::size_t t = 0; t < 200; ++t) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < 20; ++i) n += c.is_valid(t, i);
    EXPECT_EQ(n, 2u * std::popcount(t) + 2) << t;
  }
}

TEST(MultiBank, AttentionMatchesNaiveOracleOverAllEntries) {
  Rng rng(11);
  const std::size_t E = 3, L = 12;
  const auto x = random_tensor({1, L, E}, rng);
  const auto a = parallel_memory(x, LinearSummarizer<float>::init(E, true, rng), 4);
  const auto b = parallel_memory(x, DsConvSummarizer<float>::init(E, true, rng), 4);
  const auto p = QkvProjection<float>::init(E, rng);
  const auto combined = multi_bank_combine<float>({a, b});
  const auto out = single_vector_attention(combined, p).values;
  const std::size_t D = combined.entries();
  for (std::size_t t = 0; t < L; ++t) {
    const auto project = [&](std::size_t i, std::size_t part, std::size_t j) {
      double acc = p.bias[part * E + j];
      for (std::size_t c = 0; c < E; ++c) acc += static_cast<double>(combined.data[(t * D + i) * E + c]) * p.weight[c * 3 * E + part * E + j];
      return acc;
    };
    std::vector<double> score(D, -INFINITY);
    for (std::size_t i = 0; i < D; ++i) {
      if (!combined.is_valid(t, i)) continue;
      double s = 0;
      for (std::size_t j = 0; j < E; ++j) s += project(i, 0, j) * project(0, 1, j);
      score[i] = s / std::sqrt(static_cast<double>(E));
    }
    const double m = *std::max_element(score.begin(), score.end());
    double z = 0;
    for (double s : score) z += std::exp(s - m);
    for (std::size_t j = 0; j < E; ++j) {
      double v = 0;
      for (std::size_t i = 0; i < D; ++i)
        if (combined.is_valid(t, i)) v += std::exp(score[i] - m) / z * project(i, 2, j);
      EXPECT_NEAR(out[t * E + j], v, 1e-5);
    }
  }
}

TEST(MultiBank, MismatchedLengthsAreShapeError) {
  Rng rng(12);
  EXPECT_THROW(multi_bank_combine<float>({random_memory(1, 4, 2, 3, rng), random_memory(1, 5, 2, 3, rng)}), ShapeError);
}

// The fused pyramid path against gather -> combine -> project -> attend.
template <class T>
struct FusedCase {
  BasicTensor<T> h;
  std::vector<LinearSummarizer<T>> banks;
  QkvProjection<T> proj;

  BasicTensor<T> fused(ScoreOrientation o) const {
    std::vector<Pyramid<T>> projected;
    for (const auto& s : banks) projected.push_back(project_pyramid(build_pyramid(h, s), proj));
    return pyramid_attention(projected, MemoryLayout::of<T>(banks.front(), levels), o);
  }
  BasicTensor<T> literal(ScoreOrientation o) const {
    std::vector<MemoryTensor<T>> mems;
    for (const auto& s : banks) mems.push_back(parallel_memory(h, s, levels));
    return single_vector_attention(multi_bank_combine(mems), proj, o).values;
  }
  std::size_t levels = 0;
};

template <class T>
FusedCase<T> make_case(std::size_t B, std::size_t L, std::size_t E, std::size_t nb, Rng& rng) {
  FusedCase<T> c;
  c.h = random_tensor<T>({B, L, E}, rng, true);
  for (std::size_t k = 0; k < nb; ++k) c.banks.push_back(LinearSummarizer<T>::init(E, true, rng));
  c.proj = QkvProjection<T>::init(E, rng);
  c.levels = slot_levels(std::max<std::size_t>(L, 2));
  return c;
}

TEST(PyramidAttention, EqualsLiteralPath) {
  Rng rng(13);
  for (std::size_t L : {1, 2, 5, 8, 13, 32}) {
    for (std::size_t nb : {1, 2, 3}) {
      const auto c = make_case<float>(2, L, 4, nb, rng);
      for (auto o : {ScoreOrientation::literal, ScoreOrientation::swapped}) {
        const auto a = c.fused(o);
        const auto b = c.literal(o);
        ASSERT_EQ(a.shape(), b.shape());
        for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a[i], b[i], 1e-5) << "L=" << L << " nb=" << nb;
      }
    }
  }
}

TEST(PyramidAttention, GradientsEqualLiteralPath) {
  Rng rng(14);
  auto c = make_case<double>(1, 11, 3, 2, rng);
  const auto probe = random_tensor<double>({1, 11, 3}, rng);
  NamedParams<double> params{{"h", c.h}, {"qkv.weight", c.proj.weight}, {"qkv.bias", c.proj.bias}};
  for (std::size_t k = 0; k < c.banks.size(); ++k) c.banks[k].collect(params, "bank" + std::to_string(k));
  for (auto o : {ScoreOrientation::literal, ScoreOrientation::swapped}) {
    const auto grads = [&](bool fused) {
      for (auto& [n, p] : params) p.zero_grad();
      sum(mul(fused ? c.fused(o) : c.literal(o), probe)).backward();
      std::vector<std::vector<double>> g;
      for (auto& [n, p] : params) g.emplace_back(p.grad().begin(), p.grad().end());
      return g;
    };
    const auto a = grads(true), b = grads(false);
    for (std::size_t p = 0; p < a.size(); ++p)
      for (std::size_t i = 0; i < a[p].size(); ++i) EXPECT_NEAR(a[p][i], b[p][i], 1e-10) << params[p].first << "[" << i << "]";
  }
}

TEST(PyramidAttention, FiniteDifferences) {
  Rng rng(15);
  auto c = make_case<double>(1, 8, 3, 2, rng);
  const auto probe = random_tensor<double>({1, 8, 3}, rng);
  NamedParams<double> params{{"h", c.h}, {"qkv.weight", c.proj.weight}};
  for (std::size_t k = 0; k < c.banks.size(); ++k) c.banks[k].collect(params, "bank" + std::to_string(k));
  const auto r = grad_check<double>([&] { return mean(mul(c.fused(ScoreOrientation::literal), probe)); }, params, 1e-4);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_param;
}

TEST(ScoreCounter, CountsOnlyValidEntries) {
  Rng rng(16);
  const std::size_t L = 100, E = 4;
  const auto mem = random_memory(1, L, E, 7, rng);
  const auto qkv = qkv_project(mem, QkvProjection<float>::init(E, rng));
  op_counter().reset();
  (void)single_vector_scores(qkv.q, qkv.k, mem.valid);
  std::uint64_t expect = 0;
  for (std::uint64_t t = 0; t < L; ++t) expect += (std::popcount(t) + 1) * E;
  EXPECT_EQ(op_counter().score_macs, expect);

  const auto c = make_case<float>(1, L, E, 2, rng);
  op_counter().reset();
  (void)c.fused(ScoreOrientation::literal);
  EXPECT_EQ(op_counter().score_macs, 2 * expect);
}

}  // namespace
}  // namespace lmn
