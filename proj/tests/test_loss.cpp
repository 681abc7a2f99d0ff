#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "vpr/loss.hpp"

using namespace vpr;

namespace {

SimilarityMatrix matrix(std::size_t b, std::vector<double> v, std::vector<std::int64_t> labels) {
  return {Tensor({b, b}, std::move(v)), std::move(labels)};
}

std::vector<Descriptor> random_unit(std::size_t b, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Descriptor> out;
  for (std::size_t i = 0; i < b; ++i) {
    auto t = Tensor::randn({d}, rng);
    l2_normalize(t.span());
    out.push_back(t);
  }
  return out;
}

// Direct transcription of the loss with explicit mining, no shared code.
double oracle(const SimilarityMatrix& s, const MsLossConfig& c) {
  const std::size_t b = s.batch();
  double total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> pos, neg;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      (s.labels[i] == s.labels[j] ? pos : neg).push_back(s.values.at(i, j));
    }
    double lp = 0, ln = 0;
    for (double p : pos) {
      if (neg.empty() || p < *std::max_element(neg.begin(), neg.end()) + c.eps_margin) {
        lp += std::exp(-c.alpha * (p - c.lam));
      }
    }
    for (double n : neg) {
      if (pos.empty() || n > *std::min_element(pos.begin(), pos.end()) - c.eps_margin) {
        ln += std::exp(c.beta * (n - c.lam));
      }
    }
    total += std::log(1 + lp) / c.alpha + std::log(1 + ln) / c.beta;
  }
  return total / static_cast<double>(b);
}

}  // namespace

TEST(Mining, NoViolationsGivesEmptySets) {
  auto s = matrix(4, {1, 1, -1, -1, 1, 1, -1, -1, -1, -1, 1, 1, -1, -1, 1, 1}, {0, 0, 1, 1});
  auto m = mine_pairs(s, {});
  EXPECT_TRUE(m.all_empty());
  EXPECT_EQ(ms_loss(s, {}), 0.0);
}

TEST(Mining, HandExample) {
  // Anchor 0 with positives 1 (0.9), 2 (0.2) and negative 3 (0.5).
  auto s = matrix(4, {1, 0.9, 0.2, 0.5, 0.9, 1, 0.3, 0.1, 0.2, 0.3, 1, 0.0, 0.5, 0.1, 0.0, 1}, {7, 7, 7, 8});
  auto m = mine_pairs(s, {});
  EXPECT_EQ(m.negatives[0], (std::vector<std::size_t>{3}));
  EXPECT_EQ(m.positives[0], (std::vector<std::size_t>{2}));
}

TEST(Mining, SingleClassHasNoNegatives) {
  auto d = random_unit(5, 3, 1);
  auto s = SimilarityMatrix::from_descriptors(d, {2, 2, 2, 2, 2});
  auto m = mine_pairs(s, {});
  for (const auto& n : m.negatives) EXPECT_TRUE(n.empty());
  for (const auto& p : m.positives) EXPECT_EQ(p.size(), 4u);
}

TEST(MsLoss, ClosedFormSinglePair) {
  auto s = matrix(2, {1, 0.8, 0.8, 1}, {0, 0});
  EXPECT_NEAR(ms_loss(s, {}), std::log(1 + std::exp(-0.3)), 1e-12);
  EXPECT_NEAR(ms_loss(s, {}), 0.55436, 1e-5);
}

TEST(MsLoss, MatchesOracleOnRandomBatches) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto d = random_unit(12, 4, seed);
    std::vector<std::int64_t> labels{0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3};
    auto s = SimilarityMatrix::from_descriptors(d, labels);
    for (MsLossConfig c : {MsLossConfig{}, MsLossConfig{2.0, 10.0, 0.2, 0.05}, MsLossConfig{1.0, 50.0, 0.0, 0.1}}) {
      EXPECT_NEAR(ms_loss(s, c), oracle(s, c), 1e-10);
    }
  }
}

TEST(MsLoss, IncreasingMinedNegativeIncreasesLoss) {
  auto s = matrix(3, {1, 0.4, 0.6, 0.4, 1, 0.2, 0.6, 0.2, 1}, {0, 0, 1});
  const double base = ms_loss(s, {});
  s.values.at(0, 2) = s.values.at(2, 0) = 0.65;
  EXPECT_GT(ms_loss(s, {}), base);
}

TEST(MsLoss, PermutationInvariantAndNonnegative) {
  auto d = random_unit(8, 5, 3);
  std::vector<std::int64_t> labels{0, 1, 0, 2, 1, 2, 0, 1};
  const double base = ms_loss_descriptors(d, labels, {});
  EXPECT_GE(base, 0.0);
  std::vector<std::size_t> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(1);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Descriptor> pd;
  std::vector<std::int64_t> pl;
  for (auto i : perm) {
    pd.push_back(d[i]);
    pl.push_back(labels[i]);
  }
  EXPECT_NEAR(ms_loss_descriptors(pd, pl, {}), base, 1e-12);
}

TEST(MsLoss, SimilarityMatrixSymmetricWithUnitDiagonal) {
  auto d = random_unit(6, 9, 4);
  auto s = SimilarityMatrix::from_descriptors(d, {0, 0, 1, 1, 2, 2});
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(s.values.at(i, i), 1.0, 1e-12);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(s.values.at(i, j), s.values.at(j, i));
  }
}

TEST(MsLoss, DescriptorGradientMatchesFiniteDifference) {
  auto d = random_unit(8, 5, 6);
  std::vector<std::int64_t> labels{0, 0, 1, 1, 2, 2, 3, 3};
  MsLossConfig c{1.0, 10.0, 0.2, 1.0};
  std::vector<Tensor> g;
  ms_loss_descriptors(d, labels, c, &g);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t k = 0; k < d[i].size(); ++k) {
      auto p = d, m = d;
      p[i][k] += 1e-6;
      m[i][k] -= 1e-6;
      const double num = (ms_loss_descriptors(p, labels, c) - ms_loss_descriptors(m, labels, c)) / 2e-6;
      EXPECT_NEAR(g[i][k], num, 1e-6);
    }
  }
}

TEST(MsLoss, RejectsBadInput) {
  auto s = matrix(2, {1, NAN, NAN, 1}, {0, 0});
  EXPECT_THROW(ms_loss(s, {}), Error);
  EXPECT_THROW(ms_loss(matrix(2, {1, 0, 0, 1}, {0, 0}), MsLossConfig{0.0, 1, 0, 0}), Error);
  EXPECT_THROW(SimilarityMatrix::from_descriptors(random_unit(2, 3, 0), {0}), Error);
}
