#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vpr/pca.hpp"

using namespace vpr;

namespace {

std::vector<Tensor> random_points(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> out;
  // Anisotropic so the leading directions are well separated.
  for (std::size_t i = 0; i < n; ++i) {
    Tensor t = Tensor::randn({dim}, rng);
    for (std::size_t j = 0; j < dim; ++j) t[j] *= 1.0 + 3.0 / static_cast<double>(j + 1);
    out.push_back(std::move(t));
  }
  return out;
}

// Leading eigenvector of the sample covariance by power iteration.
std::vector<double> power_iteration(const std::vector<Tensor>& pts) {
  const std::size_t dim = pts[0].size();
  std::vector<double> mean(dim, 0.0);
  for (const auto& p : pts) {
    for (std::size_t j = 0; j < dim; ++j) mean[j] += p[j] / static_cast<double>(pts.size());
  }
  std::vector<double> v(dim, 1.0);
  for (int it = 0; it < 2000; ++it) {
    std::vector<double> next(dim, 0.0);
    for (const auto& p : pts) {
      double s = 0;
      for (std::size_t j = 0; j < dim; ++j) s += (p[j] - mean[j]) * v[j];
      for (std::size_t j = 0; j < dim; ++j) next[j] += s * (p[j] - mean[j]);
    }
    l2_normalize(next);
    v = next;
  }
  return v;
}

void expect_orthonormal(const PcaModel& m) {
  for (std::size_t a = 0; a < m.out_dim(); ++a) {
    for (std::size_t b = 0; b < m.out_dim(); ++b) {
      double s = 0;
      for (std::size_t j = 0; j < m.in_dim(); ++j) s += m.basis.at(j, a) * m.basis.at(j, b);
      EXPECT_NEAR(s, a == b ? 1.0 : 0.0, 1e-9);
    }
  }
}

}  // namespace

TEST(Pca, DiagonalCloudFirstAxis) {
  std::vector<Tensor> pts;
  for (double t : {-2.0, -1.0, 0.5, 1.0, 1.5}) pts.push_back(Tensor::vector({t, t}));
  pts.push_back(Tensor::vector({0.1, -0.1}));
  auto m = pca_fit(pts, 1);
  EXPECT_NEAR(std::abs(m.basis.at(0, 0)), 1 / std::sqrt(2.0), 1e-9);
  EXPECT_NEAR(std::abs(m.basis.at(1, 0)), 1 / std::sqrt(2.0), 1e-9);
  EXPECT_GT(m.basis.at(0, 0) * m.basis.at(1, 0), 0.0);
}

TEST(Pca, ExactSubspaceReconstructs) {
  std::mt19937_64 rng(2);
  Tensor a = Tensor::randn({6}, rng), b = Tensor::randn({6}, rng), offset = Tensor::randn({6}, rng);
  std::vector<Tensor> pts;
  std::normal_distribution<double> n(0, 1);
  for (int i = 0; i < 20; ++i) {
    Tensor p = offset;
    const double s = n(rng), t = n(rng);
    for (std::size_t j = 0; j < 6; ++j) p[j] += s * a[j] + t * b[j];
    pts.push_back(p);
  }
  auto m = pca_fit(pts, 2);
  expect_orthonormal(m);
  for (const auto& p : pts) {
    auto r = pca_reconstruct(m, p);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(r[j], p[j], 1e-6);
  }
  EXPECT_THROW(pca_fit(pts, 3), Error);
  try {
    pca_fit(pts, 3);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::RankDeficient);
    EXPECT_NE(std::string(e.what()).find("rank 2"), std::string::npos);
  }
}

TEST(Pca, BothRoutesMatchPowerIteration) {
  // dim <= n uses the covariance, dim > n the Gram matrix.
  for (auto [n, dim] : {std::pair<std::size_t, std::size_t>{60, 8}, {12, 40}}) {
    auto pts = random_points(n, dim, n + dim);
    auto m = pca_fit(pts, 3);
    expect_orthonormal(m);
    auto v = power_iteration(pts);
    double s = 0;
    for (std::size_t j = 0; j < dim; ++j) s += v[j] * m.basis.at(j, 0);
    EXPECT_NEAR(std::abs(s), 1.0, 1e-6) << n << "x" << dim;
    EXPECT_GE(m.eigenvalues[0], m.eigenvalues[1]);
    EXPECT_GE(m.eigenvalues[1], m.eigenvalues[2]);
  }
}

TEST(Pca, ApplyIsUnitNormAndWhiteningScales) {
  auto pts = random_points(50, 10, 9);
  auto m = pca_fit(pts, 4);
  auto d = pca_apply(m, pts[0]);
  EXPECT_NEAR(l2_norm(d.span()), 1.0, 1e-12);
  auto w = pca_fit(pts, 4, true);
  auto plain = pca_project(m, pts[3]);
  auto white = pca_project(w, pts[3]);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(white[k] * std::sqrt(m.eigenvalues[k] + 1e-12), plain[k], 1e-9);
}

TEST(Pca, BatchedApplyMatchesSingleRows) {
  auto pts = random_points(40, 12, 4);
  for (bool whiten : {false, true}) {
    auto m = pca_fit(pts, 5, whiten);
    auto all = pca_apply_all(m, pts);
    ASSERT_EQ(all.size(), pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      auto one = pca_apply(m, pts[i]);
      for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(all[i][k], one[k], 1e-12);
    }
  }
  std::vector<Tensor> wrong{Tensor::vector({1.0, 2.0})};
  EXPECT_THROW(pca_apply_all(pca_fit(pts, 5), wrong), Error);
}

TEST(Pca, RejectsTooFewSamples) {
  auto pts = random_points(3, 5, 1);
  EXPECT_THROW(pca_fit(pts, 3), Error);
  EXPECT_THROW(pca_fit(pts, 0), Error);
}
