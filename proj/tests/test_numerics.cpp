#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "vpr/gradcheck.hpp"
#include "vpr/numerics.hpp"

using namespace vpr;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), Error);
  EXPECT_THROW(Tensor({2, 0}), Error);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.at(1, 2), 6.0);
  EXPECT_EQ(t.size(), 6u);
}

TEST(Tensor, RequireFiniteNamesTheTensor) {
  Tensor t = Tensor::vector({1.0, std::numeric_limits<double>::quiet_NaN()});
  try {
    t.require_finite("weights");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFinite);
    EXPECT_NE(std::string(e.what()).find("weights"), std::string::npos);
  }
}

TEST(Elementwise, SigmoidOfZero) {
  auto y = elementwise(Elementwise::Sigmoid, Tensor::vector({0, 0, 0}));
  for (double v : y.data()) EXPECT_EQ(v, 0.5);
}

TEST(Elementwise, GeluFixpointAndKnownValues) {
  EXPECT_EQ(gelu(0.0), 0.0);
  // x * Phi(x) with Phi(1) = 0.841344746068543
  EXPECT_NEAR(gelu(1.0), 0.841344746068543, 1e-14);
  EXPECT_NEAR(gelu(-1.0), -1.0 + 0.841344746068543, 1e-14);
}

TEST(Elementwise, PowerIntegerAndErrors) {
  auto y = elementwise(Elementwise::Power, Tensor::vector({1, 2}), 3.0);
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], 8.0);
  EXPECT_EQ(elementwise(Elementwise::Power, Tensor::vector({-2}), 2.0)[0], 4.0);
  EXPECT_THROW(elementwise(Elementwise::Power, Tensor::vector({-2}), 0.5), Error);
  EXPECT_THROW(elementwise(Elementwise::Relu, Tensor::vector({std::numeric_limits<double>::infinity()})), Error);
}

TEST(Elementwise, Relu) {
  auto y = elementwise(Elementwise::Relu, Tensor::vector({-1, 0, 2.5}));
  EXPECT_EQ(y.data(), (std::vector<double>{0, 0, 2.5}));
}

TEST(Elementwise, PureAcrossCalls) {
  std::mt19937_64 rng(3);
  auto x = Tensor::randn({64}, rng);
  for (auto kind : {Elementwise::Sigmoid, Elementwise::Gelu, Elementwise::Relu}) {
    EXPECT_EQ(elementwise(kind, x), elementwise(kind, x));
  }
}

TEST(GeluGrad, MatchesCentralDifference) {
  for (double x : {-3.0, -0.7, 0.0, 0.4, 2.2}) {
    const double h = 1e-6;
    EXPECT_NEAR(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), 1e-8);
  }
}

TEST(L2Normalize, BackwardMatchesFiniteDifference) {
  std::mt19937_64 rng(1);
  auto x = Tensor::randn({5}, rng);
  auto w = Tensor::randn({5}, rng);
  auto f = [&](const Tensor& v) {
    Tensor y = v;
    l2_normalize(y.span());
    return dot(y.span(), w.span());
  };
  Tensor y = x;
  const double n = l2_normalize(y.span());
  std::vector<double> g(5);
  l2_normalize_backward(y.span(), n, w.span(), g);
  for (std::size_t i = 0; i < 5; ++i) {
    Tensor p = x, m = x;
    p[i] += 1e-6;
    m[i] -= 1e-6;
    EXPECT_NEAR(g[i], (f(p) - f(m)) / 2e-6, 1e-7);
  }
}

TEST(GradCheck, QuadraticIsExact) {
  GradFn f = [](const ParamMap& p, ParamMap* g) {
    const auto& x = p.at("x");
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      s += x[i] * x[i];
      if (g) g->at("x")[i] = 2 * x[i];
    }
    return s;
  };
  auto r = grad_check("sumsq", f, {{"x", Tensor::vector({1, 2, 3})}});
  EXPECT_TRUE(r.passed);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, WrongGradientFails) {
  GradFn f = [](const ParamMap& p, ParamMap* g) {
    const auto& x = p.at("x");
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      s += x[i] * x[i];
      if (g) g->at("x")[i] = 2 * x[i] * 1.1;
    }
    return s;
  };
  auto r = grad_check("sumsq", f, {{"x", Tensor::vector({1, 2, 3})}});
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.max_rel_error, 0.1 / 1.1, 1e-6);
}

TEST(GradCheck, NonFiniteGradientFailsWithReason) {
  GradFn f = [](const ParamMap& p, ParamMap* g) {
    if (g) g->at("x")[0] = std::numeric_limits<double>::quiet_NaN();
    return p.at("x")[0];
  };
  auto r = grad_check("nan", f, {{"x", Tensor::vector({1})}});
  EXPECT_FALSE(r.passed);
  EXPECT_FALSE(r.reason.empty());
}

TEST(GradCheck, GemComposedWithSumPassesTightTolerance) {
  auto r = gradcheck_component("gem", {.seed = 11, .eps = 1e-5, .tol = 1e-5});
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(ParallelFor, CoversRangeOnce) {
  for (int threads : {1, 3, 8}) {
    std::vector<int> hits(37, 0);
    parallel_for(hits.size(), threads, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) ++hits[i];
    });
    for (int h : hits) EXPECT_EQ(h, 1);
  }
}
