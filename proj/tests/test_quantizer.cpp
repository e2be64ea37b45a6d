#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "oracles.hpp"
#include "qprompt/quantizer.hpp"

using namespace qprompt;

namespace {

std::vector<double> randn(std::mt19937_64& gen, std::size_t n, double scale = 1.0, double shift = 0.0) {
  std::normal_distribution<double> d(shift, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(gen);
  return v;
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::Io;
}

}  // namespace

TEST(Stats, ConstantVector) {
  const std::vector<double> v{1, 1, 1, 1};
  const auto s = compute_stats(v);
  EXPECT_EQ(s.mu, 1.0);
  EXPECT_EQ(s.sigma, 0.0);
}

TEST(Stats, SymmetricPair) {
  const std::vector<double> v{-1, 1};
  const auto s = compute_stats(v);
  EXPECT_EQ(s.mu, 0.0);
  EXPECT_EQ(s.sigma, 1.0);
}

TEST(Stats, PopulationVariance) {
  const std::vector<double> v{0, 1, 2, 3};
  const auto s = compute_stats(v);
  EXPECT_DOUBLE_EQ(s.mu, 1.5);
  EXPECT_NEAR(s.sigma, 1.118034, 1e-6);
  EXPECT_DOUBLE_EQ(s.sigma * s.sigma, 1.25);
}

TEST(Stats, RejectsNonFiniteAndEmpty) {
  const std::vector<double> bad{1.0, NAN};
  EXPECT_EQ(code_of([&] { compute_stats(bad); }), ErrorCode::NonFinite);
  const std::vector<double> inf{INFINITY};
  EXPECT_EQ(code_of([&] { compute_stats(inf); }), ErrorCode::NonFinite);
  EXPECT_EQ(code_of([] { compute_stats(std::vector<double>{}); }), ErrorCode::EmptyTensor);
}

TEST(Stats, RecomputeReproduces) {
  std::mt19937_64 gen(3);
  for (int t = 0; t < 50; ++t) {
    const auto v = randn(gen, 1 + gen() % 500, 3.0, -2.0);
    const auto a = compute_stats(v);
    const auto b = compute_stats(v);
    EXPECT_EQ(a, b);
    // Independent two-pass evaluation in long double.
    long double mu = 0;
    for (double x : v) mu += x;
    mu /= static_cast<long double>(v.size());
    long double ss = 0;
    for (double x : v) ss += (x - mu) * (x - mu);
    const double sigma = static_cast<double>(std::sqrt(ss / static_cast<long double>(v.size())));
    EXPECT_NEAR(a.mu, static_cast<double>(mu), 1e-6 * std::max(1.0, std::abs(a.mu)));
    EXPECT_NEAR(a.sigma, sigma, 1e-6 * sigma);
  }
}

TEST(Normalize, Examples) {
  const std::vector<double> a{0, 2};
  EXPECT_EQ(normalize(a, {1, 1}), (std::vector<double>{-1, 1}));

  const std::vector<double> b{3, 5, 7};
  const auto nb = normalize(b, {5, std::sqrt(8.0 / 3.0)});
  EXPECT_NEAR(nb[0], -1.224745, 1e-6);
  EXPECT_NEAR(nb[1], 0.0, 1e-12);
  EXPECT_NEAR(nb[2], 1.224745, 1e-6);

  const std::vector<double> c{1, 1};
  EXPECT_EQ(code_of([&] { normalize(c, compute_stats(c)); }), ErrorCode::DegenerateTensor);
}

TEST(Normalize, ZeroMeanUnitStd) {
  std::mt19937_64 gen(4);
  for (int t = 0; t < 50; ++t) {
    const auto v = randn(gen, 2 + gen() % 300, 10.0, 7.0);
    const auto s = compute_stats(normalize(v, compute_stats(v)));
    EXPECT_NEAR(s.mu, 0.0, 1e-6);
    EXPECT_NEAR(s.sigma, 1.0, 1e-6);
  }
}

TEST(Normalize, TensorKeepsShape) {
  const WeightTensor w({1, 2, 3, 4, 5, 6}, {2, 3});
  const auto n = normalize(w, compute_stats(w));
  EXPECT_EQ(n.shape, w.shape);
  EXPECT_EQ(code_of([] { WeightTensor({1, 2, 3}, {2, 2}); }), ErrorCode::LengthMismatch);
}

TEST(KMeans, TwoPairsSplitInHalf) {
  const std::vector<double> v{-2, -1, 1, 2};
  const auto r = kmeans_fit(v, 1);
  ASSERT_EQ(r.centers.size(), 2u);
  EXPECT_DOUBLE_EQ(r.centers[0], -1.5);
  EXPECT_DOUBLE_EQ(r.centers[1], 1.5);
  EXPECT_DOUBLE_EQ(r.objective_trace.back(), 1.0);
  EXPECT_TRUE(r.converged);
}

TEST(KMeans, PointMasses) {
  const std::vector<double> v{-1, -1, 1, 1};
  const auto r = kmeans_fit(v, 1);
  EXPECT_EQ(r.centers, (std::vector<double>{-1, 1}));
  EXPECT_EQ(r.objective_trace.back(), 0.0);
}

TEST(KMeans, RepeatedValueIsDegenerate) {
  for (int b : {1, 2, 4, 8}) {
    const std::vector<double> v(20, 0.25);
    EXPECT_EQ(code_of([&] { kmeans_fit(v, b); }), ErrorCode::DegenerateTensor) << b;
  }
  // Two distinct values cannot fill four clusters.
  const std::vector<double> two{0, 0, 1, 1, 1};
  EXPECT_EQ(code_of([&] { kmeans_fit(two, 2); }), ErrorCode::DegenerateTensor);
}

TEST(KMeans, UnsupportedBits) {
  const std::vector<double> v{0, 1, 2, 3};
  for (int b : {0, 3, 5, 16}) EXPECT_EQ(code_of([&] { kmeans_fit(v, b); }), ErrorCode::BadConfig) << b;
}

TEST(KMeans, QuantileSeeds) {
  std::vector<double> v(101);
  for (int i = 0; i <= 100; ++i) v[i] = i;
  // b = 1: quantiles 1/4 and 3/4.
  EXPECT_EQ(quantile_init(v, 1), (std::vector<double>{25, 75}));
  // b = 2: 1/8, 3/8, 5/8, 7/8.
  EXPECT_EQ(quantile_init(v, 2), (std::vector<double>{12.5, 37.5, 62.5, 87.5}));
}

TEST(KMeans, ExactlyKDistinctValues) {
  const std::vector<double> v{3, 1, 2, 0, 0, 3};
  const auto r = kmeans_fit(v, 2);
  EXPECT_EQ(r.centers, (std::vector<double>{0, 1, 2, 3}));
}

TEST(KMeans, MatchesExhaustiveLabelingOneBit) {
  std::mt19937_64 gen(11);
  for (int t = 0; t < 200; ++t) {
    const auto v = randn(gen, 2 + gen() % 11);
    const auto r = kmeans_fit(v, 1);
    EXPECT_NEAR(r.objective_trace.back(), oracle::brute_force_kmeans(v, 2), 1e-9) << "case " << t;
  }
}

TEST(KMeans, MatchesExhaustiveLabelingTwoBits) {
  std::mt19937_64 gen(12);
  std::exponential_distribution<double> e(1.0);
  for (int t = 0; t < 40; ++t) {
    std::vector<double> v(4 + gen() % 5);
    for (auto& x : v) x = e(gen);
    const auto r = kmeans_fit(v, 2);
    EXPECT_NEAR(r.objective_trace.back(), oracle::brute_force_kmeans(v, 4), 1e-9) << "case " << t;
  }
}

TEST(KMeans, PlainLloydCanStallWithoutRefinement) {
  // Symmetric quantile seeds lead Lloyd to the 2/2 split; the 1/3 split is better.
  const std::vector<double> v{-1.419, -0.0551, 0.0674, 1.4067};
  KMeansOptions plain;
  plain.exact_refine = false;
  const double stalled = kmeans_fit(v, 1, plain).objective_trace.back();
  const double refined = kmeans_fit(v, 1).objective_trace.back();
  EXPECT_GT(stalled, refined + 0.1);
  EXPECT_NEAR(refined, oracle::brute_force_kmeans(v, 2), 1e-12);
}

TEST(KMeans, ObjectiveNeverIncreases) {
  std::mt19937_64 gen(13);
  for (int t = 0; t < 300; ++t) {
    const int b = 1 << (gen() % 4);
    const std::size_t n = codebook_size(b) + gen() % 400;
    auto v = randn(gen, n);
    if (t % 3 == 0) {
      for (auto& x : v) x = std::round(x * 4) / 4;  // many duplicates
      std::set<double> d(v.begin(), v.end());
      if (d.size() < codebook_size(b)) continue;
    }
    KMeansOptions o;
    o.exact_refine = t % 2 == 0;
    const auto r = kmeans_fit(v, b, o);
    for (std::size_t i = 1; i < r.objective_trace.size(); ++i) {
      ASSERT_LE(r.objective_trace[i], r.objective_trace[i - 1] + 1e-9) << "case " << t << " step " << i;
    }
    EXPECT_TRUE(std::is_sorted(r.centers.begin(), r.centers.end()));
    EXPECT_NEAR(r.objective_trace.back(), clustering_objective(v, r.centers), 1e-9 * (1 + r.objective_trace.back()));
  }
}

TEST(KMeans, WarmStartFromOptimumStaysPut) {
  std::mt19937_64 gen(14);
  const auto v = randn(gen, 500);
  const auto first = kmeans_fit(v, 2);
  const auto again = kmeans_fit(v, 2, {}, first.centers);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(again.centers[i], first.centers[i], 1e-9);
  EXPECT_LE(again.iterations, 2);
  EXPECT_EQ(code_of([&] { kmeans_fit(v, 2, {}, std::vector<double>{0, 1}); }), ErrorCode::LengthMismatch);
}

TEST(KMeans, JitterUsesSeedDeterministically) {
  std::mt19937_64 gen(15);
  const auto v = randn(gen, 300);
  KMeansOptions o;
  o.jitter = 0.3;
  o.seed = 5;
  o.exact_refine = false;
  EXPECT_EQ(kmeans_fit(v, 2, o).centers, kmeans_fit(v, 2, o).centers);
  // Without jitter the seed plays no part.
  KMeansOptions a, b;
  a.seed = 1;
  b.seed = 2;
  EXPECT_EQ(kmeans_fit(v, 4, a).centers, kmeans_fit(v, 4, b).centers);
}

TEST(KMeans, EmptyClusterIsRepopulated) {
  // Warm start with a center far from any data leaves it empty on the first pass.
  const std::vector<double> v{0, 0.1, 0.2, 5, 5.1, 5.2};
  KMeansOptions o;
  o.exact_refine = false;
  const auto r = kmeans_fit(v, 1, o, std::vector<double>{-100, 2});
  EXPECT_NEAR(r.centers[0], 0.1, 1e-12);
  EXPECT_NEAR(r.centers[1], 5.1, 1e-12);
}

TEST(Assign, Examples) {
  EXPECT_EQ(assign(std::vector<double>{0}, std::vector<double>{-1, 1}), (std::vector<Index>{0}));
  EXPECT_EQ(assign(std::vector<double>{-2, 0.9, 2}, std::vector<double>{-1.5, 1.5}), (std::vector<Index>{0, 1, 1}));
  const std::vector<double> c{-3, -1, 0.5, 2};
  EXPECT_EQ(assign(c, c), (std::vector<Index>{0, 1, 2, 3}));
}

TEST(Assign, NearestCenterProperty) {
  std::mt19937_64 gen(21);
  for (int t = 0; t < 100; ++t) {
    const int b = 1 << (gen() % 4);
    auto centers = randn(gen, codebook_size(b));
    std::sort(centers.begin(), centers.end());
    auto v = randn(gen, 200, 2.0);
    // Plant exact midpoints to exercise the tie rule.
    for (std::size_t j = 1; j < centers.size() && j < 20; ++j) v.push_back(0.5 * (centers[j - 1] + centers[j]));
    const auto idx = assign(v, centers);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double mine = std::abs(v[i] - centers[idx[i]]);
      for (std::size_t j = 0; j < centers.size(); ++j) {
        const double other = std::abs(v[i] - centers[j]);
        ASSERT_LE(mine, other);
        if (other == mine) {
          ASSERT_LE(idx[i], j) << "tie must go to the smaller index";
        }
      }
    }
  }
}

TEST(Quantize, Examples) {
  const Codebook cb{1, {-1, 1}, {1, 1}};
  auto a = quantize(std::vector<double>{0, 2}, cb);
  EXPECT_EQ(a.indices, (std::vector<Index>{0, 1}));
  EXPECT_EQ(a.reconstruction, (std::vector<double>{0, 2}));
  a = quantize(std::vector<double>{0.5, 1.5}, cb);
  EXPECT_EQ(a.indices, (std::vector<Index>{0, 1}));
  EXPECT_EQ(a.reconstruction, (std::vector<double>{0, 2}));
  const Codebook flat{1, {-1, 1}, {1, 0}};
  EXPECT_EQ(code_of([&] { quantize(std::vector<double>{1}, flat); }), ErrorCode::DegenerateTensor);
}

TEST(Quantize, ReconstructionFormulaAndIdempotence) {
  std::mt19937_64 gen(31);
  for (int t = 0; t < 100; ++t) {
    const int b = 1 << (gen() % 4);
    const WeightTensor w(randn(gen, codebook_size(b) + gen() % 300, 0.02, 0.001));
    const Codebook cb = fit_codebook(w, b);
    validate(cb);
    const auto a = quantize(w, cb);
    for (std::size_t i = 0; i < w.size(); ++i) {
      ASSERT_LT(a.indices[i], codebook_size(b));
      ASSERT_EQ(a.reconstruction[i], cb.stats.sigma * cb.centers[a.indices[i]] + cb.stats.mu);
    }
    EXPECT_EQ(quantize(a.reconstruction, cb).indices, a.indices);
    EXPECT_EQ(dequantize(a.indices, cb), a.reconstruction);
  }
}

TEST(Quantize, AffineEquivariance) {
  std::mt19937_64 gen(41);
  std::uniform_real_distribution<double> scale(0.01, 100.0), offset(-50.0, 50.0);
  for (int t = 0; t < 100; ++t) {
    const int b = 1 << (gen() % 3);
    const auto v = randn(gen, 64 + gen() % 200);
    const double a = scale(gen), c = offset(gen);
    std::vector<double> moved(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) moved[i] = a * v[i] + c;

    const Codebook cb1 = fit_codebook(WeightTensor(v), b);
    const Codebook cb2 = fit_codebook(WeightTensor(moved), b);
    const auto q1 = quantize(v, cb1);
    const auto q2 = quantize(moved, cb2);
    ASSERT_EQ(q1.indices, q2.indices) << "case " << t;
    for (std::size_t j = 0; j < cb1.centers.size(); ++j) EXPECT_NEAR(cb1.centers[j], cb2.centers[j], 1e-9);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double want = a * q1.reconstruction[i] + c;
      ASSERT_LE(std::abs(q2.reconstruction[i] - want), 1e-5 * std::max(1.0, std::abs(want)));
    }
  }
}

TEST(QuantError, Examples) {
  const std::vector<double> w{-2, -1, 1, 2};
  const Codebook cb{1, {-1.5, 1.5}, {0, 1}};
  const auto a = quantize(w, cb);
  EXPECT_DOUBLE_EQ(quant_error(WeightTensor(w), a), 1.0);
  EXPECT_EQ(quant_error(w, w), 0.0);
  EXPECT_EQ(code_of([&] { quant_error(w, std::vector<double>{1}); }), ErrorCode::LengthMismatch);
}

TEST(QuantError, ScalesQuadratically) {
  std::mt19937_64 gen(51);
  for (int t = 0; t < 20; ++t) {
    const auto v = randn(gen, 100);
    const Codebook cb = fit_codebook(WeightTensor(v), 2);
    const double e = quant_error(WeightTensor(v), quantize(v, cb));
    const double a = 0.5 + static_cast<double>(t);
    std::vector<double> sv(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) sv[i] = a * v[i];
    Codebook scb = cb;
    scb.stats = {a * cb.stats.mu, a * cb.stats.sigma};
    const double es = quant_error(WeightTensor(sv), quantize(sv, scb));
    EXPECT_NEAR(es, a * a * e, 1e-9 * a * a * e);
  }
}

TEST(QuantError, MatchesBruteForceSumAndReport) {
  std::mt19937_64 gen(52);
  for (int t = 0; t < 30; ++t) {
    const WeightTensor w(randn(gen, 2 + gen() % 999, 3.0));
    const Codebook cb = fit_codebook(w, 1 << (gen() % 3));
    const auto a = quantize(w, cb);
    long double s = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const long double d = static_cast<long double>(a.reconstruction[i]) - w.values[i];
      s += d * d;
    }
    const double e = quant_error(w, a);
    EXPECT_NEAR(e, static_cast<double>(s), 1e-9 * static_cast<double>(s));
    const auto report = quant_error_report(w, a, cb.stats);
    EXPECT_EQ(report.raw, e);
    EXPECT_NEAR(report.normalized, e / (cb.stats.sigma * cb.stats.sigma), 1e-12 * report.normalized);
  }
}

TEST(Codebook, Validation) {
  EXPECT_NO_THROW(validate(Codebook{1, {-1, 1}, {0, 1}}));
  EXPECT_EQ(code_of([] { validate(Codebook{1, {1, 1}, {0, 1}}); }), ErrorCode::BadConfig);
  EXPECT_EQ(code_of([] { validate(Codebook{2, {-1, 1}, {0, 1}}); }), ErrorCode::LengthMismatch);
  EXPECT_EQ(code_of([] { validate(Codebook{3, {}, {0, 1}}); }), ErrorCode::BadConfig);
  EXPECT_EQ(code_of([] { dequantize(std::vector<Index>{2}, Codebook{1, {-1, 1}, {0, 1}}); }),
            ErrorCode::IndexOverflow);
}
