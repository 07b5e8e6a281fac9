#include <gtest/gtest.h>

#include "mnarflow/graph.hpp"
#include "oracles.hpp"

using namespace mnarflow;

namespace {

EdgePattern random_pattern(int k, double p, Rng& rng) {
  EdgePattern e(k);
  for (int j = 0; j < k; ++j)
    for (int c = 0; c < k; ++c)
      if (j != c && uniform01(rng) < p) e.set(j, c, true);
  return e;
}

Matrix random_matrix(int r, int c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

}  // namespace

TEST(EdgePattern, RejectsSelfLoopsAndBadShapes) {
  BitMatrix m = BitMatrix::Zero(3, 3);
  m(1, 1) = 1;
  EXPECT_THROW(EdgePattern{m}, DataError);
  EXPECT_THROW(EdgePattern{BitMatrix::Zero(2, 3)}, DimensionError);
  EXPECT_THROW(EdgePattern{0}, ConfigError);
  EdgePattern p(3);
  EXPECT_THROW(p.set(2, 2, true), DataError);
}

TEST(EdgePattern, CsvRoundTrip) {
  Rng rng(3);
  const EdgePattern p = random_pattern(6, 0.3, rng);
  EXPECT_EQ(pattern_from_csv(to_csv(p)), p);
  EXPECT_THROW(pattern_from_csv("0,1\n1\n"), DataError);
  EXPECT_THROW(pattern_from_csv("0,2\n0,0\n"), DataError);
  EXPECT_THROW(pattern_from_csv("1,0\n0,0\n"), DataError);
}

TEST(GenerateEr, MeanEdgeCountMatchesDegree) {
  Rng rng(11);
  double total = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const EdgePattern p = generate_er({10, 1.0, true, 0}, rng);
    for (int v = 0; v < 10; ++v) ASSERT_FALSE(p.has(v, v));
    total += p.edge_count();
  }
  EXPECT_NEAR(total / 1000.0, 10.0, 1.0);
}

TEST(GenerateEr, DegenerateCases) {
  EXPECT_EQ(generate_er({1, 3.0, true, 5}).edge_count(), 0);
  EXPECT_EQ(generate_er({10, 0.0, true, 5}).edge_count(), 0);
  EXPECT_THROW(generate_er({0, 1.0, true, 5}), ConfigError);
  EXPECT_THROW(generate_er({3, 5.0, true, 5}), ConfigError);
}

TEST(GenerateEr, AcyclicWhenCyclesDisallowed) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const EdgePattern p = generate_er({8, 2.0, false, seed});
    EXPECT_LT(acyclicity_penalty(p.as_real()), 1e-9) << "seed " << seed;
  }
}

TEST(GenerateEr, SeedDeterminism) {
  EXPECT_EQ(generate_er({10, 1.5, true, 42}), generate_er({10, 1.5, true, 42}));
}

TEST(Shd, SpecExamples) {
  EdgePattern a(3), b(3);
  EXPECT_EQ(shd(a, a), 0);
  a.set(0, 1, true);
  b.set(1, 0, true);
  EXPECT_EQ(shd(b, a), 1);
  EXPECT_EQ(shd(b, a, false), 2);
  EdgePattern truth(4), empty(4);
  truth.set(0, 1, true);
  truth.set(1, 2, true);
  truth.set(3, 0, true);
  EXPECT_EQ(shd(empty, truth), 3);
  EXPECT_THROW(shd(EdgePattern(3), EdgePattern(4)), DimensionError);
}

TEST(Shd, MatchesOracleAndInvariants) {
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    const EdgePattern a = random_pattern(5, 0.3, rng);
    const EdgePattern b = random_pattern(5, 0.3, rng);
    const int d = shd(a, b);
    EXPECT_EQ(d, oracle::shd(a, b));
    EXPECT_EQ(d, shd(b, a));
    EXPECT_EQ(d == 0, a == b);
    int pairs = 0;
    for (int j = 0; j < 5; ++j)
      for (int k = j + 1; k < 5; ++k) pairs += a.has(j, k) || a.has(k, j) || b.has(j, k) || b.has(k, j);
    EXPECT_LE(d, pairs);
  }
}

TEST(Acyclicity, SpecExamples) {
  EXPECT_DOUBLE_EQ(acyclicity_penalty(Matrix::Zero(4, 4)), 0.0);
  Matrix two(2, 2);
  two << 0, 1, 1, 0;
  const double expected = oracle::exp_series(two).trace() - 2.0;
  EXPECT_NEAR(expected, 2.0 * std::cosh(1.0) - 2.0, 1e-14);
  EXPECT_NEAR(acyclicity_penalty(two), expected, 1e-12);
  EXPECT_NEAR(acyclicity_penalty(two), 1.08616, 1e-5);

  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    Matrix upper = random_matrix(6, 6, rng).triangularView<Eigen::StrictlyUpper>();
    EXPECT_LT(acyclicity_penalty(upper), 1e-9);
  }
}

TEST(Acyclicity, MatrixExponentialMatchesSeries) {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    const Matrix a = 0.8 * random_matrix(5, 5, rng);
    EXPECT_LT((matrix_exponential(a) - oracle::exp_series(a, 120)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Acyclicity, MonotoneInEntries) {
  Rng rng(13);
  for (int t = 0; t < 50; ++t) {
    Matrix m = random_matrix(4, 4, rng).cwiseAbs();
    m.diagonal().setZero();
    const double before = acyclicity_penalty(m);
    const int j = t % 4, k = (t / 4 + 1 + j) % 4;
    m(j, k) += 0.3;
    EXPECT_GE(acyclicity_penalty(m), before - 1e-12);
  }
}

TEST(Acyclicity, GradientMatchesFiniteDifference) {
  Rng rng(17);
  Matrix m = 0.5 * random_matrix(4, 4, rng).cwiseAbs();
  Matrix grad;
  acyclicity_penalty(m, grad);
  const Vector fd = oracle::fd_gradient([&](const Vector& v) { return acyclicity_penalty(v.reshaped(4, 4).eval()); },
                                        m.reshaped());
  EXPECT_LT(oracle::max_rel_error(grad.reshaped(), fd), 1e-6);
}

TEST(SpectralNorm, ContractivityExamples) {
  EXPECT_TRUE(is_contractive_spectral(Matrix::Zero(3, 3), 0.9));
  EXPECT_FALSE(is_contractive_spectral(Matrix::Identity(3, 3), 0.9));
  Rng rng(21);
  for (int t = 0; t < 20; ++t) {
    Matrix m = random_matrix(6, 6, rng);
    m *= 0.9 / oracle::svd_norm(m);
    EXPECT_TRUE(is_contractive_spectral(m, 0.9 + 1e-6));
  }
}

TEST(SpectralNorm, PowerIterationMatchesSvd) {
  Rng rng(23);
  for (int t = 0; t < 100; ++t) {
    const Matrix m = random_matrix(10, 10, rng);
    const double ref = oracle::svd_norm(m);
    EXPECT_LT(std::abs(spectral_norm(m).value - ref) / ref, 1e-6);
  }
}

TEST(PruneToAcyclic, RemovesWeakestCycleEdgeOnly) {
  EdgePattern p(3);
  p.set(0, 1, true);
  p.set(1, 0, true);
  p.set(1, 2, true);
  Matrix s = Matrix::Zero(3, 3);
  s(0, 1) = 0.9;
  s(1, 0) = 0.2;
  s(1, 2) = 0.01;
  const EdgePattern out = prune_to_acyclic(p, s);
  EXPECT_TRUE(is_acyclic(out));
  EXPECT_TRUE(out.has(0, 1));
  EXPECT_FALSE(out.has(1, 0));
  EXPECT_TRUE(out.has(1, 2));
}
