#include <gtest/gtest.h>

#include "mnarflow/mnar.hpp"
#include "oracles.hpp"

using namespace mnarflow;

namespace {

Vector randv(int n, Rng& rng) {
  Vector v(n);
  for (auto& x : v) x = standard_normal(rng);
  return v;
}

/// n standard-normal records censored by `model`; nothing intervened.
Dataset censored(const MnarModel& model, int n, Rng& rng) {
  const int k = model.k();
  Dataset d;
  d.y.resize(n, k);
  d.r.resize(n, k);
  d.s = BitMatrix::Ones(n, k);
  for (int i = 0; i < n; ++i) {
    const Vector x = randv(k, rng);
    const BitVector r = sample_r(model, x, BitVector::Zero(k), rng);
    d.r.row(i) = r.transpose();
    for (int c = 0; c < k; ++c) d.y(i, c) = r[c] ? x[c] : kMissing;
  }
  return d;
}

}  // namespace

TEST(ProbMissing, Examples) {
  MnarModel m = MnarModel::zeros(3);
  EXPECT_EQ(prob_missing(m, Vector::Ones(3)), Vector::Constant(3, 0.5));
  m.z.setConstant(-20.0);
  EXPECT_LT(prob_missing(m, Vector::Ones(3)).maxCoeff(), 1e-8);
  MnarModel one = MnarModel::zeros(2);
  one.w(0, 1) = 1.0;
  EXPECT_NEAR(prob_missing(one, Vector{{1.0, 0.0}})[1], 0.731059, 1e-6);
}

TEST(ProbMissing, NoSelfCensoring) {
  Rng rng(1);
  MnarModel m = MnarModel::zeros(4);
  for (Eigen::Index i = 0; i < m.w.size(); ++i) m.w.data()[i] = standard_normal(rng);
  m.enforce_support();
  Vector x = randv(4, rng);
  for (int c = 0; c < 4; ++c) {
    const double before = prob_missing(m, x)[c];
    Vector y = x;
    y[c] += 5.0;
    EXPECT_EQ(prob_missing(m, y)[c], before);
  }
}

TEST(LogProbR, Examples) {
  const MnarModel m = MnarModel::zeros(3);
  const BitVector r{{1, 0, 1}};
  EXPECT_NEAR(log_prob_r(m, r, Vector::Zero(3), BitVector::Zero(3)), 3.0 * std::log(0.5), 1e-12);
  EXPECT_NEAR(log_prob_r(m, r, Vector::Zero(3), BitVector::Zero(3)), -2.079442, 1e-6);

  MnarModel sure = MnarModel::zeros(2);
  sure.z[1] = 40.0;  // p_2 ~ 1
  EXPECT_NEAR(log_prob_r(sure, BitVector{{1, 0}}, Vector::Zero(2), BitVector{{1, 0}}), 0.0, 1e-12);
}

TEST(LogProbR, MatchesPerFactorOracle) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    MnarModel m = MnarModel::zeros(4);
    for (Eigen::Index i = 0; i < m.w.size(); ++i) m.w.data()[i] = standard_normal(rng);
    m.enforce_support();
    m.z = randv(4, rng);
    const Vector x = randv(4, rng);
    BitVector r(4), skip(4);
    for (int c = 0; c < 4; ++c) {
      r[c] = uniform01(rng) < 0.5;
      skip[c] = uniform01(rng) < 0.25;
    }
    double expected = 0.0;
    for (int c = 0; c < 4; ++c) {
      if (skip[c]) continue;
      double eta = m.z[c];
      for (int j = 0; j < 4; ++j) eta += m.w(j, c) * x[j];
      const double p = 1.0 / (1.0 + std::exp(-eta));
      expected += r[c] ? std::log(1.0 - p) : std::log(p);
    }
    EXPECT_NEAR(log_prob_r(m, r, x, skip), expected, 1e-10);
  }
}

TEST(LogProbR, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  MnarModel m = MnarModel::zeros(3);
  for (Eigen::Index i = 0; i < m.w.size(); ++i) m.w.data()[i] = standard_normal(rng);
  m.enforce_support();
  m.z = randv(3, rng);
  const Vector x = randv(3, rng);
  const BitVector r{{0, 1, 0}}, skip{{0, 0, 1}};
  Vector grad_eta;
  log_prob_r(m, r, x, skip, &grad_eta);
  Matrix gw = Matrix::Zero(3, 3);
  Vector gz = Vector::Zero(3);
  accumulate_mnar_gradient(grad_eta, x, gw, gz);
  Vector analytic(12);
  analytic << gw.reshaped(), gz;
  Vector params(12);
  params << m.w.reshaped(), m.z;
  const Vector fd = oracle::fd_gradient(
      [&](const Vector& v) {
        MnarModel p{v.head(9).reshaped(3, 3), v.tail(3), std::nullopt};
        return log_prob_r(p, r, x, skip);
      },
      params);
  EXPECT_LT(oracle::max_rel_error(analytic, fd), 1e-6);
}

TEST(SampleR, Examples) {
  Rng rng(4);
  MnarModel low = MnarModel::zeros(3);
  low.z.setConstant(-20.0);
  EXPECT_EQ(sample_r(low, randv(3, rng), BitVector::Zero(3), rng), BitVector::Ones(3));
  MnarModel high = MnarModel::zeros(3);
  high.z.setConstant(20.0);
  EXPECT_EQ(sample_r(high, randv(3, rng), BitVector::Ones(3), rng), BitVector::Ones(3));
}

TEST(SampleR, EmpiricalRateMatches) {
  Rng rng(5);
  MnarModel m = MnarModel::zeros(1);
  m.z[0] = logit(0.3);
  int missing = 0;
  for (int i = 0; i < 10000; ++i) missing += sample_r(m, Vector::Zero(1), BitVector::Zero(1), rng)[0] == 0;
  EXPECT_NEAR(missing / 10000.0, 0.30, 0.02);
}

TEST(FitCompleteCases, RecoversMcarIntercepts) {
  Rng rng(6);
  MnarModel truth = MnarModel::zeros(3);
  truth.z.setConstant(logit(0.2));
  const Dataset d = censored(truth, 10000, rng);
  const MnarModel fit = fit_complete_cases(d);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(fit.z[c], logit(0.2), 0.15);
  EXPECT_LT(fit.w.cwiseAbs().maxCoeff(), 0.1);
}

TEST(FitCompleteCases, NoMissingnessHitsSmoothingFloor) {
  Rng rng(7);
  MnarModel truth = MnarModel::zeros(3);
  truth.z.setConstant(-800.0);
  const Dataset d = censored(truth, 500, rng);
  const MnarModel fit = fit_complete_cases(d);
  for (int c = 0; c < 3; ++c) EXPECT_LE(fit.z[c], logit(1.0 / 502.0) + 1e-12);
  EXPECT_EQ(fit.w.cwiseAbs().maxCoeff(), 0.0);
}

TEST(FitCompleteCases, SingleParentSign) {
  int positive = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    MnarModel truth = MnarModel::zeros(2);
    truth.w(0, 1) = 2.0;
    truth.z[1] = -1.0;
    truth.z[0] = -20.0;
    const MnarModel fit = fit_complete_cases(censored(truth, 5000, rng));
    positive += fit.w(0, 1) > 0.0;
  }
  EXPECT_GE(positive, 9);
}

TEST(FitCompleteCases, HeavyPenaltyGivesMarginalLogits) {
  Rng rng(8);
  MnarModel truth = MnarModel::zeros(3);
  truth.w(0, 2) = 1.5;
  truth.w(1, 0) = -1.0;
  truth.z.setConstant(-1.0);
  const Dataset d = censored(truth, 4000, rng);
  LogisticFitOptions opt;
  opt.lambda = 1e3;
  const MnarModel fit = fit_complete_cases(d, opt);
  EXPECT_EQ(fit.w.cwiseAbs().maxCoeff(), 0.0);
  // With w = 0 the intercept is the logit of the missing rate on the rows used.
  for (int c = 0; c < 3; ++c) {
    int n = 0, m = 0;
    for (int i = 0; i < d.n(); ++i) {
      bool others = true;
      for (int j = 0; j < 3; ++j) others = others && (j == c || d.r(i, j));
      if (!others) continue;
      ++n;
      m += d.r(i, c) == 0;
    }
    EXPECT_NEAR(fit.z[c], logit(static_cast<double>(m) / n), 1e-4);
  }
}

TEST(FitCompleteCases, NoUsableRowsThrows) {
  Dataset d;
  d.y = Matrix::Constant(2, 2, kMissing);
  d.r = BitMatrix::Zero(2, 2);
  d.s = BitMatrix::Ones(2, 2);
  EXPECT_THROW(fit_complete_cases(d), TrainingError);
}

TEST(ExtractMEdges, Examples) {
  MnarModel m = MnarModel::zeros(3);
  EXPECT_EQ(extract_m_edges(m).edge_count(), 0);
  m.w(0, 1) = 0.5;
  const EdgePattern p = extract_m_edges(m, 0.1);
  EXPECT_EQ(p.edge_count(), 1);
  EXPECT_TRUE(p.has(0, 1));
  EXPECT_THROW(extract_m_edges(m, 0.0), ConfigError);
}

TEST(MnarModel, ValidateRejectsSelfCensoring) {
  MnarModel m = MnarModel::zeros(2);
  m.w(1, 1) = 0.3;
  EXPECT_THROW(m.validate(), DataError);
  m.enforce_support();
  EXPECT_NO_THROW(m.validate());
}
