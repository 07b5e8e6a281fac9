#include <gtest/gtest.h>

#include "mnarflow/sem.hpp"
#include "oracles.hpp"

using namespace mnarflow;

namespace {

Matrix randn(int r, int c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * standard_normal(rng);
  return m;
}

Vector randv(int n, Rng& rng, double scale = 1.0) { return randn(n, 1, rng, scale); }

MlpSem random_mlp(int k, int h, Rng& rng, Activation act = Activation::tanh) {
  MlpSem net;
  net.w1 = randn(k, h, rng, 0.5);
  net.b1 = randv(h, rng, 0.3);
  net.w2 = randn(h, k, rng, 0.5);
  net.b2 = randv(k, rng, 0.3);
  net.activation = act;
  return net;
}

Matrix random_mask(int k, Rng& rng) {
  Matrix m(k, k);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform01(rng);
  m.diagonal().setZero();
  return m;
}

LinearSem chain(double b) {
  LinearSem lin{Matrix::Zero(2, 2)};
  lin.b(0, 1) = b;
  return lin;
}

}  // namespace

TEST(SampleMask, SaturatedLogitsGiveOnes) {
  Rng rng(1);
  GumbelMask g{Matrix::Constant(4, 4, 1e6), 0.3, false};
  const MaskSample s = sample_mask(g, rng);
  for (int j = 0; j < 4; ++j)
    for (int k = 0; k < 4; ++k) EXPECT_EQ(s.value(j, k), j == k ? 0.0 : 1.0);
}

TEST(SampleMask, ZeroLogitMeanIsHalf) {
  Rng rng(2);
  GumbelMask g{Matrix::Zero(3, 3), 1.0, false};
  double sum = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const MaskSample s = sample_mask(g, rng);
    EXPECT_EQ(s.value.diagonal().cwiseAbs().sum(), 0.0);
    sum += s.value(0, 1);
  }
  const double mean = sum / 10000.0;
  EXPECT_GE(mean, 0.45);
  EXPECT_LE(mean, 0.55);
}

TEST(SampleMask, HardModeThresholds) {
  Rng rng(3);
  GumbelMask g{randn(4, 4, rng), 0.5, true};
  const MaskSample s = sample_mask(g, rng);
  for (Eigen::Index i = 0; i < s.value.size(); ++i) {
    EXPECT_TRUE(s.value.data()[i] == 0.0 || s.value.data()[i] == 1.0);
  }
}

TEST(ForwardF, ZeroMaskGivesConstant) {
  Rng rng(4);
  const SemModel lin = LinearSem{randn(3, 3, rng)};
  EXPECT_EQ(forward_f(lin, Matrix::Zero(3, 3), randv(3, rng)), Vector::Zero(3));
  const SemModel net = random_mlp(3, 5, rng);
  const Vector f0 = forward_f(net, Matrix::Zero(3, 3), Vector::Zero(3));
  EXPECT_LT((forward_f(net, Matrix::Zero(3, 3), randv(3, rng)) - f0).norm(), 1e-15);
}

TEST(ForwardF, LinearSingleEdge) {
  const SemModel m = chain(0.5);
  const Vector f = forward_f(m, full_mask(2), Vector{{2.0, 7.0}});
  EXPECT_DOUBLE_EQ(f[0], 0.0);
  EXPECT_DOUBLE_EQ(f[1], 1.0);
}

TEST(ForwardF, IdentityNetworkIsMatrixProduct) {
  Rng rng(5);
  const MlpSem net = random_mlp(4, 6, rng, Activation::identity);
  const Matrix mask = random_mask(4, rng);
  const Vector x = randv(4, rng);
  const Vector f = forward_f(net, mask, x);
  for (int k = 0; k < 4; ++k) {
    const Vector masked = x.cwiseProduct(mask.col(k));
    const Vector hidden = net.w1.transpose() * masked + net.b1;
    const double expected = net.w2.col(k).dot(hidden) + net.b2[k];
    EXPECT_NEAR(f[k], expected, 1e-12);
  }
}

TEST(ForwardF, MaskingInvariance) {
  Rng rng(6);
  const SemModel net = random_mlp(5, 7, rng);
  Matrix mask = random_mask(5, rng);
  mask(1, 3) = 0.0;
  Vector x = randv(5, rng);
  const double before = forward_f(net, mask, x)[3];
  x[1] += 3.7;
  EXPECT_DOUBLE_EQ(forward_f(net, mask, x)[3], before);
}

TEST(SemPoint, JacobianProductsMatchDense) {
  Rng rng(7);
  const SemModel net = random_mlp(5, 4, rng);
  const Matrix mask = random_mask(5, rng);
  const Vector x = randv(5, rng);
  const SemPoint pt(net, mask, x);
  const Matrix jac = pt.jacobian();
  const Vector v = randv(5, rng);
  EXPECT_LT((pt.jvp(v) - jac * v).norm(), 1e-12);
  EXPECT_LT((pt.vjp(v) - jac.transpose() * v).norm(), 1e-12);
  // Jacobian against finite differences of F.
  for (int j = 0; j < 5; ++j) {
    Vector up = x, down = x;
    up[j] += 1e-6;
    down[j] -= 1e-6;
    const Vector col = (forward_f(net, mask, up) - forward_f(net, mask, down)) / 2e-6;
    EXPECT_LT((col - jac.col(j)).norm(), 1e-8);
  }
}

TEST(SpectralNormalize, Examples) {
  Rng rng(8);
  MlpSem tiny = random_mlp(3, 4, rng);
  tiny.w1 *= 1e-3;
  tiny.w2 *= 1e-3;
  const MlpSem same = spectral_normalize(tiny);
  EXPECT_EQ(same.w1, tiny.w1);
  EXPECT_EQ(same.w2, tiny.w2);

  Matrix single = randn(6, 6, rng);
  single *= 10.0 / oracle::svd_norm(single);
  Matrix* layer[] = {&single};
  spectral_normalize_layers(layer, 0.9);
  EXPECT_NEAR(oracle::svd_norm(single), 0.9, 1e-6);

  MlpSem two = random_mlp(5, 5, rng);
  two.w1 *= 2.0 / oracle::svd_norm(two.w1);
  two.w2 *= 2.0 / oracle::svd_norm(two.w2);
  two.lipschitz_target = 0.9;
  const MlpSem scaled = spectral_normalize(two);
  EXPECT_NEAR(oracle::svd_norm(scaled.w1), 0.94868, 1e-5);
  EXPECT_NEAR(oracle::svd_norm(scaled.w2), 0.94868, 1e-5);
}

TEST(SpectralNormalize, Idempotent) {
  Rng rng(9);
  for (int t = 0; t < 10; ++t) {
    MlpSem net = random_mlp(6, 8, rng);
    net.w1 *= 3.0;
    const MlpSem once = spectral_normalize(net);
    const MlpSem twice = spectral_normalize(once);
    EXPECT_LT((once.w1 - twice.w1).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((once.w2 - twice.w2).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(ProjectContractive, LinearBound) {
  Rng rng(10);
  LinearSem lin{randn(6, 6, rng), 0.95};
  const LinearSem p = project_contractive(lin);
  EXPECT_LE(oracle::svd_norm(p.b), 0.95 + 1e-9);
  EXPECT_EQ(p.b.diagonal().cwiseAbs().sum(), 0.0);
}

TEST(EpsilonObserved, Examples) {
  Rng rng(11);
  const SemModel zero = LinearSem{Matrix::Zero(3, 3)};
  const Vector x = randv(3, rng);
  InterventionMask iv = InterventionMask::none(3);
  iv.observed[1] = 0;
  iv.clamp[1] = x[1];
  const Vector eps = epsilon_observed(zero, full_mask(3), x, iv);
  ASSERT_EQ(eps.size(), 2);
  EXPECT_EQ(eps[0], x[0]);
  EXPECT_EQ(eps[1], x[2]);

  InterventionMask all{BitVector::Zero(3), x};
  EXPECT_EQ(epsilon_observed(zero, full_mask(3), x, all).size(), 0);

  const Vector e = epsilon_observed(chain(0.5), full_mask(2), Vector{{1.0, 1.5}}, InterventionMask::none(2));
  EXPECT_DOUBLE_EQ(e[0], 1.0);
  EXPECT_DOUBLE_EQ(e[1], 1.0);
}

TEST(SolveFixedPoint, Examples) {
  Rng rng(12);
  const Vector eps = randv(3, rng);
  InterventionMask iv = InterventionMask::none(3);
  iv.observed[2] = 0;
  iv.clamp[2] = 0.7;
  const Vector x = solve_fixed_point(LinearSem{Matrix::Zero(3, 3)}, full_mask(3), iv, eps);
  EXPECT_EQ(x[0], eps[0]);
  EXPECT_EQ(x[1], eps[1]);
  EXPECT_EQ(x[2], 0.7);

  LinearSem cyc{Matrix::Zero(2, 2)};
  cyc.b(0, 1) = 0.5;
  cyc.b(1, 0) = 0.5;
  const Vector y = solve_fixed_point(cyc, full_mask(2), InterventionMask::none(2), Vector{{1.0, 1.0}});
  EXPECT_NEAR(y[0], 2.0, 1e-7);
  EXPECT_NEAR(y[1], 2.0, 1e-7);
}

TEST(SolveFixedPoint, AcyclicMatchesTopologicalSolve) {
  Rng rng(13);
  for (int t = 0; t < 20; ++t) {
    Matrix b = randn(6, 6, rng, 0.4).triangularView<Eigen::StrictlyUpper>();
    // Permute nodes so the order is not trivially 0..K-1.
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(6);
    perm.setIdentity();
    std::shuffle(perm.indices().data(), perm.indices().data() + 6, rng);
    b = perm * b * perm.transpose();
    const Vector eps = randv(6, rng);
    const Vector x = solve_fixed_point(LinearSem{b}, full_mask(6), InterventionMask::none(6), eps, {1e-13, 1000});
    EXPECT_LT((x - oracle::topological_solve(b, eps)).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(SolveFixedPoint, ContractionAndRoundTrip) {
  Rng rng(14);
  for (int t = 0; t < 20; ++t) {
    MlpSem net = spectral_normalize(random_mlp(5, 6, rng));
    const Matrix mask = full_mask(5);
    const Vector eps = randv(5, rng);
    InterventionMask iv = InterventionMask::none(5);
    iv.observed[t % 5] = 0;
    iv.clamp[t % 5] = 0.4;
    // Iterate by hand and check successive steps shrink by the target.
    const Vector d = iv.d();
    const Vector base = d.cwiseProduct(eps) + iv.clamp;
    Vector prev = base;
    Vector cur = d.cwiseProduct(forward_f(net, mask, prev)) + base;
    for (int it = 0; it < 20; ++it) {
      const Vector next = d.cwiseProduct(forward_f(net, mask, cur)) + base;
      EXPECT_LE((next - cur).norm(), net.lipschitz_target * (cur - prev).norm() + 1e-14);
      prev = cur;
      cur = next;
    }
    const double tol = 1e-10;
    const Vector x = solve_fixed_point(net, mask, iv, eps, {tol, 1000});
    const Vector back = epsilon_observed(net, mask, x, iv);
    const auto obs = indices_where(iv.observed, 1);
    for (std::size_t i = 0; i < obs.size(); ++i) EXPECT_NEAR(back[i], eps[obs[i]], 10 * tol);
  }
}

TEST(SolveFixedPoint, NonContractiveThrows) {
  LinearSem big{Matrix::Zero(2, 2)};
  big.b(0, 1) = 2.0;
  big.b(1, 0) = 2.0;
  EXPECT_THROW(solve_fixed_point(big, full_mask(2), InterventionMask::none(2), Vector::Ones(2), {1e-8, 200}),
               NonConvergenceError);
}

namespace {

// Objective a.F(x) + <G, J(x)> and its hand gradient.
double probe_objective(const SemModel& m, const Matrix& mask, const Vector& x, const Vector& a, const Matrix& g) {
  const SemPoint pt(m, mask, x);
  return a.dot(pt.f()) + g.cwiseProduct(pt.jacobian()).sum();
}

}  // namespace

TEST(Backward, MatchesFiniteDifferences) {
  Rng rng(15);
  for (int t = 0; t < 50; ++t) {
    const int k = (t % 2) ? 3 : 6;
    SemModel m;
    if (t % 3 == 0) {
      Matrix b = randn(k, k, rng, 0.4);
      b.diagonal().setZero();
      m = LinearSem{b};
    } else {
      m = random_mlp(k, 4, rng, t % 3 == 1 ? Activation::tanh : Activation::identity);
    }
    const Matrix mask = random_mask(k, rng);
    const Vector x = randv(k, rng);
    const Vector a = randv(k, rng);
    const Matrix g = randn(k, k, rng);

    SemModel grad = zeros_like(m);
    Matrix grad_mask = Matrix::Zero(k, k);
    SemPoint(m, mask, x).backward(a, g, grad, grad_mask);

    const Vector theta = pack(m);
    const Vector fd = oracle::fd_gradient(
        [&](const Vector& v) {
          SemModel p = m;
          unpack(p, v);
          return probe_objective(p, mask, x, a, g);
        },
        theta);
    EXPECT_LT(oracle::max_rel_error(pack(grad), fd), 1e-4) << "config " << t;

    const Vector fdm = oracle::fd_gradient(
        [&](const Vector& v) {
          Matrix mm = v.reshaped(k, k);
          return probe_objective(m, mm, x, a, g);
        },
        mask.reshaped());
    Matrix fdmask = fdm.reshaped(k, k);
    fdmask.diagonal().setZero();  // the diagonal is frozen
    EXPECT_LT(oracle::max_rel_error(grad_mask.reshaped(), fdmask.reshaped()), 1e-4) << "config " << t;
    EXPECT_EQ(grad_mask.diagonal().cwiseAbs().sum(), 0.0);
  }
}

TEST(Backward, ZeroInputSquaredOutputHasZeroGradient) {
  Rng rng(16);
  const SemModel m = LinearSem{randn(4, 4, rng)};
  const Matrix mask = full_mask(4);
  const SemPoint pt(m, mask, Vector::Zero(4));
  SemModel grad = zeros_like(m);
  Matrix grad_mask = Matrix::Zero(4, 4);
  pt.backward(2.0 * pt.f(), Matrix(), grad, grad_mask);
  EXPECT_EQ(std::get<LinearSem>(grad).b.cwiseAbs().sum(), 0.0);
}
