#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "optimizer_fixtures.hpp"
#include "tilt/is_optimizer.hpp"
#include "tilt/reference_oracles.hpp"

namespace {

using namespace tilt;
using tilt::testing::random_config;

Payoff constant_payoff(std::size_t d, double c = 1.0) {
  return Payoff(d, [c](std::span<const double>) { return c; });
}

Payoff exponential_payoff(double sigma) {
  return Payoff(1, [sigma](std::span<const double> x) { return std::exp(sigma * x[0]); });
}

// Direct evaluation of (1/n) sum f^2(G_i) exp(-A v . G_i + |A v|^2 / 2)
// without any stabilization. Only valid for moderate exponents.
double naive_vn(const WeightTable& w, const DriftMap& a, const Eigen::VectorXd& v) {
  const Eigen::VectorXd theta = a.apply(v);
  const SampleBlock& s = w.samples();
  double sum = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < s.dim(); ++j) dot += theta[static_cast<Eigen::Index>(j)] * s.at(i, j);
    sum += w.weights()[i] * std::exp(-dot + 0.5 * theta.squaredNorm());
  }
  return sum / static_cast<double>(s.size());
}

TEST(PrecomputeWeights, ConstantPayoffGivesUnitWeights) {
  const SampleBlock s = draw_samples(new_stream(1, 0), 50, 2);
  const WeightTable w = precompute_weights(s, constant_payoff(2));
  EXPECT_EQ(w.nonzero_count(), 50u);
  for (double x : w.weights()) EXPECT_EQ(x, 1.0);
  EXPECT_EQ(&w.samples(), &s);
}

TEST(PrecomputeWeights, DeepOutOfTheMoneyDigitalIsDegenerate) {
  const SampleBlock s = draw_samples(new_stream(1, 0), 10, 1);
  const Payoff digital = build_payoff(BlackScholesMulti{1, {1.0}, {100.0}, {0.2}, 0.05, 0.0}, Digital{1e4});
  try {
    precompute_weights(s, digital);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegeneratePayoff);
  }
}

TEST(PrecomputeWeights, Table1BasketHasManyNonzeroWeights) {
  const std::size_t d = 40, n = 10000;
  const BlackScholesMulti m{d, {1.0}, std::vector<double>(d, 50.0), std::vector<double>(d, 0.2), 0.05, 0.2};
  const Payoff f = build_payoff(m, Basket{std::vector<double>(d, 1.0 / d), 50.0});
  const SampleBlock s = draw_samples(new_stream(5, 0), n, d);
  const WeightTable w = precompute_weights(s, f);
  EXPECT_GT(w.nonzero_count(), n / 10);
}

TEST(PrecomputeWeights, DimensionMismatch) {
  const SampleBlock s = draw_samples(new_stream(1, 0), 10, 2);
  EXPECT_THROW(precompute_weights(s, constant_payoff(3)), Error);
}

TEST(EvalVn, EmptyTiltOfConstantIsOne) {
  const SampleBlock s = draw_samples(new_stream(2, 0), 100, 3);
  const WeightTable w = precompute_weights(s, constant_payoff(3));
  EXPECT_NEAR(eval_vn(w, identity_map(3), Eigen::VectorXd::Zero(3)), 1.0, 1e-14);
}

TEST(EvalVn, MatchesNaiveSumAndExpOfUn) {
  for (unsigned k = 0; k < 20; ++k) {
    const auto c = random_config(k);
    const double vn = eval_vn(*c.weights, *c.drift, c.vartheta);
    const double un = eval_un(*c.weights, *c.drift, c.vartheta);
    EXPECT_NEAR(vn, naive_vn(*c.weights, *c.drift, c.vartheta), 1e-10 * vn) << c.label;
    EXPECT_NEAR(vn, std::exp(un) / static_cast<double>(c.samples->size()), 1e-10 * vn) << c.label;
  }
}

TEST(EvalVn, ExponentialPayoffAgreesWithQuadratureAndMonteCarlo) {
  const double sigma = 0.2, theta = 0.2;
  const std::size_t n = 100000;
  const Payoff f = exponential_payoff(sigma);
  const SampleBlock s = draw_samples(new_stream(3, 0), n, 1);
  const WeightTable w = precompute_weights(s, f);
  const double vn = eval_vn(w, identity_map(1), Eigen::VectorXd::Constant(1, theta));

  // Quadrature of E[f^2(G) exp(-theta G + theta^2/2)] and its closed form.
  const double quad = gauss_hermite_expectation(
      [&](double x) { return std::exp(2 * sigma * x) * std::exp(-theta * x + 0.5 * theta * theta); });
  const double exact = std::exp((2 * sigma - theta) * (2 * sigma - theta) / 2 + theta * theta / 2);
  ASSERT_NEAR(quad, exact, 1e-12);

  // Monte Carlo standard error of the summands.
  double sum2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double term = w.weights()[i] * std::exp(-theta * s.at(i, 0) + 0.5 * theta * theta);
    sum2 += term * term;
  }
  const double se = std::sqrt((sum2 / n - vn * vn) / n);
  EXPECT_LT(std::fabs(vn - quad), 4.0 * se);
}

TEST(EvalVn, StableForLargeTilts) {
  const SampleBlock s = draw_samples(new_stream(4, 0), 1000, 2);
  const WeightTable w = precompute_weights(s, constant_payoff(2));
  // exp(-theta . G) alone overflows for |theta| ~ 400; u_n stays finite.
  const double u = eval_un(w, identity_map(2), Eigen::Vector2d(300.0, -300.0));
  EXPECT_TRUE(std::isfinite(u));
  EXPECT_THROW(eval_vn(w, identity_map(2), Eigen::Vector2d(300.0, -300.0)), Error);
}

TEST(EvalUn, ConstantPayoffAtZeroIsLogN) {
  const SampleBlock s = draw_samples(new_stream(2, 0), 123, 2);
  const WeightTable w = precompute_weights(s, constant_payoff(2));
  EXPECT_NEAR(eval_un(w, identity_map(2), Eigen::VectorXd::Zero(2)), std::log(123.0), 1e-14);
}

TEST(EvalUn, SingleSampleCompletesTheSquare) {
  const SampleBlock s = draw_samples(new_stream(6, 0), 1, 3);
  const Payoff f = constant_payoff(3, 1.7);
  const WeightTable w = precompute_weights(s, f);
  Eigen::VectorXd g(3);
  for (Eigen::Index j = 0; j < 3; ++j) g[j] = s.at(0, static_cast<std::size_t>(j));
  const Eigen::Vector3d v(0.3, -0.1, 0.8);
  EXPECT_NEAR(eval_un(w, identity_map(3), v), 0.5 * v.squaredNorm() - v.dot(g) + std::log(1.7 * 1.7), 1e-13);
}

TEST(EvalUnDerivatives, SinglePoint) {
  const SampleBlock s = draw_samples(new_stream(6, 0), 1, 3);
  const WeightTable w = precompute_weights(s, constant_payoff(3));
  const UnDerivatives der = eval_un_derivatives(w, identity_map(3), Eigen::VectorXd::Zero(3));
  for (Eigen::Index j = 0; j < 3; ++j) EXPECT_NEAR(der.gradient[j], -s.at(0, static_cast<std::size_t>(j)), 1e-15);
  EXPECT_LE((der.hessian - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(EvalUnDerivatives, TwoPointMoments) {
  const SampleBlock s = draw_samples(new_stream(12, 0), 2, 1);
  const double g0 = s.at(0, 0), g1 = s.at(1, 0);
  // Two-point weighted covariance under equal weights: ((g0 - g1)/2)^2.
  const WeightTable w(s, {1.0, 1.0});
  const UnDerivatives der = eval_un_derivatives(w, identity_map(1), Eigen::VectorXd::Zero(1));
  EXPECT_NEAR(der.gradient[0], -(g0 + g1) / 2, 1e-15);
  EXPECT_NEAR(der.hessian(0, 0), 1.0 + 0.25 * (g0 - g1) * (g0 - g1), 1e-14);
}

TEST(EvalUnDerivatives, MatchFiniteDifferences) {
  const double h = 1e-4;
  for (unsigned k = 0; k < 20; ++k) {
    const auto c = random_config(k);
    const TiltObjective obj(*c.weights, *c.drift);
    const UnDerivatives der = obj.derivatives(c.vartheta);
    const Eigen::Index dr = c.vartheta.size();
    Eigen::VectorXd fd_grad(dr);
    Eigen::MatrixXd fd_hess(dr, dr);
    for (Eigen::Index j = 0; j < dr; ++j) {
      const Eigen::VectorXd e = Eigen::VectorXd::Unit(dr, j) * h;
      fd_grad[j] = (obj.value(c.vartheta + e) - obj.value(c.vartheta - e)) / (2 * h);
      fd_hess.col(j) = (obj.derivatives(c.vartheta + e).gradient - obj.derivatives(c.vartheta - e).gradient) / (2 * h);
    }
    EXPECT_LE((fd_grad - der.gradient).norm(), 1e-4 * std::max(1.0, der.gradient.norm())) << c.label;
    EXPECT_LE((fd_hess - der.hessian).norm(), 1e-4 * std::max(1.0, der.hessian.norm())) << c.label;
  }
}

TEST(OptimizerProperties, HessianDominatesGram) {
  for (unsigned k = 0; k < 100; ++k) {
    const auto c = random_config(k, 200);
    const UnDerivatives der = eval_un_derivatives(*c.weights, *c.drift, 2.0 * c.vartheta);
    const Eigen::MatrixXd excess = der.hessian - c.drift->gram().matrix +
                                   1e-10 * Eigen::MatrixXd::Identity(c.vartheta.size(), c.vartheta.size());
    EXPECT_EQ(Eigen::LLT<Eigen::MatrixXd>(excess).info(), Eigen::Success) << c.label;
  }
}

TEST(OptimizerProperties, WeightScalingShiftsUnOnly) {
  for (unsigned k = 0; k < 10; ++k) {
    const auto c = random_config(k);
    std::vector<double> scaled(c.weights->weights().begin(), c.weights->weights().end());
    for (double& x : scaled) x *= 7.5;
    const WeightTable w2(*c.samples, scaled);
    const TiltObjective o1(*c.weights, *c.drift), o2(w2, *c.drift);
    const UnDerivatives d1 = o1.derivatives(c.vartheta), d2 = o2.derivatives(c.vartheta);
    EXPECT_NEAR(d2.value - d1.value, std::log(7.5), 1e-12);
    EXPECT_LE((d1.gradient - d2.gradient).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((d1.hessian - d2.hessian).cwiseAbs().maxCoeff(), 1e-12);
    const OptimResult r1 = newton_minimize(o1), r2 = newton_minimize(o2);
    EXPECT_LE((r1.theta - r2.theta).cwiseAbs().maxCoeff(), 1e-12) << c.label;
  }
}

TEST(OptimizerProperties, MinimizerBeatsProbes) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> normal;
  for (unsigned k = 0; k < 10; ++k) {
    const auto c = random_config(k);
    const TiltObjective obj(*c.weights, *c.drift);
    const OptimResult r = newton_minimize(obj);
    const double at_min = obj.vn(r.theta);
    EXPECT_NEAR(at_min, r.v_value, 1e-10 * at_min);
    EXPECT_LE(at_min, obj.vn(Eigen::VectorXd::Zero(r.theta.size())) + 1e-9);
    for (int p = 0; p < 100; ++p) {
      Eigen::VectorXd probe = r.theta;
      for (auto& x : probe) x += 0.3 * normal(rng);
      EXPECT_LE(at_min, obj.vn(probe) + 1e-9) << c.label;
    }
  }
}

TEST(OptimizerProperties, AcceptedIteratesStrictlyDescend) {
  for (unsigned k = 0; k < 20; ++k) {
    const auto c = random_config(k);
    NewtonOptions opts;
    opts.x0 = 3.0 * c.vartheta;
    const OptimResult r = newton_minimize(*c.weights, *c.drift, opts);
    for (std::size_t i = 1; i < r.u_history.size(); ++i) EXPECT_LT(r.u_history[i], r.u_history[i - 1]) << c.label;
    EXPECT_LE(r.gradient_norm, 1e-6);
    EXPECT_EQ(static_cast<std::size_t>(r.iterations) + 1, r.u_history.size());
  }
}

TEST(OptimizerProperties, ReductionsAreThreadCountIndependent) {
  const std::size_t d = 6, n = 20000;
  const BlackScholesMulti m{d, {1.0}, std::vector<double>(d, 50.0), std::vector<double>(d, 0.2), 0.05, 0.2};
  const Payoff f = build_payoff(m, Basket{std::vector<double>(d, 1.0 / d), 50.0});
  const SampleBlock s = draw_samples(new_stream(5, 0), n, d);
  set_thread_count(1);
  const WeightTable w1 = precompute_weights(s, f);
  const OptimResult r1 = newton_minimize(w1, identity_map(d));
  set_thread_count(5);
  const WeightTable w5 = precompute_weights(s, f);
  const OptimResult r5 = newton_minimize(w5, identity_map(d));
  set_thread_count(1);
  EXPECT_EQ(r1.theta, r5.theta);
  EXPECT_EQ(r1.u_value, r5.u_value);
  EXPECT_EQ(r1.iterations, r5.iterations);
}

TEST(NewtonMinimize, SingleSampleConvergesInOneStep) {
  const SampleBlock s = draw_samples(new_stream(9, 0), 1, 4);
  const WeightTable w = precompute_weights(s, constant_payoff(4, 2.0));
  const OptimResult r = newton_minimize(w, identity_map(4));
  EXPECT_EQ(r.iterations, 1);
  EXPECT_TRUE(r.single_nonzero_weight);
  for (Eigen::Index j = 0; j < 4; ++j) EXPECT_NEAR(r.theta[j], s.at(0, static_cast<std::size_t>(j)), 1e-15);
}

TEST(NewtonMinimize, ExponentialPayoffRecoversSigma) {
  const SampleBlock s = draw_samples(new_stream(10, 0), 10000, 1);
  const WeightTable w = precompute_weights(s, exponential_payoff(0.2));
  const OptimResult r = newton_minimize(w, identity_map(1));
  EXPECT_LE(std::fabs(r.theta[0] - 0.2), 0.025);
  EXPECT_LE(r.iterations, 10);
  EXPECT_LE(r.gradient_norm, 1e-6);
}

TEST(NewtonMinimize, ConvergesFromFarStartWithSafeguard) {
  const SampleBlock s = draw_samples(new_stream(11, 0), 500, 1);
  const WeightTable w = precompute_weights(s, constant_payoff(1));
  NewtonOptions opts;
  opts.x0 = Eigen::VectorXd::Constant(1, 40.0);
  const OptimResult r = newton_minimize(w, identity_map(1), opts);
  EXPECT_LE(r.gradient_norm, 1e-6);
  EXPECT_LE(std::fabs(r.theta[0]), 0.2);
}

TEST(NewtonMinimize, IterationCapRaisesConvergenceFailure) {
  const auto c = random_config(0);
  NewtonOptions opts;
  opts.max_iter = 0;
  opts.x0 = c.vartheta;
  try {
    newton_minimize(*c.weights, *c.drift, opts);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConvergenceFailure);
  }
}

TEST(ThetaCovariance, ConstantPayoffQuarter) {
  const SampleBlock s = draw_samples(new_stream(13, 0), 1000000, 1);
  const WeightTable w = precompute_weights(s, constant_payoff(1));
  const OptimResult r = newton_minimize(w, identity_map(1));
  const ThetaCovariance cov = estimate_theta_covariance(w, identity_map(1), r.theta);
  EXPECT_NEAR(cov.gamma(0, 0), 0.25, 0.01);
  EXPECT_NEAR(cov.hessian(0, 0), 2.0, 0.02);
}

TEST(ThetaCovariance, ExponentialPayoffMatchesGaussianMoments) {
  const double sigma = 0.2;
  const double expected = std::exp(sigma * sigma) * (1 + sigma * sigma) / 4;
  const SampleBlock s = draw_samples(new_stream(14, 0), 1000000, 1);
  const WeightTable w = precompute_weights(s, exponential_payoff(sigma));
  const OptimResult r = newton_minimize(w, identity_map(1));
  const ThetaCovariance cov = estimate_theta_covariance(w, identity_map(1), r.theta);
  EXPECT_NEAR(cov.gamma(0, 0), expected, 0.1 * expected);
}

TEST(ThetaCovariance, SymmetricPositiveSemidefinite) {
  for (unsigned k = 0; k < 10; ++k) {
    const auto c = random_config(k, 2000);
    const OptimResult r = newton_minimize(*c.weights, *c.drift);
    const ThetaCovariance cov = estimate_theta_covariance(*c.weights, *c.drift, r.theta);
    const auto dr = cov.gamma.rows();
    EXPECT_LE((cov.gamma - cov.gamma.transpose()).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_EQ(Eigen::LLT<Eigen::MatrixXd>(cov.gamma + 1e-12 * Eigen::MatrixXd::Identity(dr, dr)).info(), Eigen::Success)
        << c.label;
  }
}

}  // namespace
