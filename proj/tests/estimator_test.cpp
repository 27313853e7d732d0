#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tilt/estimator.hpp"
#include "tilt/reference_oracles.hpp"

namespace {

using namespace tilt;

Payoff constant_payoff(std::size_t d, double c) {
  return Payoff(d, [c](std::span<const double>) { return c; });
}

Payoff exponential_payoff(double sigma) {
  return Payoff(1, [sigma](std::span<const double> x) { return std::exp(sigma * x[0]); });
}

Payoff table1_basket(std::size_t d = 40, double rho = 0.2, double strike = 50.0) {
  const BlackScholesMulti m{d, {1.0}, std::vector<double>(d, 50.0), std::vector<double>(d, 0.2), 0.05, rho};
  return build_payoff(m, Basket{std::vector<double>(d, 1.0 / static_cast<double>(d)), strike});
}

TEST(TiltedMean, ZeroTiltIsArithmeticMean) {
  const SampleBlock s = draw_samples(new_stream(1, 0), 5000, 1);
  const Payoff f = exponential_payoff(0.7);
  long double sum = 0.0L;
  for (std::size_t i = 0; i < s.size(); ++i) sum += std::exp(0.7 * s.at(i, 0));
  const double mean = static_cast<double>(sum / s.size());
  EXPECT_NEAR(tilted_mean(s, f, Eigen::VectorXd::Zero(1)), mean, 1e-14 * mean);
}

TEST(TiltedMean, ExponentialPayoffAtOptimumHasNoSpread) {
  const double sigma = 0.3;
  const SampleBlock s = draw_samples(new_stream(2, 0), 1000, 1);
  const Eigen::VectorXd theta = Eigen::VectorXd::Constant(1, sigma);
  const double expected = std::exp(0.5 * sigma * sigma);
  for (double t : tilted_terms(s, exponential_payoff(sigma), theta)) EXPECT_NEAR(t, expected, 1e-14);
  EXPECT_NEAR(tilted_mean(s, exponential_payoff(sigma), theta), expected, 1e-13);
}

TEST(TiltedMean, ConstantPayoffIsUnbiased) {
  const std::size_t n = 100000;
  const SampleBlock s = draw_samples(new_stream(3, 0), n, 2);
  const Payoff f = constant_payoff(2, 4.0);
  const Eigen::Vector2d theta(0.6, -0.3);
  const TiltedMoments m = tilted_moments(s, f, theta);
  const double se = std::sqrt((m.second - m.mean * m.mean) / n);
  EXPECT_LT(std::fabs(m.mean - 4.0), 4.0 * se);
}

TEST(TiltedMean, RejectsMismatchedDimensions) {
  const SampleBlock s = draw_samples(new_stream(3, 0), 10, 2);
  EXPECT_THROW(tilted_mean(s, constant_payoff(2, 1.0), Eigen::VectorXd::Zero(3)), Error);
  EXPECT_THROW(tilted_mean(s, constant_payoff(3, 1.0), Eigen::VectorXd::Zero(2)), Error);
}

TEST(TiltedMean, NonFiniteTermsAreReported) {
  const SampleBlock s = draw_samples(new_stream(3, 0), 10, 1);
  const Payoff bad(1, [](std::span<const double> x) { return x[0] > 0 ? INFINITY : 0.0; });
  try {
    tilted_mean(s, bad, Eigen::VectorXd::Zero(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteEstimate);
  }
}

TEST(VarianceEstimate, CrudeTableReconstruction) {
  const VarianceEstimate v = variance_estimate(13.56 + 3.304 * 3.304, 3.304);
  EXPECT_NEAR(v.variance, 13.56, 1e-12);
  EXPECT_FALSE(v.clamped);
}

TEST(VarianceEstimate, Boundary) {
  const VarianceEstimate v = variance_estimate(1.5 * 1.5, 1.5);
  EXPECT_EQ(v.variance, 0.0);
  EXPECT_FALSE(v.clamped);
}

TEST(VarianceEstimate, NegativeIsClamped) {
  const VarianceEstimate v = variance_estimate(1.0, 1.1);
  EXPECT_EQ(v.variance, 0.0);
  EXPECT_TRUE(v.clamped);
}

TEST(ConfidenceInterval, Multiplier) {
  EXPECT_NEAR(confidence_multiplier(0.95), 1.959964, 1e-6);
  EXPECT_THROW(confidence_multiplier(1.0), Error);
  EXPECT_THROW(confidence_multiplier(0.0), Error);
}

TEST(ConfidenceInterval, HalfWidth) {
  const Interval ci = confidence_interval(3.296, 1.74, 10000, 0.95);
  EXPECT_NEAR(0.5 * (ci.high - ci.low), 0.02585, 1e-5);
  EXPECT_NEAR(0.5 * (ci.high + ci.low), 3.296, 1e-14);
}

TEST(ConfidenceInterval, ZeroVarianceIsDegenerate) {
  const Interval ci = confidence_interval(2.0, 0.0, 10, 0.95);
  EXPECT_EQ(ci.low, 2.0);
  EXPECT_EQ(ci.high, 2.0);
  EXPECT_TRUE(ci.contains(2.0));
  EXPECT_THROW(confidence_interval(2.0, -1.0, 10, 0.95), Error);
}

TEST(Mode, RoundTripsNames) {
  for (Mode m : {Mode::Crude, Mode::Ris, Mode::Rris, Mode::TwoStage}) EXPECT_EQ(parse_mode(to_string(m)), m);
  EXPECT_FALSE(parse_mode("bogus").has_value());
}

TEST(RunPipeline, CrudeEqualsZeroTiltMeanBitwise) {
  const SampleBlock s = draw_samples(new_stream(4, 0), 3000, 40);
  const Payoff f = table1_basket();
  const EstimateReport r = run_pipeline(s, f, identity_map(40), Mode::Crude);
  EXPECT_EQ(r.price, tilted_mean(s, f, Eigen::VectorXd::Zero(40)));
  EXPECT_EQ(r.vartheta.size(), 0);
  EXPECT_FALSE(r.optimization_samples.has_value());
  EXPECT_LE(r.ci_low, r.price);
  EXPECT_GE(r.ci_high, r.price);
}

TEST(RunPipeline, CrudeVarianceOfExponentialPayoff) {
  const double sigma = 0.3;
  const SampleBlock s = draw_samples(new_stream(5, 0), 200000, 1);
  const EstimateReport r = run_pipeline(s, exponential_payoff(sigma), identity_map(1), Mode::Crude);
  const double quad = gauss_hermite_expectation([&](double x) { return std::exp(2 * sigma * x); }) -
                      std::pow(gauss_hermite_expectation([&](double x) { return std::exp(sigma * x); }), 2);
  EXPECT_NEAR(quad, std::exp(2 * sigma * sigma) - std::exp(sigma * sigma), 1e-12);
  EXPECT_NEAR(r.variance, quad, 0.1 * quad);
}

TEST(RunPipeline, RisVarianceOfExponentialPayoffIsNearZero) {
  const double sigma = 0.3;
  const SampleBlock s = draw_samples(new_stream(5, 0), 100000, 1);
  const EstimateReport r = run_pipeline(s, exponential_payoff(sigma), identity_map(1), Mode::Ris);
  EXPECT_LT(r.variance, 1e-3);
  EXPECT_NEAR(r.price, std::exp(0.5 * sigma * sigma), 1e-3);
}

TEST(RunPipeline, RisAndRrisShareTheEstimationSamples) {
  const auto grid = regular_grid(2.0, 24);
  const Payoff f = build_payoff(BlackScholesMulti{1, grid, {100.0}, {0.2}, 0.05, 0.0}, BarrierCall{110.0, 80.0});
  const SampleBlock s = draw_samples(new_stream(6, 3), 5000, 24);
  for (Mode mode : {Mode::Ris, Mode::Rris}) {
    const EstimateReport r = run_pipeline(s, f, path_drift_single(grid), mode);
    ASSERT_TRUE(r.optimization_samples.has_value());
    EXPECT_EQ(*r.optimization_samples, s.provenance());
    EXPECT_EQ(r.estimation_samples, s.provenance());
    EXPECT_EQ(r.vartheta.size(), mode == Mode::Ris ? 24 : 1);
    EXPECT_EQ(r.theta.size(), 24);
  }
}

TEST(RunPipeline, TwoStageOptimizesOnTheNextStream) {
  const SampleBlock s = draw_samples(new_stream(7, 10), 5000, 1);
  const Payoff f = build_payoff(BlackScholesMulti{1, {1.0}, {100.0}, {0.2}, 0.05, 0.0}, VanillaCall{120.0});
  const EstimateReport r = run_pipeline(s, f, identity_map(1), Mode::TwoStage);
  ASSERT_TRUE(r.optimization_samples.has_value());
  EXPECT_EQ(r.optimization_samples->seed, 7u);
  EXPECT_EQ(r.optimization_samples->stream_id, 11u);
  EXPECT_EQ(r.estimation_samples, s.provenance());
  EXPECT_NEAR(r.price, bs_call_price(100, 120, 0.05, 0.2, 1), 4.0 * std::sqrt(r.variance / 5000));
}

TEST(RunPipeline, DeterministicReports) {
  const Payoff f = table1_basket(10);
  auto run = [&] {
    const SampleBlock s = draw_samples(new_stream(8, 0), 4000, 10);
    return run_pipeline(s, f, identity_map(10), Mode::Ris);
  };
  const EstimateReport a = run();
  set_thread_count(4);
  const EstimateReport b = run();
  set_thread_count(1);
  EXPECT_EQ(a.price, b.price);
  EXPECT_EQ(a.variance, b.variance);
  EXPECT_EQ(a.vartheta, b.vartheta);
  EXPECT_EQ(a.ci_low, b.ci_low);
  EXPECT_EQ(a.iterations, b.iterations);
}

TEST(RunPipeline, ConvergenceFailureFallsBackToCrude) {
  const SampleBlock s = draw_samples(new_stream(9, 0), 2000, 10);
  const Payoff f = table1_basket(10);
  PipelineOptions opts;
  opts.newton.max_iter = 0;
  const EstimateReport r = run_pipeline(s, f, identity_map(10), Mode::Ris, opts);
  EXPECT_TRUE(r.fell_back_to_crude);
  EXPECT_FALSE(r.warning.empty());
  EXPECT_EQ(r.mode, Mode::Ris);
  EXPECT_EQ(r.price, run_pipeline(s, f, identity_map(10), Mode::Crude).price);
}

TEST(RunPipeline, DegeneratePayoffPropagates) {
  const SampleBlock s = draw_samples(new_stream(9, 0), 100, 1);
  try {
    run_pipeline(s, constant_payoff(1, 0.0), identity_map(1), Mode::Ris);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegeneratePayoff);
  }
  EXPECT_EQ(run_pipeline(s, constant_payoff(1, 0.0), identity_map(1), Mode::Crude).price, 0.0);
}

TEST(RunPipeline, ThetaCovarianceOnRequest) {
  const SampleBlock s = draw_samples(new_stream(10, 0), 20000, 1);
  PipelineOptions opts;
  opts.theta_covariance = true;
  const EstimateReport r = run_pipeline(s, exponential_payoff(0.2), identity_map(1), Mode::Ris, opts);
  ASSERT_TRUE(r.theta_cov.has_value());
  EXPECT_NEAR(r.theta_cov->gamma(0, 0), std::exp(0.04) * 1.04 / 4, 0.05);
}

TEST(EstimatorProperties, RisDominatesCrudeOnBasket) {
  const Payoff f = table1_basket();
  double crude = 0.0, ris = 0.0;
  for (std::uint64_t k = 0; k < 30; ++k) {
    const SampleBlock s = draw_samples(new_stream(11, k), 10000, 40);
    crude += run_pipeline(s, f, identity_map(40), Mode::Crude).variance;
    ris += run_pipeline(s, f, identity_map(40), Mode::Ris).variance;
  }
  EXPECT_LT(ris, crude / 5.0);
}

TEST(EstimatorProperties, FixedTiltIsUnbiased) {
  const Payoff f = build_payoff(BlackScholesMulti{1, {1.0}, {100.0}, {0.2}, 0.05, 0.0}, VanillaCall{110.0});
  const Eigen::VectorXd theta = Eigen::VectorXd::Constant(1, 0.8);
  const std::size_t reps = 10000;
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t r = 0; r < reps; ++r) {
    const double m = tilted_mean(draw_samples(new_stream(12, r), 100, 1), f, theta);
    sum += m;
    sum2 += m * m;
  }
  const double mean = sum / reps;
  const double se = std::sqrt((sum2 / reps - mean * mean) / reps);
  EXPECT_LT(std::fabs(mean - bs_call_price(100, 110, 0.05, 0.2, 1)), 4.0 * se);
}

TEST(Coverage, ConstantPayoffAlwaysCovered) {
  CoverageConfig cfg{constant_payoff(2, 2.5), identity_map(2)};
  cfg.mode = Mode::Crude;
  cfg.n = 256;
  cfg.replications = 50;
  cfg.reference = 2.5;
  const CoverageResult r = coverage_experiment(cfg);
  EXPECT_EQ(r.hits, 50u);
  EXPECT_EQ(r.failures, 0u);
  EXPECT_EQ(r.empirical_level, 1.0);
}

TEST(Coverage, WiderLevelCoversAtLeastAsOften) {
  const double price = bs_digital_price(100, 140, 0.05, 0.2, 1);
  CoverageConfig cfg{build_payoff(BlackScholesMulti{1, {1.0}, {100.0}, {0.2}, 0.05, 0.0}, Digital{140.0}),
                     identity_map(1)};
  cfg.n = 5000;
  cfg.replications = 200;
  cfg.reference = price;
  const CoverageResult r95 = coverage_experiment(cfg);
  cfg.options.level = 0.99;
  const CoverageResult r99 = coverage_experiment(cfg);
  EXPECT_GE(r99.hits, r95.hits);
  EXPECT_GT(r95.empirical_level, 0.85);
  EXPECT_LE(r95.hits, r95.replications);
}

}  // namespace
