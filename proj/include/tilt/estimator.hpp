#pragma once

// Tilted Monte Carlo estimation of E[f(G)]:
//
//   M_n(theta, f) = (1/n) sum_i f(G_i + theta) exp(-theta . G_i - |theta|^2 / 2)
//
// and the crude / RIS / RRIS / two-stage pipelines built on it. RIS and RRIS
// feed the same SampleBlock to the optimizer and to M_n.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tilt/drift_space.hpp"
#include "tilt/errors.hpp"
#include "tilt/gaussian_engine.hpp"
#include "tilt/is_optimizer.hpp"
#include "tilt/parallel.hpp"
#include "tilt/payoff_models.hpp"
#include "tilt/random.hpp"

namespace tilt {

enum class Mode { Crude, Ris, Rris, TwoStage };

inline const char* to_string(Mode mode) {
  switch (mode) {
    case Mode::Crude: return "crude";
    case Mode::Ris: return "ris";
    case Mode::Rris: return "rris";
    case Mode::TwoStage: return "two_stage";
  }
  return "?";
}

inline std::optional<Mode> parse_mode(const std::string& name) {
  if (name == "crude") return Mode::Crude;
  if (name == "ris") return Mode::Ris;
  if (name == "rris") return Mode::Rris;
  if (name == "two_stage" || name == "two-stage") return Mode::TwoStage;
  return std::nullopt;
}

namespace detail {

inline double tilted_term(const Payoff& payoff, std::span<const double> g, const Eigen::VectorXd& theta,
                          double half_norm2, std::span<double> shifted) {
  double dot = 0.0;
  for (std::size_t j = 0; j < g.size(); ++j) {
    shifted[j] = g[j] + theta[static_cast<Eigen::Index>(j)];
    dot += theta[static_cast<Eigen::Index>(j)] * g[j];
  }
  return payoff(shifted) * std::exp(-dot - half_norm2);
}

inline void check_tilt(const SampleBlock& samples, const Payoff& payoff, const Eigen::VectorXd& theta) {
  require(payoff.dim() == samples.dim() && static_cast<std::size_t>(theta.size()) == samples.dim(),
          ErrorCode::DimensionMismatch, "samples, payoff and drift must share the dimension");
  require(theta.allFinite(), ErrorCode::NonFiniteEstimate, "drift is not finite");
}

}  // namespace detail

/// The n summands of M_n(theta, f).
inline std::vector<double> tilted_terms(const SampleBlock& samples, const Payoff& payoff, const Eigen::VectorXd& theta) {
  detail::check_tilt(samples, payoff, theta);
  const double half = 0.5 * theta.squaredNorm();
  std::vector<double> terms(samples.size());
  const std::size_t blocks = (samples.size() + kReduceBlock - 1) / kReduceBlock;
  parallel_for(blocks, [&](std::size_t b) {
    std::vector<double> scratch(samples.dim()), shifted(samples.dim());
    const std::size_t end = std::min(samples.size(), (b + 1) * kReduceBlock);
    for (std::size_t i = b * kReduceBlock; i < end; ++i)
      terms[i] = detail::tilted_term(payoff, samples.row(i, scratch), theta, half, shifted);
  });
  return terms;
}

struct TiltedMoments {
  double mean = 0.0;
  double second = 0.0;  // (1/n) sum of squared summands
};

inline TiltedMoments tilted_moments(const SampleBlock& samples, const Payoff& payoff, const Eigen::VectorXd& theta) {
  detail::check_tilt(samples, payoff, theta);
  const double half = 0.5 * theta.squaredNorm();
  struct Acc {
    double sum, sum2;
  };
  const Acc acc = blocked_reduce(
      samples.size(),
      [&](std::size_t begin, std::size_t end) {
        std::vector<double> scratch(samples.dim()), shifted(samples.dim());
        Acc a{0.0, 0.0};
        for (std::size_t i = begin; i < end; ++i) {
          const double t = detail::tilted_term(payoff, samples.row(i, scratch), theta, half, shifted);
          a.sum += t;
          a.sum2 += t * t;
        }
        return a;
      },
      [](Acc a, const Acc& b) { return Acc{a.sum + b.sum, a.sum2 + b.sum2}; });
  const double n = static_cast<double>(samples.size());
  TiltedMoments m{acc.sum / n, acc.sum2 / n};
  require(std::isfinite(m.mean) && std::isfinite(m.second), ErrorCode::NonFiniteEstimate,
          "tilted estimator is not finite");
  return m;
}

inline double tilted_mean(const SampleBlock& samples, const Payoff& payoff, const Eigen::VectorXd& theta) {
  return tilted_moments(samples, payoff, theta).mean;
}

struct VarianceEstimate {
  double variance = 0.0;
  bool clamped = false;
};

/// max(second_moment - price^2, 0); small samples can make the raw value negative.
inline VarianceEstimate variance_estimate(double second_moment, double price) {
  const double raw = second_moment - price * price;
  if (raw < 0.0) return {0.0, true};
  return {raw, false};
}

/// Two-sided normal quantile z_{(1+level)/2}.
inline double confidence_multiplier(double level) {
  require(level > 0.0 && level < 1.0, ErrorCode::InvalidArgument, "confidence level must lie in (0, 1)");
  return normal_quantile(0.5 * (1.0 + level));
}

struct Interval {
  double low = 0.0;
  double high = 0.0;

  bool contains(double x) const noexcept { return low <= x && x <= high; }
};

inline Interval confidence_interval(double price, double variance, std::size_t n, double level) {
  require(variance >= 0.0 && n >= 1, ErrorCode::InvalidArgument, "confidence interval needs variance >= 0 and n >= 1");
  const double half = confidence_multiplier(level) * std::sqrt(variance / static_cast<double>(n));
  return {price - half, price + half};
}

struct PipelineOptions {
  NewtonOptions newton;
  double level = 0.95;
  std::size_t memory_budget = kDefaultSampleMemoryBudget;
  bool theta_covariance = false;  // also fill EstimateReport::theta_cov
};

struct EstimateReport {
  Mode mode = Mode::Crude;
  std::size_t n = 0;
  double price = 0.0;
  double variance = 0.0;
  double level = 0.95;
  double ci_low = 0.0;
  double ci_high = 0.0;
  Eigen::VectorXd vartheta;  // reduced parameter, empty for crude
  Eigen::VectorXd theta;     // drift A vartheta in R^d (zero for crude)
  int iterations = 0;
  double gradient_norm = 0.0;
  int damped_steps = 0;
  bool negative_variance_clamped = false;
  bool fell_back_to_crude = false;  // optimizer failed; crude figures reported
  bool single_nonzero_weight = false;
  std::string warning;
  RngStream estimation_samples;
  std::optional<RngStream> optimization_samples;
  std::optional<ThetaCovariance> theta_cov;
  double wall_seconds = 0.0;
};

namespace detail {

inline EstimateReport crude_report(const SampleBlock& samples, const Payoff& payoff, const PipelineOptions& opts) {
  EstimateReport r;
  r.mode = Mode::Crude;
  r.n = samples.size();
  r.level = opts.level;
  r.theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(samples.dim()));
  const TiltedMoments m = tilted_moments(samples, payoff, r.theta);
  r.price = m.mean;
  const VarianceEstimate v = variance_estimate(m.second, m.mean);
  r.variance = v.variance;
  r.negative_variance_clamped = v.clamped;
  r.estimation_samples = samples.provenance();
  return r;
}

inline void finish_interval(EstimateReport& r) {
  const Interval ci = confidence_interval(r.price, r.variance, r.n, r.level);
  r.ci_low = ci.low;
  r.ci_high = ci.high;
}

}  // namespace detail

/// crude: theta = 0. ris: A = identity. rris: the supplied A. The optimizer
/// and M_n share `samples` in both. two_stage: optimizes on the independent
/// stream stream_id + 1 and estimates on `samples`.
inline EstimateReport run_pipeline(const SampleBlock& samples, const Payoff& payoff, const DriftMap& drift, Mode mode,
                                   const PipelineOptions& opts = {}) {
  const auto start = std::chrono::steady_clock::now();
  require(payoff.dim() == samples.dim(), ErrorCode::DimensionMismatch, "payoff dimension differs from samples");
  EstimateReport report;
  if (mode == Mode::Crude) {
    report = detail::crude_report(samples, payoff, opts);
  } else {
    const DriftMap identity = DriftMap::identity(samples.dim());
    const DriftMap& map = mode == Mode::Ris ? identity : drift;
    require(map.dim() == samples.dim(), ErrorCode::DimensionMismatch, "drift map dimension differs from samples");

    std::optional<SampleBlock> independent;
    if (mode == Mode::TwoStage) {
      const RngStream& p = samples.provenance();
      independent.emplace(
          draw_samples(RngStream{p.seed, p.stream_id + 1, p.counter}, samples.size(), samples.dim(), opts.memory_budget));
    }
    const SampleBlock& opt_samples = independent ? *independent : samples;
    const WeightTable weights = precompute_weights(opt_samples, payoff);

    std::optional<OptimResult> opt;
    std::optional<TiltObjective> objective;
    try {
      objective.emplace(weights, map);
      opt = newton_minimize(*objective, opts.newton);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ConvergenceFailure && e.code() != ErrorCode::SingularHessian) throw;
      report = detail::crude_report(samples, payoff, opts);
      report.mode = mode;
      report.fell_back_to_crude = true;
      report.warning = e.what();
      report.optimization_samples = opt_samples.provenance();
    }
    if (opt) {
      report.mode = mode;
      report.n = samples.size();
      report.level = opts.level;
      report.vartheta = opt->theta;
      report.theta = map.apply(opt->theta);
      report.iterations = opt->iterations;
      report.gradient_norm = opt->gradient_norm;
      report.damped_steps = opt->damped_steps;
      report.single_nonzero_weight = opt->single_nonzero_weight;
      if (opt->single_nonzero_weight) report.warning = "only one sample has a nonzero payoff";
      report.estimation_samples = samples.provenance();
      report.optimization_samples = opt_samples.provenance();
      const TiltedMoments m = tilted_moments(samples, payoff, report.theta);
      report.price = m.mean;
      // Same samples: v_n at the minimizer is the second moment of the
      // summands. Independent samples: use the summands' own second moment.
      const VarianceEstimate v = variance_estimate(mode == Mode::TwoStage ? m.second : opt->v_value, m.mean);
      report.variance = v.variance;
      report.negative_variance_clamped = v.clamped;
      if (opts.theta_covariance) report.theta_cov = objective->theta_covariance(opt->theta);
    }
  }
  require(std::isfinite(report.variance), ErrorCode::NonFiniteEstimate, "variance estimate is not finite");
  detail::finish_interval(report);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

struct CoverageConfig {
  Payoff payoff;
  DriftMap drift;
  Mode mode = Mode::Ris;
  std::size_t n = 10000;
  std::uint64_t seed = 0;
  std::uint64_t first_stream = 0;  // replication r uses first_stream + 2 r
  std::size_t replications = 1000;
  double reference = 0.0;
  PipelineOptions options;
};

struct CoverageResult {
  std::size_t replications = 0;
  std::size_t hits = 0;
  std::size_t failures = 0;  // replications that raised; excluded from the level
  double level = 0.95;
  double empirical_level = 0.0;
};

inline CoverageResult coverage_experiment(const CoverageConfig& config) {
  require(config.replications >= 1, ErrorCode::InvalidArgument, "coverage needs at least one replication");
  std::vector<signed char> outcome(config.replications, -1);
  parallel_for(config.replications, [&](std::size_t r) {
    try {
      const SampleBlock samples = draw_samples(new_stream(config.seed, config.first_stream + 2 * r), config.n,
                                               config.payoff.dim(), config.options.memory_budget);
      const EstimateReport rep = run_pipeline(samples, config.payoff, config.drift, config.mode, config.options);
      outcome[r] = Interval{rep.ci_low, rep.ci_high}.contains(config.reference) ? 1 : 0;
    } catch (const Error&) {
      outcome[r] = -1;
    }
  });
  CoverageResult result;
  result.replications = config.replications;
  result.level = config.options.level;
  for (signed char o : outcome) {
    if (o < 0) ++result.failures;
    else result.hits += static_cast<std::size_t>(o);
  }
  const std::size_t valid = result.replications - result.failures;
  result.empirical_level = valid ? static_cast<double>(result.hits) / static_cast<double>(valid) : 0.0;
  return result;
}

}  // namespace tilt
