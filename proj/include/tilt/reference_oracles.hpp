#pragma once

// Independent ground truth for tests and acceptance runs: Black-Scholes
// closed forms and Gauss-Hermite quadrature of the variance proxy
// v(theta) = E[f^2(G) exp(-theta G + theta^2/2)] in one dimension.
//
// The normal CDF goes through std::erfc, which keeps tail values accurate
// to full relative precision.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "tilt/errors.hpp"

namespace tilt {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

inline double bs_call_price(double spot, double strike, double rate, double vol, double maturity) {
  require(spot > 0 && strike > 0 && vol > 0 && maturity > 0, ErrorCode::InvalidArgument,
          "bs_call_price needs positive spot, strike, vol and maturity");
  const double sd = vol * std::sqrt(maturity);
  const double d1 = (std::log(spot / strike) + (rate + 0.5 * vol * vol) * maturity) / sd;
  return spot * normal_cdf(d1) - strike * std::exp(-rate * maturity) * normal_cdf(d1 - sd);
}

inline double bs_put_price(double spot, double strike, double rate, double vol, double maturity) {
  require(spot > 0 && strike > 0 && vol > 0 && maturity > 0, ErrorCode::InvalidArgument,
          "bs_put_price needs positive spot, strike, vol and maturity");
  const double sd = vol * std::sqrt(maturity);
  const double d1 = (std::log(spot / strike) + (rate + 0.5 * vol * vol) * maturity) / sd;
  return strike * std::exp(-rate * maturity) * normal_cdf(sd - d1) - spot * normal_cdf(-d1);
}

/// e^{-rT} P(S_T > L)
inline double bs_digital_price(double spot, double level, double rate, double vol, double maturity) {
  require(spot > 0 && level > 0 && vol > 0 && maturity > 0, ErrorCode::InvalidArgument,
          "bs_digital_price needs positive parameters");
  const double d2 = (std::log(spot / level) + (rate - 0.5 * vol * vol) * maturity) / (vol * std::sqrt(maturity));
  return std::exp(-rate * maturity) * normal_cdf(d2);
}

/// Nodes and weights for E[g(G)], G ~ N(0, 1) (probabilists' Hermite),
/// from the eigen-decomposition of the Jacobi matrix. Weights sum to 1.
struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

inline GaussHermiteRule gauss_hermite_rule(std::size_t count) {
  require(count >= 1, ErrorCode::InvalidArgument, "need at least one quadrature node");
  const auto n = static_cast<Eigen::Index>(count);
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index k = 0; k + 1 < n; ++k) jacobi(k, k + 1) = jacobi(k + 1, k) = std::sqrt(static_cast<double>(k + 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  GaussHermiteRule rule;
  for (Eigen::Index k = 0; k < n; ++k) {
    rule.nodes.push_back(eig.eigenvalues()[k]);
    const double v0 = eig.eigenvectors()(0, k);
    rule.weights.push_back(v0 * v0);
  }
  return rule;
}

struct QuadratureSpec {
  std::size_t dimension = 1;  // 1 or 2
  std::size_t nodes = 128;    // per axis, >= 32
  double scan_range = 6.0;    // theta searched in [-scan_range, scan_range]
};

inline double gauss_hermite_expectation(const std::function<double(double)>& g, std::size_t nodes = 128) {
  const GaussHermiteRule rule = gauss_hermite_rule(nodes);
  double sum = 0.0;
  for (std::size_t k = 0; k < nodes; ++k) sum += rule.weights[k] * g(rule.nodes[k]);
  return sum;
}

/// E[g(G_1, G_2)] by the tensor rule.
inline double gauss_hermite_expectation_2d(const std::function<double(double, double)>& g, std::size_t nodes = 64) {
  const GaussHermiteRule rule = gauss_hermite_rule(nodes);
  double sum = 0.0;
  for (std::size_t a = 0; a < nodes; ++a)
    for (std::size_t b = 0; b < nodes; ++b)
      sum += rule.weights[a] * rule.weights[b] * g(rule.nodes[a], rule.nodes[b]);
  return sum;
}

struct ThetaStar {
  double theta = 0.0;
  double v_star = 0.0;
};

/// Minimizes v(theta) for a one-dimensional payoff. The tilt is absorbed by
/// the substitution G = Z - theta, giving v(theta) = e^{theta^2} E[f^2(Z - theta)],
/// which Gauss-Hermite resolves for any theta in the scan range.
inline ThetaStar quadrature_theta_star(const std::function<double(double)>& f, const QuadratureSpec& spec = {}) {
  require(spec.dimension == 1, ErrorCode::InvalidArgument, "quadrature_theta_star handles one-dimensional payoffs");
  require(spec.nodes >= 32, ErrorCode::InvalidArgument, "quadrature needs at least 32 nodes");
  const GaussHermiteRule rule = gauss_hermite_rule(spec.nodes);
  const std::size_t count = rule.nodes.size();

  // moments[0] = sum w f^2, [1] = sum w (2 theta - z) f^2, [2] = sum w (1 + (2 theta - z)^2) f^2
  auto moments = [&](double theta, int order) {
    double m[3] = {0.0, 0.0, 0.0};
    for (std::size_t k = 0; k < count; ++k) {
      const double value = f(rule.nodes[k] - theta);
      const double w = rule.weights[k] * value * value;
      const double r = 2.0 * theta - rule.nodes[k];
      m[0] += w;
      if (order >= 1) m[1] += w * r;
      if (order >= 2) m[2] += w * (1.0 + r * r);
    }
    return std::array<double, 3>{m[0], m[1], m[2]};
  };
  auto log_v = [&](double theta) { return theta * theta + std::log(moments(theta, 0)[0]); };

  const double step = 0.05;
  const auto points = static_cast<std::size_t>(std::ceil(2.0 * spec.scan_range / step)) + 1;
  std::size_t best = 0;
  double best_value = INFINITY;
  for (std::size_t k = 0; k < points; ++k) {
    const double value = log_v(-spec.scan_range + step * static_cast<double>(k));
    if (value < best_value) {
      best_value = value;
      best = k;
    }
  }
  require(std::isfinite(best_value) && best > 0 && best + 1 < points, ErrorCode::BracketFailure,
          "v(theta) has no interior minimum on the scan range");

  double lo = -spec.scan_range + step * static_cast<double>(best - 1);
  double hi = lo + 2.0 * step;
  const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = hi - ratio * (hi - lo), b = lo + ratio * (hi - lo);
  double fa = log_v(a), fb = log_v(b);
  while (hi - lo > 1e-9) {
    if (fa < fb) {
      hi = b, b = a, fb = fa;
      a = hi - ratio * (hi - lo), fa = log_v(a);
    } else {
      lo = a, a = b, fa = fb;
      b = lo + ratio * (hi - lo), fb = log_v(b);
    }
  }
  double theta = 0.5 * (lo + hi);
  const double bracket_lo = theta - step, bracket_hi = theta + step;
  for (int it = 0; it < 20; ++it) {
    const auto m = moments(theta, 2);
    if (!(m[2] > 0.0)) break;
    const double next = theta - m[1] / m[2];
    if (!(next > bracket_lo && next < bracket_hi)) break;
    const bool done = std::fabs(next - theta) < 1e-15;
    theta = next;
    if (done) break;
  }
  return {theta, std::exp(theta * theta) * moments(theta, 0)[0]};
}

/// Minimizer of v for the discounted digital e^{-rT} 1{S_T > L} driven by one
/// normal: v(theta) = e^{-2rT} e^{theta^2} P(G > c + theta), c the exercise
/// threshold for G. Closed form, so no quadrature of the indicator is needed.
inline ThetaStar digital_theta_star(double spot, double level, double rate, double vol, double maturity) {
  const double c = (std::log(level / spot) - (rate - 0.5 * vol * vol) * maturity) / (vol * std::sqrt(maturity));
  auto tail = [](double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); };
  // d/dtheta log v = 2 theta - pdf(c + theta) / tail(c + theta), increasing in theta.
  auto slope = [&](double theta) { return 2.0 * theta - normal_pdf(c + theta) / tail(c + theta); };
  double lo = -20.0, hi = 20.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (slope(mid) < 0.0 ? lo : hi) = mid;
  }
  const double theta = 0.5 * (lo + hi);
  return {theta, std::exp(-2.0 * rate * maturity + theta * theta) * tail(c + theta)};
}

}  // namespace tilt
