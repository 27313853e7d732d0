#pragma once

// Sample-average optimization of the importance sampling drift.
//
// For samples G_i, weights w_i = f^2(G_i) and a drift map A the optimizer
// minimizes
//
//   u_n(v) = |A v|^2 / 2 + log sum_i w_i exp(-A v . G_i)
//
// whose minimizer is the minimizer of the variance proxy
//
//   v_n(v) = (1/n) sum_i w_i exp(-A v . G_i + |A v|^2 / 2) = exp(u_n(v)) / n.
//
// Only samples with w_i > 0 enter either sum, and A v . G_i = v . (A^T G_i),
// so every evaluation works on the projected rows Y_i = A^T G_i in R^d'.
// Gradient and Hessian of u_n are
//
//   grad = A^T A v - E_p[Y],   hess = A^T A + Cov_p[Y],
//
// moments taken under the softmax weights p_i ~ w_i exp(-v . Y_i), all
// computed in max-shifted form.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "tilt/drift_space.hpp"
#include "tilt/errors.hpp"
#include "tilt/gaussian_engine.hpp"
#include "tilt/parallel.hpp"
#include "tilt/payoff_models.hpp"

namespace tilt {

/// f^2(G_i) for every stored sample, computed once before optimizing.
class WeightTable {
 public:
  WeightTable(const SampleBlock& samples, std::vector<double> weights) : samples_(&samples), weights_(std::move(weights)) {
    require(weights_.size() == samples.size(), ErrorCode::DimensionMismatch, "one weight per sample required");
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      require(std::isfinite(weights_[i]) && weights_[i] >= 0.0, ErrorCode::NonFiniteObjective,
              "weights must be finite and nonnegative");
      if (weights_[i] > 0.0) nonzero_.push_back(i);
    }
    require(!nonzero_.empty(), ErrorCode::DegeneratePayoff, "payoff vanishes on every sample");
  }

  /// The table refers to `samples`, which must outlive it.
  const SampleBlock& samples() const noexcept { return *samples_; }
  std::size_t size() const noexcept { return weights_.size(); }
  std::span<const double> weights() const noexcept { return weights_; }
  std::size_t nonzero_count() const noexcept { return nonzero_.size(); }
  std::span<const std::size_t> nonzero_indices() const noexcept { return nonzero_; }

 private:
  const SampleBlock* samples_;
  std::vector<double> weights_;
  std::vector<std::size_t> nonzero_;
};

inline WeightTable precompute_weights(const SampleBlock& samples, const Payoff& payoff) {
  require(payoff.dim() == samples.dim(), ErrorCode::DimensionMismatch, "payoff dimension differs from samples");
  std::vector<double> w(samples.size());
  const std::size_t d = samples.dim();
  const std::size_t blocks = (samples.size() + kReduceBlock - 1) / kReduceBlock;
  parallel_for(blocks, [&](std::size_t b) {
    std::vector<double> scratch(d);
    const std::size_t end = std::min(samples.size(), (b + 1) * kReduceBlock);
    for (std::size_t i = b * kReduceBlock; i < end; ++i) {
      const double f = payoff(samples.row(i, scratch));
      w[i] = f * f;
    }
  });
  return WeightTable(samples, std::move(w));
}

struct UnDerivatives {
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;
};

/// Plug-in estimate of the asymptotic covariance of sqrt(n)(v_n - v_*).
struct ThetaCovariance {
  Eigen::MatrixXd gamma;
  Eigen::MatrixXd hessian;           // Hessian of v_n at v_n's minimizer
  Eigen::MatrixXd score_covariance;  // sample covariance of the score terms
};

/// Projected, log-weighted view of a WeightTable under a drift map.
class TiltObjective {
 public:
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  TiltObjective(const WeightTable& table, const DriftMap& map)
      : n_(table.size()), gram_(map.gram().matrix) {
    const SampleBlock& samples = table.samples();
    require(map.dim() == samples.dim(), ErrorCode::DimensionMismatch, "drift map dimension differs from samples");
    const auto idx = table.nonzero_indices();
    const std::size_t m = idx.size();
    const std::size_t dr = map.reduced_dim();
    projected_.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(dr));
    log_weights_.resize(static_cast<Eigen::Index>(m));
    const std::size_t blocks = (m + kReduceBlock - 1) / kReduceBlock;
    parallel_for(blocks, [&](std::size_t b) {
      std::vector<double> scratch(samples.dim());
      const std::size_t end = std::min(m, (b + 1) * kReduceBlock);
      for (std::size_t k = b * kReduceBlock; k < end; ++k) {
        const auto row = samples.row(idx[k], scratch);
        map.apply_adjoint(row, std::span<double>(projected_.row(static_cast<Eigen::Index>(k)).data(), dr));
        log_weights_[static_cast<Eigen::Index>(k)] = std::log(table.weights()[idx[k]]);
      }
    });
  }

  std::size_t sample_count() const noexcept { return n_; }
  std::size_t reduced_dim() const noexcept { return static_cast<std::size_t>(gram_.rows()); }
  const RowMatrix& projected() const noexcept { return projected_; }

  /// u_n(v)
  double value(const Eigen::VectorXd& v) const {
    check_dim(v);
    Eigen::VectorXd s;
    const double shift = exponents(v, s);
    const double sum = pairwise_sum(static_cast<std::size_t>(s.size()),
                                    [&](std::size_t k) { return std::exp(s[static_cast<Eigen::Index>(k)] - shift); });
    const double u = 0.5 * v.dot(gram_ * v) + shift + std::log(sum);
    require(std::isfinite(u), ErrorCode::NonFiniteObjective, "u_n is not finite");
    return u;
  }

  /// v_n(v) = exp(u_n(v)) / n
  double vn(const Eigen::VectorXd& v) const {
    const double result = std::exp(value(v) - std::log(static_cast<double>(n_)));
    require(std::isfinite(result), ErrorCode::NonFiniteObjective, "v_n overflows");
    return result;
  }

  UnDerivatives derivatives(const Eigen::VectorXd& v) const {
    check_dim(v);
    const Softmax sm = softmax(v);
    const Eigen::Index dr = gram_.rows();
    const Eigen::VectorXd mean = sm.first_moment / sm.total;
    Eigen::MatrixXd cov = blocked_reduce(
        static_cast<std::size_t>(projected_.rows()),
        [&](std::size_t begin, std::size_t end) {
          const auto len = static_cast<Eigen::Index>(end - begin);
          const auto b = static_cast<Eigen::Index>(begin);
          RowMatrix z = projected_.middleRows(b, len).rowwise() - mean.transpose();
          z.array().colwise() *= sm.p.segment(b, len).array().sqrt();
          Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(dr, dr);
          acc.selfadjointView<Eigen::Lower>().rankUpdate(z.transpose());
          return acc;
        },
        [](Eigen::MatrixXd a, const Eigen::MatrixXd& b) {
          a += b;
          return a;
        });
    cov = cov.selfadjointView<Eigen::Lower>();
    cov /= sm.total;

    UnDerivatives out;
    out.value = 0.5 * v.dot(gram_ * v) + sm.shift + std::log(sm.total);
    out.gradient = gram_ * v - mean;
    out.hessian = gram_ + cov;
    require(std::isfinite(out.value) && out.gradient.allFinite() && out.hessian.allFinite(),
            ErrorCode::NonFiniteObjective, "u_n derivatives are not finite");
    return out;
  }

  /// Gamma = H^{-1} C H^{-1} with H the Hessian of v_n and C the covariance
  /// of the score A^T(A v - G) f^2(G) e^{-A v . G + |A v|^2/2}, both as
  /// sample averages over all n samples at v.
  ThetaCovariance theta_covariance(const Eigen::VectorXd& v) const {
    check_dim(v);
    const Softmax sm = softmax(v);
    const Eigen::Index dr = gram_.rows();
    const Eigen::VectorXd centre = gram_ * v;  // A^T A v
    struct Moments {
      Eigen::MatrixXd outer;  // sum p_i r_i r_i^T
      Eigen::MatrixXd score_outer;  // sum p_i^2 r_i r_i^T
      Eigen::VectorXd score_sum;  // sum p_i r_i
    };
    Moments mom = blocked_reduce(
        static_cast<std::size_t>(projected_.rows()),
        [&](std::size_t begin, std::size_t end) {
          const auto len = static_cast<Eigen::Index>(end - begin);
          const auto b = static_cast<Eigen::Index>(begin);
          RowMatrix r = (-projected_.middleRows(b, len)).rowwise() + centre.transpose();
          const Eigen::ArrayXd p = sm.p.segment(b, len).array();
          Moments acc{Eigen::MatrixXd::Zero(dr, dr), Eigen::MatrixXd::Zero(dr, dr), Eigen::VectorXd::Zero(dr)};
          RowMatrix scaled = r;
          scaled.array().colwise() *= p.sqrt();
          acc.outer.selfadjointView<Eigen::Lower>().rankUpdate(scaled.transpose());
          scaled = r;
          scaled.array().colwise() *= p;
          acc.score_outer.selfadjointView<Eigen::Lower>().rankUpdate(scaled.transpose());
          acc.score_sum = scaled.colwise().sum().transpose();
          return acc;
        },
        [](Moments a, const Moments& b) {
          a.outer += b.outer;
          a.score_outer += b.score_outer;
          a.score_sum += b.score_sum;
          return a;
        });
    const double n = static_cast<double>(n_);
    Eigen::MatrixXd outer = mom.outer.selfadjointView<Eigen::Lower>();
    Eigen::MatrixXd score_outer = mom.score_outer.selfadjointView<Eigen::Lower>();
    const Eigen::MatrixXd h = (sm.total / n) * gram_ + outer / n;
    const Eigen::VectorXd mean_score = mom.score_sum / n;
    const Eigen::MatrixXd c = score_outer / n - mean_score * mean_score.transpose();

    Eigen::LLT<Eigen::MatrixXd> llt(h);
    require(llt.info() == Eigen::Success, ErrorCode::SingularHessian, "Hessian of v_n is not positive definite");
    const Eigen::MatrixXd left = llt.solve(c);
    Eigen::MatrixXd gamma = llt.solve(left.transpose());
    gamma = 0.5 * (gamma + gamma.transpose()).eval();

    // p_i = phi_i / exp(shift + |A v|^2 / 2); undo the scaling for reporting.
    const double log_scale = sm.shift + 0.5 * v.dot(gram_ * v);
    ThetaCovariance out;
    out.gamma = std::move(gamma);
    out.hessian = std::exp(log_scale) * h;
    out.score_covariance = std::exp(2.0 * log_scale) * c;
    require(out.gamma.allFinite(), ErrorCode::NonFiniteObjective, "theta covariance is not finite");
    return out;
  }

 private:
  struct Softmax {
    Eigen::VectorXd p;  // exp(s_k - shift)
    double shift = 0.0;
    double total = 0.0;
    Eigen::VectorXd first_moment;  // sum p_k Y_k
  };

  void check_dim(const Eigen::VectorXd& v) const {
    require(v.size() == gram_.rows(), ErrorCode::DimensionMismatch, "parameter has wrong dimension");
    require(v.allFinite(), ErrorCode::NonFiniteObjective, "parameter is not finite");
  }

  /// s_k = log w_k - v . Y_k; returns max_k s_k.
  double exponents(const Eigen::VectorXd& v, Eigen::VectorXd& s) const {
    const Eigen::Index m = projected_.rows();
    s.resize(m);
    const std::size_t blocks = (static_cast<std::size_t>(m) + kReduceBlock - 1) / kReduceBlock;
    parallel_for(blocks, [&](std::size_t b) {
      const auto begin = static_cast<Eigen::Index>(b * kReduceBlock);
      const Eigen::Index len = std::min<Eigen::Index>(m - begin, static_cast<Eigen::Index>(kReduceBlock));
      s.segment(begin, len).noalias() = log_weights_.segment(begin, len) - projected_.middleRows(begin, len) * v;
    });
    const double shift = s.maxCoeff();
    require(std::isfinite(shift), ErrorCode::NonFiniteObjective, "tilt exponent is not finite");
    return shift;
  }

  Softmax softmax(const Eigen::VectorXd& v) const {
    Softmax sm;
    sm.shift = exponents(v, sm.p);
    const Eigen::Index m = sm.p.size();
    const std::size_t blocks = (static_cast<std::size_t>(m) + kReduceBlock - 1) / kReduceBlock;
    parallel_for(blocks, [&](std::size_t b) {
      const auto begin = static_cast<Eigen::Index>(b * kReduceBlock);
      const Eigen::Index len = std::min<Eigen::Index>(m - begin, static_cast<Eigen::Index>(kReduceBlock));
      sm.p.segment(begin, len) = (sm.p.segment(begin, len).array() - sm.shift).exp().matrix();
    });
    const Eigen::Index dr = gram_.rows();
    struct Acc {
      double total;
      Eigen::VectorXd first;
    };
    Acc acc = blocked_reduce(
        static_cast<std::size_t>(m),
        [&](std::size_t begin, std::size_t end) {
          const auto b = static_cast<Eigen::Index>(begin);
          const auto len = static_cast<Eigen::Index>(end - begin);
          if (len == 0) return Acc{0.0, Eigen::VectorXd::Zero(dr)};
          double total = 0.0;
          for (Eigen::Index k = b; k < b + len; ++k) total += sm.p[k];
          return Acc{total, projected_.middleRows(b, len).transpose() * sm.p.segment(b, len)};
        },
        [](Acc a, const Acc& b) {
          a.total += b.total;
          a.first += b.first;
          return a;
        });
    sm.total = acc.total;
    sm.first_moment = std::move(acc.first);
    return sm;
  }

  std::size_t n_;
  Eigen::MatrixXd gram_;
  RowMatrix projected_;
  Eigen::VectorXd log_weights_;
};

inline double eval_un(const WeightTable& w, const DriftMap& a, const Eigen::VectorXd& v) {
  return TiltObjective(w, a).value(v);
}

inline double eval_vn(const WeightTable& w, const DriftMap& a, const Eigen::VectorXd& v) {
  return TiltObjective(w, a).vn(v);
}

inline UnDerivatives eval_un_derivatives(const WeightTable& w, const DriftMap& a, const Eigen::VectorXd& v) {
  return TiltObjective(w, a).derivatives(v);
}

inline ThetaCovariance estimate_theta_covariance(const WeightTable& w, const DriftMap& a, const Eigen::VectorXd& v) {
  return TiltObjective(w, a).theta_covariance(v);
}

struct NewtonOptions {
  double tol = 1e-6;
  int max_iter = 50;
  std::optional<Eigen::VectorXd> x0;  // zero when unset
  double armijo = 1e-4;
};

struct OptimResult {
  Eigen::VectorXd theta;  // minimizer in the reduced coordinates
  int iterations = 0;
  double gradient_norm = 0.0;
  double u_value = 0.0;
  double v_value = 0.0;
  int damped_steps = 0;  // steps where the full Newton step was shortened
  bool single_nonzero_weight = false;
  std::vector<double> u_history;  // u_n at every accepted iterate, x0 first
};

/// Newton's method on u_n with Armijo backtracking. The step solves
/// H d = -grad by Cholesky; the full step is taken whenever it descends.
inline OptimResult newton_minimize(const TiltObjective& objective, const NewtonOptions& opts = {}) {
  const auto dr = static_cast<Eigen::Index>(objective.reduced_dim());
  OptimResult result;
  Eigen::VectorXd x = opts.x0.value_or(Eigen::VectorXd::Zero(dr));
  require(x.size() == dr, ErrorCode::DimensionMismatch, "initial point has wrong dimension");
  result.single_nonzero_weight = objective.projected().rows() == 1;

  for (;;) {
    const UnDerivatives der = objective.derivatives(x);
    result.u_history.push_back(der.value);
    result.gradient_norm = der.gradient.norm();
    result.u_value = der.value;
    if (result.gradient_norm <= opts.tol) break;
    if (result.iterations >= opts.max_iter)
      throw Error(ErrorCode::ConvergenceFailure, "Newton did not reach |grad| <= " + std::to_string(opts.tol) +
                                                     " in " + std::to_string(opts.max_iter) + " iterations");
    Eigen::LLT<Eigen::MatrixXd> llt(der.hessian);
    require(llt.info() == Eigen::Success, ErrorCode::SingularHessian, "Hessian of u_n is not positive definite");
    const Eigen::VectorXd step = llt.solve(-der.gradient);
    const double slope = der.gradient.dot(step);

    double t = 1.0;
    bool accepted = false;
    for (int halving = 0; halving < 60; ++halving, t *= 0.5) {
      const Eigen::VectorXd trial = x + t * step;
      double u_trial;
      try {
        u_trial = objective.value(trial);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NonFiniteObjective) throw;
        continue;
      }
      if (u_trial <= der.value + opts.armijo * t * slope && u_trial < der.value) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // Rounding floor: no representable decrease left along the Newton direction.
      if (result.gradient_norm <= 1e3 * opts.tol) break;
      throw Error(ErrorCode::ConvergenceFailure, "line search found no decrease of u_n");
    }
    if (t < 1.0) ++result.damped_steps;
    x += t * step;
    ++result.iterations;
  }
  result.theta = std::move(x);
  result.v_value = std::exp(result.u_value - std::log(static_cast<double>(objective.sample_count())));
  require(std::isfinite(result.v_value), ErrorCode::NonFiniteObjective, "v_n overflows at the minimizer");
  return result;
}

inline OptimResult newton_minimize(const WeightTable& w, const DriftMap& a, const NewtonOptions& opts = {}) {
  return newton_minimize(TiltObjective(w, a), opts);
}

}  // namespace tilt
