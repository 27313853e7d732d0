#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <new>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "tilt/errors.hpp"
#include "tilt/parallel.hpp"
#include "tilt/random.hpp"

namespace tilt {

/// Samples above this many bytes are regenerated on access instead of stored.
inline constexpr std::size_t kDefaultSampleMemoryBudget = std::size_t{2} << 30;

/// n i.i.d. standard normal vectors of R^d. Entry (i, j) is draw i*d + j of
/// the provenance stream.
class SampleBlock {
 public:
  SampleBlock(RngStream provenance, std::size_t n, std::size_t d, bool store)
      : provenance_(provenance), n_(n), d_(d) {
    require(n >= 1 && d >= 1, ErrorCode::InvalidArgument, "sample block needs n >= 1 and d >= 1");
    if (!store) return;
    require(n <= std::numeric_limits<std::size_t>::max() / d / sizeof(double), ErrorCode::ResourceError,
            "sample block size overflows");
    try {
      values_.resize(n * d);
    } catch (const std::bad_alloc&) {
      throw Error(ErrorCode::ResourceError, "cannot allocate " + std::to_string(n) + "x" + std::to_string(d) +
                                                " sample block");
    }
    const std::size_t rows_per_task = std::max<std::size_t>(1, 8192 / d);
    const std::size_t tasks = (n + rows_per_task - 1) / rows_per_task;
    parallel_for(tasks, [&](std::size_t t) {
      const std::size_t begin = t * rows_per_task * d;
      const std::size_t end = std::min(n, (t + 1) * rows_per_task) * d;
      for (std::size_t k = begin; k < end; ++k) values_[k] = provenance_.normal(k);
    });
  }

  std::size_t size() const noexcept { return n_; }
  std::size_t dim() const noexcept { return d_; }
  const RngStream& provenance() const noexcept { return provenance_; }
  bool stored() const noexcept { return !values_.empty(); }

  /// Row i. Stored blocks return a view of their storage and ignore
  /// `scratch`; regenerating blocks fill `scratch` (length >= d).
  std::span<const double> row(std::size_t i, std::span<double> scratch) const {
    if (stored()) return {values_.data() + i * d_, d_};
    for (std::size_t j = 0; j < d_; ++j) scratch[j] = provenance_.normal(i * d_ + j);
    return scratch.first(d_);
  }

  double at(std::size_t i, std::size_t j) const {
    return stored() ? values_[i * d_ + j] : provenance_.normal(i * d_ + j);
  }

  /// Row-major storage, empty when regenerating.
  std::span<const double> values() const noexcept { return values_; }

 private:
  RngStream provenance_;
  std::size_t n_;
  std::size_t d_;
  std::vector<double> values_;
};

inline SampleBlock draw_samples(const RngStream& stream, std::size_t n, std::size_t d,
                                std::size_t memory_budget = kDefaultSampleMemoryBudget) {
  require(n >= 1 && d >= 1, ErrorCode::InvalidArgument, "draw_samples needs n >= 1 and d >= 1");
  const bool fits = n <= memory_budget / sizeof(double) / d;
  return SampleBlock(stream, n, d, fits);
}

/// Cholesky factor of the equicorrelation matrix C = rho 1{i!=j} + 1{i=j}.
struct CorrelationChol {
  std::size_t assets = 1;
  double rho = 0.0;
  Eigen::MatrixXd lower;  // L with L L^T = C
};

inline Eigen::MatrixXd equicorrelation(std::size_t assets, double rho) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Constant(assets, assets, rho);
  c.diagonal().setOnes();
  return c;
}

inline bool admissible_correlation(std::size_t assets, double rho) {
  if (!std::isfinite(rho)) return false;
  if (assets <= 1) return true;
  return rho < 1.0 && rho > -1.0 / static_cast<double>(assets - 1);
}

inline CorrelationChol cholesky_correlation(std::size_t assets, double rho) {
  require(assets >= 1, ErrorCode::InvalidArgument, "need at least one asset");
  require(admissible_correlation(assets, rho), ErrorCode::InvalidCorrelation,
          "rho must lie in (-1/(I-1), 1) for I = " + std::to_string(assets));
  if (assets == 1) return {1, rho, Eigen::MatrixXd::Identity(1, 1)};
  Eigen::LLT<Eigen::MatrixXd> llt(equicorrelation(assets, rho));
  require(llt.info() == Eigen::Success, ErrorCode::InvalidCorrelation, "correlation matrix is not positive definite");
  return {assets, rho, llt.matrixL()};
}

/// Extension point: factor an arbitrary SPD correlation matrix. `rho` is
/// reported as NaN for such factors.
inline CorrelationChol cholesky_from_matrix(const Eigen::MatrixXd& c) {
  require(c.rows() == c.cols() && c.rows() >= 1, ErrorCode::DimensionMismatch, "correlation matrix must be square");
  require((c - c.transpose()).cwiseAbs().maxCoeff() <= 1e-12, ErrorCode::InvalidCorrelation,
          "correlation matrix must be symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(c);
  require(llt.info() == Eigen::Success, ErrorCode::InvalidCorrelation, "correlation matrix is not positive definite");
  return {static_cast<std::size_t>(c.rows()), std::numeric_limits<double>::quiet_NaN(), llt.matrixL()};
}

inline void validate_grid(std::span<const double> times) {
  require(!times.empty(), ErrorCode::InvalidGrid, "time grid is empty");
  double previous = 0.0;
  for (double t : times) {
    require(std::isfinite(t) && t > previous, ErrorCode::InvalidGrid, "time grid must be positive and strictly increasing");
    previous = t;
  }
}

inline std::vector<double> regular_grid(double maturity, std::size_t steps) {
  require(steps >= 1 && maturity > 0.0, ErrorCode::InvalidGrid, "regular grid needs steps >= 1 and maturity > 0");
  std::vector<double> times(steps);
  for (std::size_t j = 0; j < steps; ++j) times[j] = maturity * static_cast<double>(j + 1) / static_cast<double>(steps);
  times.back() = maturity;
  return times;
}

/// Maps a standard normal vector of length I*N (time-major: coordinate
/// j*I + i drives asset i over step j) to the correlated Brownian values
/// W_{t_j}^i stored at the same index. Conceptually the block lower-
/// triangular matrix whose (j, k) block is sqrt(t_k - t_{k-1}) L for k <= j.
class PathMap {
 public:
  PathMap(std::vector<double> times, CorrelationChol chol) : times_(std::move(times)), chol_(std::move(chol)) {
    validate_grid(times_);
    sqrt_steps_.resize(times_.size());
    double previous = 0.0;
    for (std::size_t j = 0; j < times_.size(); ++j) {
      sqrt_steps_[j] = std::sqrt(times_[j] - previous);
      previous = times_[j];
    }
  }

  std::size_t assets() const noexcept { return chol_.assets; }
  std::size_t steps() const noexcept { return times_.size(); }
  std::size_t dim() const noexcept { return assets() * steps(); }
  const std::vector<double>& times() const noexcept { return times_; }
  const CorrelationChol& chol() const noexcept { return chol_; }

  /// out = M x, evaluated step by step (a running sum of L-rotated increments).
  void apply(std::span<const double> x, std::span<double> out) const {
    const std::size_t I = assets();
    require(x.size() == dim() && out.size() == dim(), ErrorCode::DimensionMismatch, "path map dimension mismatch");
    const double* l = chol_.lower.data();  // column-major
    for (std::size_t j = 0; j < steps(); ++j) {
      const double* g = x.data() + j * I;
      double* w = out.data() + j * I;
      const double* w_prev = j == 0 ? nullptr : out.data() + (j - 1) * I;
      for (std::size_t i = 0; i < I; ++i) {
        double inc = 0.0;
        for (std::size_t k = 0; k <= i; ++k) inc += l[k * I + i] * g[k];
        w[i] = (w_prev ? w_prev[i] : 0.0) + sqrt_steps_[j] * inc;
      }
    }
  }

  static constexpr std::size_t kMaxDense = 4096;

  /// The map as an explicit (I*N)x(I*N) matrix; refused above kMaxDense.
  Eigen::MatrixXd dense() const {
    require(dim() <= kMaxDense, ErrorCode::ResourceError, "path map too large to materialize");
    const std::size_t I = assets();
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(dim(), dim());
    for (std::size_t j = 0; j < steps(); ++j)
      for (std::size_t k = 0; k <= j; ++k)
        m.block(j * I, k * I, I, I) = sqrt_steps_[k] * chol_.lower;
    return m;
  }

 private:
  std::vector<double> times_;
  CorrelationChol chol_;
  std::vector<double> sqrt_steps_;
};

inline PathMap build_path_map(std::vector<double> times, CorrelationChol chol) {
  return PathMap(std::move(times), std::move(chol));
}

}  // namespace tilt
