#pragma once

// The drift subspace {A v : v in R^d'} searched by the optimizer.
//
// Path-structured maps are kept in their sparse form: applying A or A^T
// costs O(d) and never touches a dense d x d' matrix.

#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "tilt/errors.hpp"
#include "tilt/gaussian_engine.hpp"

namespace tilt {

/// A^T A, with its smallest eigenvalue.
struct GramMatrix {
  Eigen::MatrixXd matrix;
  double min_eigenvalue = 0.0;
};

class DriftMap {
 public:
  enum class Kind { Identity, PathSingle, PathMulti, Dense };

  static DriftMap identity(std::size_t d) {
    require(d >= 1, ErrorCode::InvalidArgument, "identity drift map needs d >= 1");
    DriftMap map(Kind::Identity, d, d);
    map.finish();
    return map;
  }

  /// Single column (sqrt(t_1), sqrt(t_2 - t_1), ..., sqrt(t_d - t_{d-1}))^T.
  static DriftMap path_single(std::span<const double> times) { return path(times, 1, Kind::PathSingle); }

  /// d = I*N, d' = I, A(j*I + i, i) = sqrt(t_j - t_{j-1}), zero elsewhere.
  static DriftMap path_multi(std::span<const double> times, std::size_t assets) {
    return path(times, assets, Kind::PathMulti);
  }

  static DriftMap dense(Eigen::MatrixXd a) {
    require(a.rows() >= 1 && a.cols() >= 1 && a.cols() <= a.rows(), ErrorCode::RankDeficientDriftMap,
            "dense drift map must be d x d' with 1 <= d' <= d");
    require(a.allFinite(), ErrorCode::InvalidArgument, "dense drift map has non-finite entries");
    DriftMap map(Kind::Dense, static_cast<std::size_t>(a.rows()), static_cast<std::size_t>(a.cols()));
    map.dense_ = std::move(a);
    map.finish();
    return map;
  }

  Kind kind() const noexcept { return kind_; }
  std::size_t dim() const noexcept { return d_; }
  std::size_t reduced_dim() const noexcept { return reduced_; }
  const GramMatrix& gram() const noexcept { return gram_; }

  /// theta = A v
  void apply(std::span<const double> v, std::span<double> theta) const {
    require(v.size() == reduced_ && theta.size() == d_, ErrorCode::DimensionMismatch, "apply: dimension mismatch");
    switch (kind_) {
      case Kind::Identity:
        std::copy(v.begin(), v.end(), theta.begin());
        break;
      case Kind::PathSingle:
      case Kind::PathMulti:
        for (std::size_t j = 0; j < sqrt_steps_.size(); ++j)
          for (std::size_t i = 0; i < reduced_; ++i) theta[j * reduced_ + i] = sqrt_steps_[j] * v[i];
        break;
      case Kind::Dense:
        Eigen::Map<Eigen::VectorXd>(theta.data(), d_) = dense_ * Eigen::Map<const Eigen::VectorXd>(v.data(), reduced_);
        break;
    }
  }

  /// y = A^T x
  void apply_adjoint(std::span<const double> x, std::span<double> y) const {
    require(x.size() == d_ && y.size() == reduced_, ErrorCode::DimensionMismatch, "apply_adjoint: dimension mismatch");
    switch (kind_) {
      case Kind::Identity:
        std::copy(x.begin(), x.end(), y.begin());
        break;
      case Kind::PathSingle:
      case Kind::PathMulti:
        std::fill(y.begin(), y.end(), 0.0);
        for (std::size_t j = 0; j < sqrt_steps_.size(); ++j)
          for (std::size_t i = 0; i < reduced_; ++i) y[i] += sqrt_steps_[j] * x[j * reduced_ + i];
        break;
      case Kind::Dense:
        Eigen::Map<Eigen::VectorXd>(y.data(), reduced_) =
            dense_.transpose() * Eigen::Map<const Eigen::VectorXd>(x.data(), d_);
        break;
    }
  }

  Eigen::VectorXd apply(const Eigen::VectorXd& v) const {
    Eigen::VectorXd theta(d_);
    apply(std::span<const double>(v.data(), v.size()), std::span<double>(theta.data(), d_));
    return theta;
  }

  Eigen::VectorXd apply_adjoint(const Eigen::VectorXd& x) const {
    Eigen::VectorXd y(reduced_);
    apply_adjoint(std::span<const double>(x.data(), x.size()), std::span<double>(y.data(), reduced_));
    return y;
  }

  /// Explicit d x d' matrix (tests and file output).
  Eigen::MatrixXd matrix() const {
    if (kind_ == Kind::Dense) return dense_;
    Eigen::MatrixXd a(d_, reduced_);
    Eigen::VectorXd e = Eigen::VectorXd::Zero(reduced_);
    for (std::size_t c = 0; c < reduced_; ++c) {
      e.setZero();
      e[c] = 1.0;
      a.col(c) = apply(e);
    }
    return a;
  }

 private:
  DriftMap(Kind kind, std::size_t d, std::size_t reduced) : kind_(kind), d_(d), reduced_(reduced) {}

  static DriftMap path(std::span<const double> times, std::size_t assets, Kind kind) {
    validate_grid(times);
    require(assets >= 1, ErrorCode::InvalidArgument, "path drift map needs at least one asset");
    DriftMap map(kind, times.size() * assets, assets);
    double previous = 0.0;
    for (double t : times) {
      map.sqrt_steps_.push_back(std::sqrt(t - previous));
      previous = t;
    }
    map.finish();
    return map;
  }

  void finish() {
    Eigen::MatrixXd g(reduced_, reduced_);
    switch (kind_) {
      case Kind::Identity:
        g.setIdentity();
        break;
      case Kind::PathSingle:
      case Kind::PathMulti: {
        double total = 0.0;
        for (double s : sqrt_steps_) total += s * s;
        g = total * Eigen::MatrixXd::Identity(reduced_, reduced_);
        break;
      }
      case Kind::Dense:
        g = dense_.transpose() * dense_;
        break;
    }
    Eigen::LLT<Eigen::MatrixXd> llt(g);
    bool ok = llt.info() == Eigen::Success;
    if (ok) {
      const Eigen::VectorXd diag = Eigen::MatrixXd(llt.matrixL()).diagonal();
      ok = diag.minCoeff() > 1e-10 * std::sqrt(g.diagonal().maxCoeff());
    }
    require(ok, ErrorCode::RankDeficientDriftMap, "A^T A is not positive definite");
    gram_.matrix = std::move(g);
    gram_.min_eigenvalue = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram_.matrix, Eigen::EigenvaluesOnly)
                               .eigenvalues()
                               .minCoeff();
  }

  Kind kind_;
  std::size_t d_;
  std::size_t reduced_;
  std::vector<double> sqrt_steps_;
  Eigen::MatrixXd dense_;
  GramMatrix gram_;
};

inline DriftMap identity_map(std::size_t d) { return DriftMap::identity(d); }
inline DriftMap path_drift_single(std::span<const double> times) { return DriftMap::path_single(times); }
inline DriftMap path_drift_multi(std::span<const double> times, std::size_t assets) {
  return DriftMap::path_multi(times, assets);
}

/// Whitespace-separated text: "d d'" then d*d' entries in row-major order.
inline DriftMap load_dense_drift(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::ConfigError, "cannot open drift matrix file '" + path + "'");
  long rows = 0, cols = 0;
  require(static_cast<bool>(in >> rows >> cols) && rows >= 1 && cols >= 1, ErrorCode::ConfigError,
          "drift matrix file '" + path + "' must start with \"d d'\"");
  Eigen::MatrixXd a(rows, cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c)
      require(static_cast<bool>(in >> a(r, c)), ErrorCode::ConfigError,
              "drift matrix file '" + path + "' has fewer than d*d' entries");
  double extra;
  require(!(in >> extra), ErrorCode::ConfigError, "drift matrix file '" + path + "' has trailing entries");
  return DriftMap::dense(std::move(a));
}

}  // namespace tilt
