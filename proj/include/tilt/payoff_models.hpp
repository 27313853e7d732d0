#pragma once

// Market models and claims composed into a discounted payoff f: R^d -> R.
//
// Coordinates of the normal vector are time-major: x[j*I + i] drives asset
// i over step j. Barriers are monitored at the grid dates only.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "tilt/errors.hpp"
#include "tilt/gaussian_engine.hpp"

namespace tilt {

// ---------------------------------------------------------------------------
// Local volatility surfaces

struct ConstantVol {
  double sigma = 0.2;
};

/// sigma(t, x) = sigma0 * (x / spot_ref)^(gamma - 1), clamped to [sigma_min, sigma_max].
struct CevVol {
  double sigma0 = 0.2;
  double gamma = 1.0;
  double spot_ref = 100.0;
  double sigma_min = 0.01;
  double sigma_max = 1.0;
};

/// Bilinear interpolation on a rectangular (t, x) grid, flat outside it.
struct TabulatedVol {
  std::vector<double> t_nodes;
  std::vector<double> x_nodes;
  std::vector<double> values;  // values[it * x_nodes.size() + ix]
};

using LocalVolSurface = std::variant<ConstantVol, CevVol, TabulatedVol>;

namespace detail {

inline std::pair<std::size_t, double> bracket(const std::vector<double>& nodes, double v) {
  if (nodes.size() == 1 || v <= nodes.front()) return {0, 0.0};
  if (v >= nodes.back()) return {nodes.size() - 2, 1.0};
  const auto it = std::upper_bound(nodes.begin(), nodes.end(), v);
  const std::size_t hi = static_cast<std::size_t>(it - nodes.begin());
  const std::size_t lo = hi - 1;
  return {lo, (v - nodes[lo]) / (nodes[hi] - nodes[lo])};
}

}  // namespace detail

inline double local_vol(const LocalVolSurface& surface, double t, double x) {
  return std::visit(
      [&](const auto& s) -> double {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, ConstantVol>) {
          return s.sigma;
        } else if constexpr (std::is_same_v<S, CevVol>) {
          const double ratio = std::max(x, 0.0) / s.spot_ref;
          const double raw = ratio > 0.0 ? s.sigma0 * std::pow(ratio, s.gamma - 1.0) : s.sigma_max;
          return std::clamp(std::isfinite(raw) ? raw : s.sigma_max, s.sigma_min, s.sigma_max);
        } else {
          const std::size_t nx = s.x_nodes.size();
          const auto [it, wt] = detail::bracket(s.t_nodes, t);
          const auto [ix, wx] = detail::bracket(s.x_nodes, x);
          const std::size_t it1 = std::min(it + 1, s.t_nodes.size() - 1);
          const std::size_t ix1 = std::min(ix + 1, nx - 1);
          const double v00 = s.values[it * nx + ix], v01 = s.values[it * nx + ix1];
          const double v10 = s.values[it1 * nx + ix], v11 = s.values[it1 * nx + ix1];
          return (1 - wt) * ((1 - wx) * v00 + wx * v01) + wt * ((1 - wx) * v10 + wx * v11);
        }
      },
      surface);
}

/// CSV of (t, x, sigma) triples covering a full rectangular grid. A
/// non-numeric first line is treated as a header.
inline TabulatedVol load_local_vol_csv(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::ConfigError, "cannot open local volatility table '" + path + "'");
  std::map<std::pair<double, double>, double> points;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    double t, x, s;
    if (!(fields >> t >> x >> s)) {
      require(line_no == 1, ErrorCode::ConfigError, path + ":" + std::to_string(line_no) + ": expected t, x, sigma");
      continue;
    }
    require(s > 0.0 && std::isfinite(s), ErrorCode::ConfigError,
            path + ":" + std::to_string(line_no) + ": sigma must be positive");
    points[{t, x}] = s;
  }
  TabulatedVol table;
  for (const auto& [key, _] : points) {
    if (table.t_nodes.empty() || table.t_nodes.back() != key.first) table.t_nodes.push_back(key.first);
  }
  for (const auto& [key, _] : points) {
    if (key.first == table.t_nodes.front()) table.x_nodes.push_back(key.second);
  }
  require(!table.t_nodes.empty() && !table.x_nodes.empty(), ErrorCode::ConfigError,
          "local volatility table '" + path + "' is empty");
  require(points.size() == table.t_nodes.size() * table.x_nodes.size(), ErrorCode::ConfigError,
          "local volatility table '" + path + "' is not a full rectangular grid");
  for (double t : table.t_nodes) {
    for (double x : table.x_nodes) {
      const auto it = points.find({t, x});
      require(it != points.end(), ErrorCode::ConfigError,
              "local volatility table '" + path + "' is not a full rectangular grid");
      table.values.push_back(it->second);
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Models

/// I correlated geometric Brownian motions observed on `times`.
struct BlackScholesMulti {
  std::size_t assets = 1;
  std::vector<double> times;
  std::vector<double> spot;
  std::vector<double> vol;
  double rate = 0.0;
  double rho = 0.0;
};

/// One asset, Euler scheme S_k = S_{k-1} (1 + sigma((k-1)h, S_{k-1}) sqrt(h) x_k + r h).
/// sigma must be bounded with x sigma(t, x) Lipschitz in x; this is not checked.
struct LocalVol1D {
  std::size_t steps = 1;
  double maturity = 1.0;
  double spot = 100.0;
  double rate = 0.0;
  LocalVolSurface sigma = ConstantVol{};
};

using ModelSpec = std::variant<BlackScholesMulti, LocalVol1D>;

inline std::size_t model_assets(const ModelSpec& m) {
  return std::visit([](const auto& s) -> std::size_t {
    if constexpr (std::is_same_v<std::decay_t<decltype(s)>, BlackScholesMulti>) return s.assets;
    else return 1;
  }, m);
}

inline std::size_t model_steps(const ModelSpec& m) {
  return std::visit([](const auto& s) -> std::size_t {
    if constexpr (std::is_same_v<std::decay_t<decltype(s)>, BlackScholesMulti>) return s.times.size();
    else return s.steps;
  }, m);
}

inline std::size_t model_dimension(const ModelSpec& m) { return model_assets(m) * model_steps(m); }

inline double model_maturity(const ModelSpec& m) {
  return std::visit([](const auto& s) -> double {
    if constexpr (std::is_same_v<std::decay_t<decltype(s)>, BlackScholesMulti>) return s.times.back();
    else return s.maturity;
  }, m);
}

inline double model_rate(const ModelSpec& m) {
  return std::visit([](const auto& s) { return s.rate; }, m);
}

/// Monitoring dates of the model.
inline std::vector<double> model_times(const ModelSpec& m) {
  return std::visit([](const auto& s) -> std::vector<double> {
    if constexpr (std::is_same_v<std::decay_t<decltype(s)>, BlackScholesMulti>) return s.times;
    else return regular_grid(s.maturity, s.steps);
  }, m);
}

inline void validate_model(const ModelSpec& model) {
  std::visit(
      [](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        require(std::isfinite(s.rate) && s.rate >= 0.0, ErrorCode::InvalidArgument, "rate must be >= 0");
        if constexpr (std::is_same_v<S, BlackScholesMulti>) {
          require(s.assets >= 1, ErrorCode::InvalidArgument, "need at least one asset");
          validate_grid(s.times);
          require(s.spot.size() == s.assets && s.vol.size() == s.assets, ErrorCode::DimensionMismatch,
                  "spot and vol need one entry per asset");
          for (std::size_t i = 0; i < s.assets; ++i) {
            require(s.spot[i] > 0.0 && std::isfinite(s.spot[i]), ErrorCode::InvalidArgument, "spot must be > 0");
            require(s.vol[i] > 0.0 && std::isfinite(s.vol[i]), ErrorCode::InvalidArgument, "vol must be > 0");
          }
          require(admissible_correlation(s.assets, s.rho), ErrorCode::InvalidCorrelation,
                  "rho must lie in (-1/(I-1), 1)");
        } else {
          require(s.steps >= 1, ErrorCode::InvalidArgument, "need at least one step");
          require(s.maturity > 0.0 && std::isfinite(s.maturity), ErrorCode::InvalidArgument, "maturity must be > 0");
          require(s.spot > 0.0 && std::isfinite(s.spot), ErrorCode::InvalidArgument, "spot must be > 0");
          if (const auto* c = std::get_if<ConstantVol>(&s.sigma))
            require(c->sigma >= 0.0 && std::isfinite(c->sigma), ErrorCode::InvalidArgument, "sigma must be >= 0");
          if (const auto* c = std::get_if<CevVol>(&s.sigma))
            require(c->sigma_min > 0.0 && c->sigma_min <= c->sigma_max && c->spot_ref > 0.0,
                    ErrorCode::InvalidArgument, "CEV surface needs 0 < sigma_min <= sigma_max and spot_ref > 0");
        }
      },
      model);
}

// ---------------------------------------------------------------------------
// Claims

enum class Direction { Up, Down };

/// (sum_i w_i S_T^i - K)_+ ; negative K gives put-like baskets.
struct Basket {
  std::vector<double> weights;
  double strike = 0.0;
};

/// 1{S_T > L} for Up, 1{S_T < L} for Down.
struct Digital {
  double level = 1.0;
  Direction direction = Direction::Up;
};

/// (S_T - K)_+ alive while every S_{t_j} >= L (Down, knock-out) or <= L (Up).
struct BarrierCall {
  double strike = 0.0;
  double barrier = 0.0;
  Direction knock = Direction::Down;
};

/// Down-and-out basket call: (sum w_i S_T^i - K)_+ 1{S_{t_j}^i >= L^i for all i, j}.
struct BarrierBasketCall {
  std::vector<double> weights;
  double strike = 0.0;
  std::vector<double> barriers;
};

/// (max_i w_i S_T^i - K)_+
struct BestOf {
  std::vector<double> weights;
  double strike = 0.0;
};

struct VanillaCall {
  double strike = 0.0;
};

struct VanillaPut {
  double strike = 0.0;
};

using ClaimSpec = std::variant<Basket, Digital, BarrierCall, BarrierBasketCall, BestOf, VanillaCall, VanillaPut>;

/// Asset values S_{t_j}^i, row-major by asset.
struct AssetPaths {
  std::size_t assets = 0;
  std::size_t dates = 0;
  std::vector<double> values;

  double at(std::size_t asset, std::size_t date) const { return values[asset * dates + date]; }
  double terminal(std::size_t asset) const { return values[asset * dates + dates - 1]; }
};

namespace detail {

/// Writes asset values into `paths` (assets x dates, row-major). `work`
/// must hold at least d doubles.
inline void simulate(const ModelSpec& model, const PathMap* path_map, std::span<const double> x,
                     std::span<double> work, std::span<double> paths) {
  if (const auto* bs = std::get_if<BlackScholesMulti>(&model)) {
    const std::size_t I = bs->assets, N = bs->times.size();
    path_map->apply(x, work.first(I * N));
    for (std::size_t i = 0; i < I; ++i) {
      const double drift = bs->rate - 0.5 * bs->vol[i] * bs->vol[i];
      for (std::size_t j = 0; j < N; ++j)
        paths[i * N + j] = bs->spot[i] * std::exp(drift * bs->times[j] + bs->vol[i] * work[j * I + i]);
    }
    return;
  }
  const auto& lv = std::get<LocalVol1D>(model);
  const double h = lv.maturity / static_cast<double>(lv.steps);
  const double sqrt_h = std::sqrt(h);
  double s = lv.spot;
  for (std::size_t k = 0; k < lv.steps; ++k) {
    const double t = static_cast<double>(k) * h;
    s = s * (1.0 + local_vol(lv.sigma, t, s) * sqrt_h * x[k] + lv.rate * h);
    paths[k] = s;
  }
}

inline double weighted_terminal(const std::vector<double>& w, std::span<const double> paths, std::size_t dates) {
  double sum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) sum += w[i] * paths[i * dates + dates - 1];
  return sum;
}

inline double claim_value(const ClaimSpec& claim, std::span<const double> paths, std::size_t assets,
                          std::size_t dates) {
  return std::visit(
      [&](const auto& c) -> double {
        using C = std::decay_t<decltype(c)>;
        const double terminal = paths[dates - 1];
        if constexpr (std::is_same_v<C, Basket>) {
          return std::max(weighted_terminal(c.weights, paths, dates) - c.strike, 0.0);
        } else if constexpr (std::is_same_v<C, Digital>) {
          return (c.direction == Direction::Up ? terminal > c.level : terminal < c.level) ? 1.0 : 0.0;
        } else if constexpr (std::is_same_v<C, BarrierCall>) {
          for (std::size_t j = 0; j < dates; ++j) {
            const bool alive = c.knock == Direction::Down ? paths[j] >= c.barrier : paths[j] <= c.barrier;
            if (!alive) return 0.0;
          }
          return std::max(terminal - c.strike, 0.0);
        } else if constexpr (std::is_same_v<C, BarrierBasketCall>) {
          for (std::size_t i = 0; i < assets; ++i)
            for (std::size_t j = 0; j < dates; ++j)
              if (paths[i * dates + j] < c.barriers[i]) return 0.0;
          return std::max(weighted_terminal(c.weights, paths, dates) - c.strike, 0.0);
        } else if constexpr (std::is_same_v<C, BestOf>) {
          double best = -INFINITY;
          for (std::size_t i = 0; i < assets; ++i) best = std::max(best, c.weights[i] * paths[i * dates + dates - 1]);
          return std::max(best - c.strike, 0.0);
        } else if constexpr (std::is_same_v<C, VanillaCall>) {
          return std::max(terminal - c.strike, 0.0);
        } else {
          return std::max(c.strike - terminal, 0.0);
        }
      },
      claim);
}

inline void check_compatible(const ClaimSpec& claim, std::size_t assets) {
  std::visit(
      [&](const auto& c) {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, Basket> || std::is_same_v<C, BestOf>) {
          require(c.weights.size() == assets, ErrorCode::IncompatibleClaim, "claim needs one weight per asset");
          for (double w : c.weights) require(std::isfinite(w), ErrorCode::IncompatibleClaim, "weights must be finite");
        } else if constexpr (std::is_same_v<C, BarrierBasketCall>) {
          require(c.weights.size() == assets && c.barriers.size() == assets, ErrorCode::IncompatibleClaim,
                  "barrier basket needs one weight and one barrier per asset");
        } else {
          require(assets == 1, ErrorCode::IncompatibleClaim, "single-asset claim on a multi-asset model");
        }
      },
      claim);
}

}  // namespace detail

inline AssetPaths assets_from_normals(const ModelSpec& model, std::span<const double> x) {
  validate_model(model);
  require(x.size() == model_dimension(model), ErrorCode::DimensionMismatch, "normal vector has wrong dimension");
  std::optional<PathMap> map;
  if (const auto* bs = std::get_if<BlackScholesMulti>(&model))
    map.emplace(bs->times, cholesky_correlation(bs->assets, bs->rho));
  AssetPaths out{model_assets(model), model_steps(model), {}};
  out.values.resize(out.assets * out.dates);
  std::vector<double> work(x.size());
  detail::simulate(model, map ? &*map : nullptr, x, work, out.values);
  return out;
}

/// A function f: R^d -> R evaluated on normal vectors. Immutable and safe
/// to call concurrently.
class Payoff {
 public:
  using Function = std::function<double(std::span<const double>)>;

  Payoff(std::size_t dim, Function f) : dim_(dim), f_(std::move(f)) {
    require(dim >= 1 && static_cast<bool>(f_), ErrorCode::InvalidArgument, "payoff needs a dimension and a function");
  }

  std::size_t dim() const noexcept { return dim_; }

  /// Unchecked evaluation for hot loops.
  double operator()(std::span<const double> x) const { return f_(x); }

 private:
  std::size_t dim_;
  Function f_;
};

/// e^{-rT} claim(paths(x)).
inline Payoff build_payoff(const ModelSpec& model, const ClaimSpec& claim) {
  validate_model(model);
  const std::size_t assets = model_assets(model);
  const std::size_t dates = model_steps(model);
  const std::size_t d = assets * dates;
  detail::check_compatible(claim, assets);
  std::shared_ptr<const PathMap> map;
  if (const auto* bs = std::get_if<BlackScholesMulti>(&model))
    map = std::make_shared<const PathMap>(bs->times, cholesky_correlation(bs->assets, bs->rho));
  const double discount = std::exp(-model_rate(model) * model_maturity(model));
  return Payoff(d, [model, claim, map, discount, assets, dates, d](std::span<const double> x) {
    thread_local std::vector<double> work, paths;
    work.resize(d);
    paths.resize(assets * dates);
    detail::simulate(model, map.get(), x, work, paths);
    return discount * detail::claim_value(claim, paths, assets, dates);
  });
}

inline double eval_payoff(const Payoff& payoff, std::span<const double> x) {
  require(x.size() == payoff.dim(), ErrorCode::DimensionMismatch, "payoff input has wrong dimension");
  for (double v : x) require(std::isfinite(v), ErrorCode::InvalidArgument, "payoff input is not finite");
  const double value = payoff(x);
  require(std::isfinite(value), ErrorCode::NonFiniteEstimate, "payoff returned a non-finite value");
  return value;
}

}  // namespace tilt
