#pragma once

// Batch front end: experiment configs, builtin table experiments, row
// execution and text/CSV reports.
//
// Config format: sections [model], [claim], [run] holding `key = value`
// lines; '#' starts a comment. Lists are comma separated, and a scalar given
// for a per-asset list is broadcast.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tilt/drift_space.hpp"
#include "tilt/errors.hpp"
#include "tilt/estimator.hpp"
#include "tilt/gaussian_engine.hpp"
#include "tilt/parallel.hpp"
#include "tilt/payoff_models.hpp"
#include "tilt/random.hpp"
#include "tilt/reference_oracles.hpp"

namespace tilt {

enum class DriftKind { Identity, PathSingle, PathMulti, Dense };
enum class OutputFormat { Text, Csv };

inline const char* to_string(DriftKind kind) {
  switch (kind) {
    case DriftKind::Identity: return "identity";
    case DriftKind::PathSingle: return "path_single";
    case DriftKind::PathMulti: return "path_multi";
    case DriftKind::Dense: return "dense";
  }
  return "identity";
}

/// One parameter row: model, claim and run settings.
struct ExperimentSpec {
  std::string label;
  ModelSpec model = BlackScholesMulti{};
  ClaimSpec claim = VanillaCall{};
  DriftKind drift = DriftKind::Identity;  // subspace used by rris
  std::string drift_file;                 // for DriftKind::Dense
  std::vector<Mode> modes{Mode::Crude, Mode::Ris};
  std::size_t n = 10000;
  std::uint64_t seed = 1;
  std::uint64_t stream = 0;  // two_stage also consumes stream + 1
  std::optional<std::size_t> replications;  // set for coverage studies
  std::optional<double> reference;          // coverage target price
  double level = 0.95;
  NewtonOptions newton;
  std::size_t memory_budget = kDefaultSampleMemoryBudget;
};

inline std::size_t spec_dimension(const ExperimentSpec& spec) { return model_dimension(spec.model); }

inline DriftMap make_drift(const ExperimentSpec& spec) {
  switch (spec.drift) {
    case DriftKind::Identity: return identity_map(spec_dimension(spec));
    case DriftKind::PathSingle:
      require(model_assets(spec.model) == 1, ErrorCode::DimensionMismatch, "path_single drift needs a one-asset model");
      return path_drift_single(model_times(spec.model));
    case DriftKind::PathMulti: return path_drift_multi(model_times(spec.model), model_assets(spec.model));
    case DriftKind::Dense: {
      DriftMap a = load_dense_drift(spec.drift_file);
      require(a.dim() == spec_dimension(spec), ErrorCode::DimensionMismatch,
              "dense drift has " + std::to_string(a.dim()) + " rows, model dimension is " +
                  std::to_string(spec_dimension(spec)));
      return a;
    }
  }
  throw Error(ErrorCode::ConfigError, "unknown drift kind");
}

/// Closed-form price when one exists: one-asset, one-date Black-Scholes
/// digital or vanilla claims.
inline std::optional<double> closed_form_price(const ExperimentSpec& spec) {
  const auto* bs = std::get_if<BlackScholesMulti>(&spec.model);
  if (!bs || bs->assets != 1) return std::nullopt;
  const double s = bs->spot[0], v = bs->vol[0], r = bs->rate, t = bs->times.back();
  if (const auto* c = std::get_if<Digital>(&spec.claim)) {
    const double up = bs_digital_price(s, c->level, r, v, t);
    return c->direction == Direction::Up ? up : std::exp(-r * t) - up;
  }
  if (const auto* c = std::get_if<VanillaCall>(&spec.claim)) return bs_call_price(s, c->strike, r, v, t);
  if (const auto* c = std::get_if<VanillaPut>(&spec.claim)) return bs_put_price(s, c->strike, r, v, t);
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::optional<double> to_double(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<std::uint64_t> to_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

struct Entry {
  std::string value;
  std::size_t line = 0;
};

class ConfigReader {
 public:
  ConfigReader(std::string origin, std::map<std::string, Entry> entries)
      : origin_(std::move(origin)), entries_(std::move(entries)) {}

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    const auto it = entries_.find(key);
    const std::string where = it == entries_.end() ? origin_ : origin_ + ":" + std::to_string(it->second.line);
    throw Error(ErrorCode::ConfigError, where + ": " + key + ": " + msg);
  }

  std::string text(const std::string& key, const std::string& fallback) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second.value;
  }

  double number(const std::string& key, std::optional<double> fallback = std::nullopt) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) {
      if (!fallback) fail(key, "required key is missing");
      return *fallback;
    }
    const auto v = to_double(it->second.value);
    if (!v) fail(key, "'" + it->second.value + "' is not a number");
    return *v;
  }

  std::uint64_t integer(const std::string& key, std::optional<std::uint64_t> fallback = std::nullopt) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) {
      if (!fallback) fail(key, "required key is missing");
      return *fallback;
    }
    const auto v = to_uint(it->second.value);
    if (!v) fail(key, "'" + it->second.value + "' is not a nonnegative integer");
    return *v;
  }

  /// A list of `size` numbers, or one number broadcast to `size`.
  std::vector<double> numbers(const std::string& key, std::size_t size,
                              std::optional<double> fallback = std::nullopt) const {
    if (!has(key)) {
      if (!fallback) fail(key, "required key is missing");
      return std::vector<double>(size, *fallback);
    }
    std::vector<double> out;
    for (const std::string& item : split_list(entries_.at(key).value)) {
      const auto v = to_double(item);
      if (!v) fail(key, "'" + item + "' is not a number");
      out.push_back(*v);
    }
    if (out.size() == 1 && size > 1) out.assign(size, out[0]);
    if (out.size() != size) fail(key, "expected " + std::to_string(size) + " values, got " + std::to_string(out.size()));
    return out;
  }

  std::vector<double> free_numbers(const std::string& key) const {
    std::vector<double> out;
    for (const std::string& item : split_list(entries_.at(key).value)) {
      const auto v = to_double(item);
      if (!v) fail(key, "'" + item + "' is not a number");
      out.push_back(*v);
    }
    return out;
  }

 private:
  std::string origin_;
  std::map<std::string, Entry> entries_;
};

inline const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"model",
       {"type", "assets", "maturity", "steps", "times", "spot", "vol", "rate", "rho", "vol_surface", "sigma", "sigma0",
        "gamma", "spot_ref", "sigma_min", "sigma_max", "vol_table"}},
      {"claim", {"type", "weights", "strike", "level", "direction", "barrier", "knock"}},
      {"run",
       {"label", "n", "seed", "stream", "modes", "drift", "drift_file", "level", "replications", "reference", "tol",
        "max_iter"}},
  };
  return keys;
}

inline Direction parse_direction(const ConfigReader& r, const std::string& key, Direction fallback) {
  const std::string v = r.text(key, fallback == Direction::Up ? "up" : "down");
  if (v == "up") return Direction::Up;
  if (v == "down") return Direction::Down;
  r.fail(key, "expected 'up' or 'down', got '" + v + "'");
}

inline std::string resolve_path(const std::string& base_dir, const std::string& path) {
  const std::filesystem::path p(path);
  if (p.is_absolute() || base_dir.empty()) return path;
  return (std::filesystem::path(base_dir) / p).string();
}

inline ModelSpec parse_model(const ConfigReader& r, const std::string& base_dir) {
  const std::string type = r.text("model.type", "black_scholes");
  std::vector<double> times;
  if (r.has("model.times")) {
    times = r.free_numbers("model.times");
  } else {
    const double maturity = r.number("model.maturity", 1.0);
    if (!(maturity > 0.0)) r.fail("model.maturity", "maturity must be > 0");
    const auto steps = r.integer("model.steps", 1);
    if (steps < 1) r.fail("model.steps", "steps must be >= 1");
    times = regular_grid(maturity, steps);
  }
  try {
    validate_grid(times);
  } catch (const Error& e) {
    r.fail(r.has("model.times") ? "model.times" : "model.maturity", e.what());
  }
  const double rate = r.number("model.rate", 0.0);
  if (!(rate >= 0.0) || !std::isfinite(rate)) r.fail("model.rate", "rate must be >= 0");

  if (type == "black_scholes") {
    const auto assets = static_cast<std::size_t>(r.integer("model.assets", 1));
    if (assets < 1) r.fail("model.assets", "need at least one asset");
    BlackScholesMulti m{assets, times, r.numbers("model.spot", assets), r.numbers("model.vol", assets), rate,
                        r.number("model.rho", 0.0)};
    for (double s : m.spot)
      if (!(s > 0.0) || !std::isfinite(s)) r.fail("model.spot", "spot must be > 0");
    for (double v : m.vol)
      if (!(v > 0.0) || !std::isfinite(v)) r.fail("model.vol", "vol must be > 0");
    if (!admissible_correlation(assets, m.rho))
      r.fail("model.rho", "rho must lie in (-1/(I-1), 1) for I = " + std::to_string(assets));
    for (const char* key : {"model.vol_surface", "model.sigma", "model.sigma0", "model.gamma", "model.spot_ref",
                            "model.sigma_min", "model.sigma_max", "model.vol_table"})
      if (r.has(key)) r.fail(key, "only valid for type = local_vol");
    return m;
  }
  if (type == "local_vol") {
    if (r.has("model.assets") && r.integer("model.assets") != 1) r.fail("model.assets", "local_vol has one asset");
    for (const char* key : {"model.vol", "model.rho"})
      if (r.has(key)) r.fail(key, "not valid for type = local_vol");
    const std::vector<double> grid = regular_grid(times.back(), times.size());
    if (r.has("model.times") && grid != times) r.fail("model.times", "local_vol needs a regular grid");
    LocalVol1D m{times.size(), times.back(), r.number("model.spot"), rate, ConstantVol{}};
    if (!(m.spot > 0.0)) r.fail("model.spot", "spot must be > 0");
    const std::string surface = r.text("model.vol_surface", "constant");
    if (surface == "constant") {
      const double s = r.number("model.sigma");
      if (!(s >= 0.0)) r.fail("model.sigma", "sigma must be >= 0");
      m.sigma = ConstantVol{s};
    } else if (surface == "cev") {
      CevVol c{r.number("model.sigma0"), r.number("model.gamma", 1.0), r.number("model.spot_ref", m.spot),
               r.number("model.sigma_min", 0.01), r.number("model.sigma_max", 1.0)};
      if (!(c.sigma_min > 0.0 && c.sigma_min <= c.sigma_max)) r.fail("model.sigma_min", "need 0 < sigma_min <= sigma_max");
      if (!(c.spot_ref > 0.0)) r.fail("model.spot_ref", "spot_ref must be > 0");
      m.sigma = c;
    } else if (surface == "table") {
      if (!r.has("model.vol_table")) r.fail("model.vol_table", "required for vol_surface = table");
      try {
        m.sigma = load_local_vol_csv(resolve_path(base_dir, r.text("model.vol_table", "")));
      } catch (const Error& e) {
        r.fail("model.vol_table", e.what());
      }
    } else {
      r.fail("model.vol_surface", "expected constant, cev or table, got '" + surface + "'");
    }
    return m;
  }
  r.fail("model.type", "expected black_scholes or local_vol, got '" + type + "'");
}

inline ClaimSpec parse_claim(const ConfigReader& r, std::size_t assets) {
  if (!r.has("claim.type")) r.fail("claim.type", "required key is missing");
  const std::string type = r.text("claim.type", "");
  const auto weights = [&] { return r.numbers("claim.weights", assets, 1.0 / static_cast<double>(assets)); };
  if (type == "basket") return Basket{weights(), r.number("claim.strike")};
  if (type == "best_of") return BestOf{r.numbers("claim.weights", assets, 1.0), r.number("claim.strike")};
  if (type == "digital") return Digital{r.number("claim.level"), parse_direction(r, "claim.direction", Direction::Up)};
  if (type == "barrier")
    return BarrierCall{r.number("claim.strike"), r.number("claim.barrier"),
                       parse_direction(r, "claim.knock", Direction::Down)};
  if (type == "barrier_basket") return BarrierBasketCall{weights(), r.number("claim.strike"), r.numbers("claim.barrier", assets)};
  if (type == "call") return VanillaCall{r.number("claim.strike")};
  if (type == "put") return VanillaPut{r.number("claim.strike")};
  r.fail("claim.type", "expected basket, best_of, digital, barrier, barrier_basket, call or put, got '" + type + "'");
}

}  // namespace detail

/// Parses `text`; `origin` names the source in messages and `base_dir`
/// anchors relative file references.
inline ExperimentSpec parse_config_text(const std::string& text, const std::string& origin = "<config>",
                                        const std::string& base_dir = "") {
  std::map<std::string, detail::Entry> entries;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  const auto fail = [&](const std::string& msg) {
    throw Error(ErrorCode::ConfigError, origin + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = detail::trim(std::string_view(raw).substr(0, raw.find('#')));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("malformed section header '" + line + "'");
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      if (!detail::known_keys().count(section)) fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value', got '" + line + "'");
    if (section.empty()) fail("key outside of a section");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    if (!detail::known_keys().at(section).count(key)) fail("unknown key '" + key + "' in [" + section + "]");
    if (value.empty()) fail("empty value for '" + key + "'");
    if (!entries.emplace(section + "." + key, detail::Entry{value, line_no}).second) fail("duplicate key '" + key + "'");
  }

  const detail::ConfigReader r(origin, std::move(entries));
  ExperimentSpec spec;
  spec.model = detail::parse_model(r, base_dir);
  spec.claim = detail::parse_claim(r, model_assets(spec.model));
  spec.label = r.text("run.label", "");
  spec.n = static_cast<std::size_t>(r.integer("run.n", 10000));
  if (spec.n < 1) r.fail("run.n", "n must be >= 1");
  spec.seed = r.integer("run.seed", 1);
  spec.stream = r.integer("run.stream", 0);
  spec.level = r.number("run.level", 0.95);
  if (!(spec.level > 0.0 && spec.level < 1.0)) r.fail("run.level", "level must lie in (0, 1)");
  if (r.has("run.modes")) {
    spec.modes.clear();
    for (const std::string& m : detail::split_list(r.text("run.modes", ""))) {
      const auto mode = parse_mode(m);
      if (!mode) r.fail("run.modes", "unknown mode '" + m + "' (crude, ris, rris, two_stage)");
      spec.modes.push_back(*mode);
    }
  }
  const std::string drift = r.text("run.drift", "identity");
  if (drift == "identity") spec.drift = DriftKind::Identity;
  else if (drift == "path_single") spec.drift = DriftKind::PathSingle;
  else if (drift == "path_multi") spec.drift = DriftKind::PathMulti;
  else if (drift == "dense") spec.drift = DriftKind::Dense;
  else r.fail("run.drift", "expected identity, path_single, path_multi or dense, got '" + drift + "'");
  if (spec.drift == DriftKind::Dense) {
    if (!r.has("run.drift_file")) r.fail("run.drift_file", "required for drift = dense");
    spec.drift_file = detail::resolve_path(base_dir, r.text("run.drift_file", ""));
  } else if (r.has("run.drift_file")) {
    r.fail("run.drift_file", "only valid for drift = dense");
  }
  if (r.has("run.replications")) {
    spec.replications = static_cast<std::size_t>(r.integer("run.replications"));
    if (*spec.replications < 1) r.fail("run.replications", "replications must be >= 1");
  }
  if (r.has("run.reference")) spec.reference = r.number("run.reference");
  spec.newton.tol = r.number("run.tol", spec.newton.tol);
  if (!(spec.newton.tol > 0.0)) r.fail("run.tol", "tol must be > 0");
  spec.newton.max_iter = static_cast<int>(r.integer("run.max_iter", static_cast<std::uint64_t>(spec.newton.max_iter)));

  try {
    build_payoff(spec.model, spec.claim);
  } catch (const Error& e) {
    r.fail("claim.type", e.what());
  }
  try {
    make_drift(spec);
  } catch (const Error& e) {
    r.fail(spec.drift == DriftKind::Dense ? "run.drift_file" : "run.drift", e.what());
  }
  return spec;
}

inline ExperimentSpec parse_config(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::ConfigError, "cannot open config '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  ExperimentSpec spec = parse_config_text(text.str(), path, std::filesystem::path(path).parent_path().string());
  if (spec.label.empty()) spec.label = std::filesystem::path(path).stem().string();
  return spec;
}

// ---------------------------------------------------------------------------
// Builtin experiments

namespace detail {

inline ExperimentSpec basket_spec(std::size_t assets, double spot, double vol, double rate, double rho,
                                  double strike, std::size_t n) {
  ExperimentSpec s;
  s.model = BlackScholesMulti{assets, {1.0}, std::vector<double>(assets, spot), std::vector<double>(assets, vol), rate, rho};
  s.claim = Basket{std::vector<double>(assets, 1.0 / static_cast<double>(assets)), strike};
  s.n = n;
  return s;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline std::vector<ExperimentSpec> table1() {
  const std::pair<double, double> grid[] = {{0.1, 45}, {0.1, 55}, {0.2, 50}, {0.5, 45}, {0.5, 55}, {0.9, 45}, {0.9, 55}};
  std::vector<ExperimentSpec> out;
  for (const auto& [rho, k] : grid) {
    ExperimentSpec s = basket_spec(40, 50.0, 0.2, 0.05, rho, k, 10000);
    s.label = "rho=" + num(rho) + " K=" + num(k);
    out.push_back(std::move(s));
  }
  return out;
}

/// Spots in [70, 130] and vols in [0.1, 0.3], drawn from a fixed stream.
inline std::vector<ExperimentSpec> table2() {
  const std::size_t assets = 10;
  const RngStream params = new_stream(20080101, 0);
  std::vector<ExperimentSpec> out;
  for (std::size_t c = 0; c < 4; ++c) {
    BlackScholesMulti m{assets, {1.0}, std::vector<double>(assets), std::vector<double>(assets), 0.05, 0.2};
    for (std::size_t i = 0; i < assets; ++i) {
      m.spot[i] = 70.0 + 60.0 * params.uniform(2 * assets * c + i);
      m.vol[i] = 0.1 + 0.2 * params.uniform(2 * assets * c + assets + i);
    }
    std::vector<double> w(assets, 1.0 / assets);
    for (std::size_t i = assets / 2; i < assets; ++i) w[i] = -1.0 / assets;
    ExperimentSpec s;
    s.model = m;
    s.claim = Basket{w, 0.0};
    s.n = 100000;
    s.label = "case=" + std::to_string(c + 1);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<ExperimentSpec> table3() {
  std::vector<ExperimentSpec> out;
  for (double barrier : {70.0, 80.0, 90.0, 95.0}) {
    ExperimentSpec s;
    s.model = BlackScholesMulti{1, regular_grid(2.0, 24), {100.0}, {0.2}, 0.05, 0.0};
    s.claim = BarrierCall{110.0, barrier, Direction::Down};
    s.drift = DriftKind::PathSingle;
    s.modes = {Mode::Crude, Mode::Ris, Mode::Rris};
    s.n = 10000;
    s.label = "L=" + num(barrier);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<ExperimentSpec> table4() {
  std::vector<ExperimentSpec> out;
  for (double strike : {45.0, 50.0, 55.0}) {
    ExperimentSpec s;
    s.model = BlackScholesMulti{5, regular_grid(2.0, 24), {50, 40, 60, 30, 20}, std::vector<double>(5, 0.2), 0.05, 0.3};
    s.claim = BarrierBasketCall{std::vector<double>(5, 0.2), strike, {40, 30, 45, 20, 10}};
    s.drift = DriftKind::PathMulti;
    s.modes = {Mode::Crude, Mode::Ris, Mode::Rris};
    s.n = 100000;
    s.label = "K=" + num(strike);
    out.push_back(std::move(s));
  }
  return out;
}

/// Best-of on twelve assets with 100 steps per year, under constant
/// volatility standing in for a local volatility surface.
inline std::vector<ExperimentSpec> table5_surrogate() {
  std::vector<ExperimentSpec> out;
  for (double strike : {70.0, 80.0, 90.0}) {
    ExperimentSpec s;
    s.model = BlackScholesMulti{12, regular_grid(1.0, 100), std::vector<double>(12, 50.0), std::vector<double>(12, 0.2),
                                0.05, 0.5};
    s.claim = BestOf{std::vector<double>(12, 1.0), strike};
    s.drift = DriftKind::PathMulti;
    s.modes = {Mode::Crude, Mode::Rris};
    s.n = 50000;
    s.label = "K=" + num(strike);
    out.push_back(std::move(s));
  }
  return out;
}

inline ExperimentSpec digital_spec() {
  ExperimentSpec s;
  s.model = BlackScholesMulti{1, {1.0}, {100.0}, {0.2}, 0.05, 0.0};
  s.claim = Digital{140.0, Direction::Up};
  s.modes = {Mode::Ris};
  s.n = 100000;
  s.label = "L=140";
  return s;
}

inline std::vector<ExperimentSpec> digital_coverage() {
  ExperimentSpec s = digital_spec();
  s.replications = 2000;
  s.reference = closed_form_price(s);
  return {s};
}

}  // namespace detail

inline std::vector<std::string> builtin_names() {
  return {"table1", "table2", "table3", "table4", "table5-surrogate", "digital", "digital-coverage"};
}

/// Parameter rows of a builtin experiment; streams are spaced by 2 so
/// two-stage runs never share samples with a neighbouring row.
inline std::optional<std::vector<ExperimentSpec>> builtin_experiment(const std::string& name) {
  std::vector<ExperimentSpec> rows;
  if (name == "table1") rows = detail::table1();
  else if (name == "table2") rows = detail::table2();
  else if (name == "table3") rows = detail::table3();
  else if (name == "table4") rows = detail::table4();
  else if (name == "table5-surrogate" || name == "bestof") rows = detail::table5_surrogate();
  else if (name == "digital") rows = {detail::digital_spec()};
  else if (name == "digital-coverage") rows = detail::digital_coverage();
  else return std::nullopt;
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].stream = 2 * i;
  return rows;
}

// ---------------------------------------------------------------------------
// Execution

/// One output line: a pipeline run or a coverage study for one mode.
struct ResultRow {
  static constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

  std::string experiment;
  std::string label;
  std::string mode;
  std::size_t n = 0;
  std::size_t d = 0;
  std::size_t d_reduced = 0;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  double price = kNaN;
  double variance = kNaN;
  double ci_low = kNaN;
  double ci_high = kNaN;
  double level = 0.95;
  int iterations = 0;
  double gradient_norm = kNaN;
  bool clamped = false;
  bool fallback = false;
  std::size_t replications = 0;  // coverage rows only
  std::size_t hits = 0;
  double coverage = kNaN;
  std::string status = "ok";
  double wall_seconds = 0.0;
  std::vector<double> vartheta;     // not serialized
  std::optional<ErrorCode> error;   // not serialized
};

namespace detail {

inline ResultRow row_header(const ExperimentSpec& spec, const std::string& experiment, Mode mode) {
  ResultRow row;
  row.experiment = experiment;
  row.label = spec.label;
  row.mode = to_string(mode);
  row.n = spec.n;
  row.seed = spec.seed;
  row.stream = spec.stream;
  row.level = spec.level;
  try {
    row.d = spec_dimension(spec);
    row.d_reduced = mode == Mode::Rris ? make_drift(spec).reduced_dim() : (mode == Mode::Crude ? 0 : row.d);
  } catch (const Error&) {
  }
  return row;
}

inline PipelineOptions pipeline_options(const ExperimentSpec& spec) {
  PipelineOptions opts;
  opts.newton = spec.newton;
  opts.level = spec.level;
  opts.memory_budget = spec.memory_budget;
  return opts;
}

inline std::vector<ResultRow> run_spec(const ExperimentSpec& spec, const std::string& experiment) {
  std::vector<ResultRow> rows;
  for (Mode mode : spec.modes) rows.push_back(row_header(spec, experiment, mode));
  try {
    const Payoff payoff = build_payoff(spec.model, spec.claim);
    const DriftMap drift = make_drift(spec);
    if (spec.replications) {
      const std::optional<double> reference = spec.reference ? spec.reference : closed_form_price(spec);
      require(reference.has_value(), ErrorCode::ConfigError, "coverage needs run.reference for this claim");
      for (std::size_t k = 0; k < spec.modes.size(); ++k) {
        ResultRow& row = rows[k];
        const auto start = std::chrono::steady_clock::now();
        const CoverageResult cov = coverage_experiment(CoverageConfig{payoff, drift, spec.modes[k], spec.n, spec.seed,
                                                                      spec.stream, *spec.replications, *reference,
                                                                      pipeline_options(spec)});
        row.price = *reference;
        row.replications = cov.replications;
        row.hits = cov.hits;
        row.coverage = cov.empirical_level;
        if (cov.failures) row.status = std::to_string(cov.failures) + " replications failed";
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      }
      return rows;
    }
    const SampleBlock samples = draw_samples(new_stream(spec.seed, spec.stream), spec.n, payoff.dim(), spec.memory_budget);
    for (std::size_t k = 0; k < spec.modes.size(); ++k) {
      ResultRow& row = rows[k];
      try {
        const EstimateReport rep = run_pipeline(samples, payoff, drift, spec.modes[k], pipeline_options(spec));
        row.price = rep.price;
        row.variance = rep.variance;
        row.ci_low = rep.ci_low;
        row.ci_high = rep.ci_high;
        row.iterations = rep.iterations;
        if (spec.modes[k] != Mode::Crude) row.gradient_norm = rep.gradient_norm;
        row.clamped = rep.negative_variance_clamped;
        row.fallback = rep.fell_back_to_crude;
        if (!rep.warning.empty()) row.status = rep.warning;
        row.wall_seconds = rep.wall_seconds;
        row.vartheta.assign(rep.vartheta.begin(), rep.vartheta.end());
      } catch (const Error& e) {
        row.status = e.what();
        row.error = e.code();
      }
    }
  } catch (const Error& e) {
    for (ResultRow& row : rows) {
      row.status = e.what();
      row.error = e.code();
    }
  }
  return rows;
}

}  // namespace detail

/// Runs every parameter row; rows execute concurrently and are returned in
/// input order. Failures are recorded in the row status.
inline std::vector<ResultRow> run_experiment(const std::vector<ExperimentSpec>& specs, const std::string& experiment) {
  std::vector<std::vector<ResultRow>> per_spec(specs.size());
  parallel_for(specs.size(), [&](std::size_t i) { per_spec[i] = detail::run_spec(specs[i], experiment); });
  std::vector<ResultRow> rows;
  for (auto& block : per_spec)
    for (auto& row : block) rows.push_back(std::move(row));
  return rows;
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {

inline std::string exact(double v) {
  if (std::isnan(v)) return {};
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string fixed(double v, const char* fmt) {
  if (std::isnan(v)) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

}  // namespace detail

inline std::vector<std::string> csv_columns(bool timing) {
  std::vector<std::string> cols{"experiment", "label",    "mode",     "n",      "d",          "d_reduced",  "seed",
                                "stream",     "price",    "variance", "ci_low", "ci_high",    "level",      "iterations",
                                "gradient_norm", "clamped", "fallback", "replications", "hits", "coverage", "status"};
  if (timing) cols.push_back("wall_seconds");
  return cols;
}

/// CSV with a header row; doubles carry 17 significant digits and missing
/// values are empty. Wall time is machine dependent and only written when
/// `timing` is set.
inline std::string emit_csv(const std::vector<ResultRow>& rows, bool timing = false) {
  std::string out;
  const auto cols = csv_columns(timing);
  for (std::size_t c = 0; c < cols.size(); ++c) out += (c ? "," : "") + cols[c];
  out += "\n";
  for (const ResultRow& r : rows) {
    std::vector<std::string> f{r.experiment,
                               r.label,
                               r.mode,
                               std::to_string(r.n),
                               std::to_string(r.d),
                               std::to_string(r.d_reduced),
                               std::to_string(r.seed),
                               std::to_string(r.stream),
                               detail::exact(r.price),
                               detail::exact(r.variance),
                               detail::exact(r.ci_low),
                               detail::exact(r.ci_high),
                               detail::exact(r.level),
                               std::to_string(r.iterations),
                               detail::exact(r.gradient_norm),
                               r.clamped ? "1" : "0",
                               r.fallback ? "1" : "0",
                               std::to_string(r.replications),
                               std::to_string(r.hits),
                               detail::exact(r.coverage),
                               r.status};
    if (timing) f.push_back(detail::exact(r.wall_seconds));
    for (std::size_t c = 0; c < f.size(); ++c) out += (c ? "," : "") + detail::csv_field(f[c]);
    out += "\n";
  }
  return out;
}

/// Aligned columns for reading at a terminal.
inline std::string emit_text(const std::vector<ResultRow>& rows) {
  const std::vector<std::string> head{"label", "mode", "n", "d", "d'", "price", "variance", "ci", "iter", "seconds", "status"};
  std::vector<std::vector<std::string>> table{head};
  for (const ResultRow& r : rows) {
    std::string ci = r.replications ? "coverage " + detail::fixed(r.coverage, "%.4f") + " (" + std::to_string(r.hits) +
                                          "/" + std::to_string(r.replications) + ")"
                                    : "[" + detail::fixed(r.ci_low, "%.5f") + ", " + detail::fixed(r.ci_high, "%.5f") + "]";
    table.push_back({r.label, r.mode, std::to_string(r.n), std::to_string(r.d),
                     r.d_reduced ? std::to_string(r.d_reduced) : "-", detail::fixed(r.price, "%.5f"),
                     detail::fixed(r.variance, "%.5g"), ci, std::to_string(r.iterations),
                     detail::fixed(r.wall_seconds, "%.3f"), r.status});
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& line : table)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  std::string out;
  for (const auto& line : table) {
    std::string text;
    for (std::size_t c = 0; c < line.size(); ++c) {
      const bool left = c < 2 || c + 1 == line.size();
      const std::string pad(width[c] - line[c].size(), ' ');
      text += (c ? "  " : "") + (left ? line[c] + (c + 1 == line.size() ? "" : pad) : pad + line[c]);
    }
    out += text + "\n";
  }
  return out;
}

inline std::string emit_report(const std::vector<ResultRow>& rows, OutputFormat format, bool timing = false) {
  return format == OutputFormat::Csv ? emit_csv(rows, timing) : emit_text(rows);
}

/// RFC 4180 records; quoted fields may hold commas, quotes and newlines.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') field += '"', ++i;
      else if (c == '"') quoted = false;
      else field += c;
      continue;
    }
    any = true;
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      record.push_back(std::move(field));
      field.clear();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      record.push_back(std::move(field));
      field.clear();
      records.push_back(std::move(record));
      record.clear();
      any = false;
    } else {
      field += c;
    }
  }
  require(!quoted, ErrorCode::ConfigError, "unterminated quoted CSV field");
  if (any) {
    record.push_back(std::move(field));
    records.push_back(std::move(record));
  }
  return records;
}

/// Inverse of emit_csv.
inline std::vector<ResultRow> rows_from_csv(const std::string& text) {
  const auto records = parse_csv(text);
  require(!records.empty(), ErrorCode::ConfigError, "CSV has no header");
  const bool timing = records[0].size() == csv_columns(true).size();
  require(records[0] == csv_columns(timing), ErrorCode::ConfigError, "unexpected CSV header");
  const auto real = [](const std::string& s) {
    if (s.empty()) return ResultRow::kNaN;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);  // keeps subnormals, unlike stod
    require(end == s.c_str() + s.size(), ErrorCode::ConfigError, "bad CSV number '" + s + "'");
    return v;
  };
  const auto count = [](const std::string& s) { return static_cast<std::size_t>(std::stoull(s)); };
  std::vector<ResultRow> rows;
  for (std::size_t k = 1; k < records.size(); ++k) {
    const auto& f = records[k];
    require(f.size() == records[0].size(), ErrorCode::ConfigError, "CSV record " + std::to_string(k) + " has wrong width");
    ResultRow r;
    r.experiment = f[0];
    r.label = f[1];
    r.mode = f[2];
    r.n = count(f[3]);
    r.d = count(f[4]);
    r.d_reduced = count(f[5]);
    r.seed = std::stoull(f[6]);
    r.stream = std::stoull(f[7]);
    r.price = real(f[8]);
    r.variance = real(f[9]);
    r.ci_low = real(f[10]);
    r.ci_high = real(f[11]);
    r.level = real(f[12]);
    r.iterations = std::stoi(f[13]);
    r.gradient_norm = real(f[14]);
    r.clamped = f[15] == "1";
    r.fallback = f[16] == "1";
    r.replications = count(f[17]);
    r.hits = count(f[18]);
    r.coverage = real(f[19]);
    r.status = f[20];
    if (timing) r.wall_seconds = real(f[21]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace tilt
