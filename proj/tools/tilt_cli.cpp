// Command line front end for the tilt library.
//
//   tilt price <config>
//   tilt experiment <name|config> [--n N] [--seed S] [--modes LIST] [--format text|csv] [--out FILE]
//   tilt coverage <name|config> --replications R
//   tilt list
//
// Exit status: 0 success, 2 configuration error, 3 numerical failure.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tilt/experiment.hpp"

namespace {

constexpr int kConfigExit = 2;
constexpr int kNumericalExit = 3;

struct CommonOptions {
  std::optional<std::size_t> n;
  std::optional<std::uint64_t> seed;
  std::string modes;
  std::string format = "text";
  std::string out;
  unsigned threads = 0;
  bool timing = false;
  std::optional<double> level;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--n", o.n, "samples per run")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", o.seed, "master seed (default: config or $TILT_SEED)");
  cmd->add_option("--modes", o.modes, "comma separated subset of crude,ris,rris,two_stage");
  cmd->add_option("--format", o.format, "text or csv")->check(CLI::IsMember({"text", "csv"}));
  cmd->add_option("--out", o.out, "write the report to FILE instead of stdout");
  cmd->add_option("--threads", o.threads, "worker threads (default: $TILT_THREADS or 1)");
  cmd->add_option("--level", o.level, "confidence level")->check(CLI::Range(0.0, 1.0));
  cmd->add_flag("--timing", o.timing, "add the wall_seconds column to csv output");
}

std::vector<tilt::ExperimentSpec> load_specs(const std::string& target) {
  if (auto builtin = tilt::builtin_experiment(target)) return *builtin;
  return {tilt::parse_config(target)};
}

std::string experiment_name(const std::string& target) {
  if (tilt::builtin_experiment(target)) return target;
  return std::filesystem::path(target).stem().string();
}

void apply_overrides(std::vector<tilt::ExperimentSpec>& specs, const CommonOptions& o) {
  std::optional<std::uint64_t> seed = o.seed;
  if (!seed) {
    if (const char* env = std::getenv("TILT_SEED")) {
      const auto parsed = tilt::detail::to_uint(env);
      tilt::require(parsed.has_value(), tilt::ErrorCode::ConfigError, "TILT_SEED must be a nonnegative integer");
      seed = parsed;
    }
  }
  std::optional<std::vector<tilt::Mode>> modes;
  if (!o.modes.empty()) {
    modes.emplace();
    for (const std::string& m : tilt::detail::split_list(o.modes)) {
      const auto mode = tilt::parse_mode(m);
      tilt::require(mode.has_value(), tilt::ErrorCode::ConfigError, "--modes: unknown mode '" + m + "'");
      modes->push_back(*mode);
    }
  }
  for (auto& s : specs) {
    if (o.n) s.n = *o.n;
    if (seed) s.seed = *seed;
    if (modes) s.modes = *modes;
    if (o.level) {
      tilt::require(*o.level > 0.0 && *o.level < 1.0, tilt::ErrorCode::ConfigError, "--level must lie in (0, 1)");
      s.level = *o.level;
    }
  }
}

void write_output(const std::string& text, const std::string& path) {
  if (path.empty()) {
    std::fwrite(text.data(), 1, text.size(), stdout);
    std::fflush(stdout);
    return;
  }
  std::ofstream out(path, std::ios::binary);
  tilt::require(static_cast<bool>(out), tilt::ErrorCode::ResourceError, "cannot write '" + path + "'");
  out << text;
}

int exit_status(const std::vector<tilt::ResultRow>& rows) {
  int status = 0;
  for (const auto& r : rows) {
    if (!r.error) continue;
    const tilt::Error probe(*r.error, "");
    status = std::max(status, probe.numerical() ? kNumericalExit : kConfigExit);
  }
  return status;
}

std::string describe(const tilt::ExperimentSpec& spec) {
  std::string out = "dimension d = " + std::to_string(tilt::spec_dimension(spec));
  out += ", drift " + std::string(tilt::to_string(spec.drift)) + " with d' = " +
         std::to_string(tilt::make_drift(spec).reduced_dim());
  out += ", n = " + std::to_string(spec.n) + ", seed = " + std::to_string(spec.seed) + "\n";
  return out;
}

/// Human readable block per mode.
std::string price_block(const tilt::ExperimentSpec& spec, const std::vector<tilt::ResultRow>& rows) {
  std::string out = describe(spec);
  char buf[256];
  for (const auto& r : rows) {
    out += "\n[" + r.mode + "]\n";
    if (r.error) {
      out += "  error     " + r.status + "\n";
      continue;
    }
    std::snprintf(buf, sizeof buf, "  price     %.10g\n  variance  %.10g%s\n  %.4g%% CI  [%.10g, %.10g]\n", r.price,
                  r.variance, r.clamped ? " (clamped at 0)" : "", 100.0 * r.level, r.ci_low, r.ci_high);
    out += buf;
    if (!r.vartheta.empty()) {
      out += "  vartheta  [";
      for (std::size_t k = 0; k < r.vartheta.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%s%.6g", k ? ", " : "", r.vartheta[k]);
        out += buf;
      }
      std::snprintf(buf, sizeof buf, "]\n  newton    %d iterations, |grad| = %.3g\n", r.iterations, r.gradient_norm);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, "  seconds   %.3f\n", r.wall_seconds);
    out += buf;
    if (r.status != "ok") out += "  warning   " + r.status + "\n";
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive importance sampling for Gaussian expectations"};
  app.require_subcommand(1);

  CommonOptions price_opts, exp_opts, cov_opts;
  std::string price_config, exp_target, cov_target;
  std::size_t replications = 0;

  auto* price = app.add_subcommand("price", "price one config and print a report per mode");
  price->add_option("config", price_config, "config file")->required();
  add_common(price, price_opts);

  auto* experiment = app.add_subcommand("experiment", "run a builtin experiment or a config as table rows");
  experiment->add_option("target", exp_target, "builtin name (see `tilt list`) or config file")->required();
  add_common(experiment, exp_opts);

  auto* coverage = app.add_subcommand("coverage", "confidence interval coverage study");
  coverage->add_option("target", cov_target, "builtin name or config file")->required();
  coverage->add_option("--replications", replications, "independent runs")->required()->check(CLI::PositiveNumber);
  add_common(coverage, cov_opts);

  app.add_subcommand("list", "list builtin experiments");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  try {
    if (app.got_subcommand("list")) {
      for (const auto& name : tilt::builtin_names()) std::cout << name << "\n";
      return 0;
    }
    CommonOptions& o = app.got_subcommand("price") ? price_opts : app.got_subcommand("coverage") ? cov_opts : exp_opts;
    if (o.threads) tilt::set_thread_count(o.threads);
    const auto format = o.format == "csv" ? tilt::OutputFormat::Csv : tilt::OutputFormat::Text;

    if (app.got_subcommand("price")) {
      auto specs = std::vector<tilt::ExperimentSpec>{tilt::parse_config(price_config)};
      apply_overrides(specs, o);
      specs[0].replications.reset();
      const auto rows = tilt::run_experiment(specs, experiment_name(price_config));
      write_output(format == tilt::OutputFormat::Csv ? tilt::emit_csv(rows, o.timing) : price_block(specs[0], rows), o.out);
      return exit_status(rows);
    }

    const std::string& target = app.got_subcommand("coverage") ? cov_target : exp_target;
    auto specs = load_specs(target);
    apply_overrides(specs, o);
    if (app.got_subcommand("coverage"))
      for (auto& s : specs) s.replications = replications;
    const auto rows = tilt::run_experiment(specs, experiment_name(target));
    write_output(tilt::emit_report(rows, format, o.timing), o.out);
    return exit_status(rows);
  } catch (const tilt::Error& e) {
    std::cerr << "tilt: " << e.what() << "\n";
    return e.numerical() ? kNumericalExit : kConfigExit;
  } catch (const std::exception& e) {
    std::cerr << "tilt: " << e.what() << "\n";
    return 1;
  }
}
