#include "ugcem/cli.hpp"

#include "ugcem/data.hpp"
#include "ugcem/ensemble.hpp"
#include "ugcem/errors.hpp"
#include "ugcem/harness.hpp"
#include "ugcem/planner.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace ugcem::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kEchoName = "run_config.toml";

struct RunConfig {
  std::string env = "cartpole";
  std::uint64_t seed = 0;
  std::string out = "out";
  int workers = 1;
  std::string dataset;  // default: <out>/dataset.txt
  std::string model;    // default: <out>/model.txt
  std::string log_level = "info";

  // data
  std::size_t samples = 10000;
  int episode_length = 200;
  bool no_filter = false;
  double region_threshold = -0.105;
  double region_lo = -0.75 * std::numbers::pi;
  double region_hi = -0.25 * std::numbers::pi;

  // model
  int members = 4;
  std::vector<int> hidden{200, 200, 200};
  int epochs = 50;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double weight_decay = 5e-5;
  double logvar_min = -10.0;
  double logvar_max = 4.0;

  // planner
  int horizon = 10;
  int iterations = 5;
  double elite_ratio = 0.3;
  int population = 200;
  int particles = 12;
  double alpha = 0.1;
  std::string propagation = "ts_inf";
  std::string uncertainty = "total";

  // experiments
  std::vector<double> betas{0.0, 0.5, 1.0, 2.0, 5.0};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int episodes = 10;
  int max_steps = 200;
  int heatmap_res = 21;
  int heatmap_actions = 200;
  std::vector<double> heatmap_x;  // [lo, hi] of axis 1; empty = environment default
  std::vector<double> heatmap_y;  // [lo, hi] of axis 2
};

void add_options(CLI::App& app, RunConfig& c) {
  app.add_option("--env", c.env, "cartpole | pendulum")->check(CLI::IsMember({"cartpole", "pendulum"}));
  app.add_option("--seed", c.seed, "master seed for collection, training and plan traces");
  app.add_option("--out", c.out, "output directory");
  app.add_option("--workers", c.workers, "parallel workers (results do not depend on it)")
      ->check(CLI::PositiveNumber);
  app.add_option("--dataset", c.dataset, "dataset file (default <out>/dataset.txt)");
  app.add_option("--model", c.model, "ensemble checkpoint (default <out>/model.txt)");
  app.add_option("--log-level", c.log_level, "trace | debug | info | warn | error | off");

  app.add_option("--samples", c.samples, "random-interaction steps to collect");
  app.add_option("--episode-length", c.episode_length, "episode cap during collection");
  app.add_flag("--no-filter", c.no_filter, "keep transitions touching the forbidden region");
  app.add_option("--region-threshold", c.region_threshold, "cartpole: forbidden when theta < threshold");
  app.add_option("--region-lo", c.region_lo, "pendulum: lower edge of the forbidden wedge");
  app.add_option("--region-hi", c.region_hi, "pendulum: upper edge of the forbidden wedge");

  app.add_option("--members", c.members, "ensemble size");
  app.add_option("--hidden", c.hidden, "hidden layer widths")->delimiter(',');
  app.add_option("--epochs", c.epochs);
  app.add_option("--batch-size", c.batch_size);
  app.add_option("--learning-rate", c.learning_rate);
  app.add_option("--weight-decay", c.weight_decay);
  app.add_option("--logvar-min", c.logvar_min);
  app.add_option("--logvar-max", c.logvar_max);

  app.add_option("--horizon", c.horizon);
  app.add_option("--iterations", c.iterations);
  app.add_option("--elite-ratio", c.elite_ratio);
  app.add_option("--population", c.population);
  app.add_option("--particles", c.particles);
  app.add_option("--alpha", c.alpha, "weight kept on the previous CEM distribution");
  app.add_option("--propagation", c.propagation, "ts_inf | ts_1");
  app.add_option("--uncertainty", c.uncertainty, "total | epistemic");

  app.add_option("--beta", c.betas, "penalty weights; eval uses the first, trace the largest")->delimiter(',');
  app.add_option("--seeds", c.seeds, "evaluation seeds")->delimiter(',');
  app.add_option("--episodes", c.episodes, "episodes per (beta, seed) cell");
  app.add_option("--max-steps", c.max_steps, "episode length during evaluation");
  app.add_option("--heatmap-res", c.heatmap_res, "grid points per heatmap axis");
  app.add_option("--heatmap-actions", c.heatmap_actions, "sampled actions per heatmap cell");
  app.add_option("--heatmap-x", c.heatmap_x, "lo,hi of heatmap axis 1")->delimiter(',')->expected(2);
  app.add_option("--heatmap-y", c.heatmap_y, "lo,hi of heatmap axis 2")->delimiter(',')->expected(2);
}

std::string toml_string(const std::string& s) {
  std::string r = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') r += '\\';
    r += ch;
  }
  return r + '"';
}

template <typename T>
std::string toml_array(const std::vector<T>& v) {
  std::vector<std::string> items;
  for (const auto& x : v) {
    if constexpr (std::is_floating_point_v<T>) {
      items.push_back(format_real(x));
    } else {
      items.push_back(std::to_string(x));
    }
  }
  return "[" + fmt::format("{}", fmt::join(items, ", ")) + "]";
}

/// Resolved configuration in the same format `--config` reads.
std::string echo(const RunConfig& c) {
  std::string s;
  auto kv = [&s](std::string_view key, const std::string& value) { s += fmt::format("{} = {}\n", key, value); };
  auto real = [](double v) { return format_real(v); };
  kv("env", toml_string(c.env));
  kv("seed", std::to_string(c.seed));
  kv("out", toml_string(c.out));
  kv("workers", std::to_string(c.workers));
  kv("dataset", toml_string(c.dataset));
  kv("model", toml_string(c.model));
  kv("log-level", toml_string(c.log_level));
  kv("samples", std::to_string(c.samples));
  kv("episode-length", std::to_string(c.episode_length));
  kv("no-filter", c.no_filter ? "true" : "false");
  kv("region-threshold", real(c.region_threshold));
  kv("region-lo", real(c.region_lo));
  kv("region-hi", real(c.region_hi));
  kv("members", std::to_string(c.members));
  kv("hidden", toml_array(c.hidden));
  kv("epochs", std::to_string(c.epochs));
  kv("batch-size", std::to_string(c.batch_size));
  kv("learning-rate", real(c.learning_rate));
  kv("weight-decay", real(c.weight_decay));
  kv("logvar-min", real(c.logvar_min));
  kv("logvar-max", real(c.logvar_max));
  kv("horizon", std::to_string(c.horizon));
  kv("iterations", std::to_string(c.iterations));
  kv("elite-ratio", real(c.elite_ratio));
  kv("population", std::to_string(c.population));
  kv("particles", std::to_string(c.particles));
  kv("alpha", real(c.alpha));
  kv("propagation", toml_string(c.propagation));
  kv("uncertainty", toml_string(c.uncertainty));
  kv("beta", toml_array(c.betas));
  kv("seeds", toml_array(c.seeds));
  kv("episodes", std::to_string(c.episodes));
  kv("max-steps", std::to_string(c.max_steps));
  kv("heatmap-res", std::to_string(c.heatmap_res));
  kv("heatmap-actions", std::to_string(c.heatmap_actions));
  kv("heatmap-x", toml_array(c.heatmap_x));
  kv("heatmap-y", toml_array(c.heatmap_y));
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text)) throw MissingInputError("cannot write '" + path.string() + "'");
}

/// Fills path and grid defaults that depend on other fields, then checks ranges.
void resolve(RunConfig& c) {
  if (c.dataset.empty()) c.dataset = (fs::path(c.out) / "dataset.txt").string();
  if (c.model.empty()) c.model = (fs::path(c.out) / "model.txt").string();
  const auto grid = HeatmapGrid::defaults(parse_env_id(c.env));
  if (c.heatmap_x.empty()) c.heatmap_x = {grid.lo1, grid.hi1};
  if (c.heatmap_y.empty()) c.heatmap_y = {grid.lo2, grid.hi2};
  if (c.betas.empty()) throw ConfigError("--beta needs at least one value");
  if (c.seeds.empty()) throw ConfigError("--seeds needs at least one value");
  if (c.samples < 2) throw ConfigError("--samples must be >= 2");
  if (c.episode_length < 1 || c.episodes < 1 || c.max_steps < 1) throw ConfigError("lengths must be positive");
  if (c.heatmap_res < 1 || c.heatmap_actions < 1) throw ConfigError("heatmap sizes must be positive");
  if (c.hidden.empty()) throw ConfigError("--hidden needs at least one width");
  for (int h : c.hidden) {
    if (h < 1) throw ConfigError("hidden widths must be positive");
  }
  if (!(c.logvar_min < c.logvar_max)) throw ConfigError("logvar-min must be below logvar-max");
  for (double b : c.betas) {
    if (!(b >= 0.0) || !std::isfinite(b)) throw ConfigError("beta values must be finite and >= 0");
  }
  auto level = spdlog::level::from_str(c.log_level);
  if (level == spdlog::level::off && c.log_level != "off") throw ConfigError("unknown log level '" + c.log_level + "'");
  spdlog::set_level(level);
}

RegionSpec region_of(const RunConfig& c) {
  RegionSpec r = RegionSpec::defaults(parse_env_id(c.env));
  r.threshold = c.region_threshold;
  r.lo = c.region_lo;
  r.hi = c.region_hi;
  return r;
}

EnsembleConfig ensemble_config(const RunConfig& c) {
  EnsembleConfig e;
  e.members = c.members;
  e.hidden = c.hidden;
  e.epochs = c.epochs;
  e.batch_size = c.batch_size;
  e.adam.lr = c.learning_rate;
  e.adam.weight_decay = c.weight_decay;
  e.bounds = {c.logvar_min, c.logvar_max};
  return e;
}

CemConfig planner_config(const RunConfig& c) {
  CemConfig p = CemConfig::defaults(parse_env_id(c.env));
  p.horizon = c.horizon;
  p.iterations = c.iterations;
  p.elite_ratio = c.elite_ratio;
  p.population = c.population;
  p.particles = c.particles;
  p.alpha = c.alpha;
  p.propagation = parse_propagation(c.propagation);
  p.uncertainty = parse_uncertainty_kind(c.uncertainty);
  p.beta = c.betas.front();
  p.validate();
  return p;
}

Ensemble load_model_for(const RunConfig& c) {
  if (!fs::exists(c.model)) throw MissingInputError("model checkpoint '" + c.model + "' not found");
  Ensemble ens = load_ensemble(c.model);
  if (ens.env != parse_env_id(c.env)) {
    throw ConfigError("checkpoint is for " + std::string(to_string(ens.env)) + ", config asks for " + c.env);
  }
  return ens;
}

void cmd_collect(const RunConfig& c) {
  const EnvId env = parse_env_id(c.env);
  const TransitionBuffer raw = collect_random(env, c.samples, c.seed, c.episode_length);
  const TransitionBuffer kept = c.no_filter ? raw : filter_region(raw, region_of(c));
  save(kept, c.dataset);
  fmt::print("collected {} transitions, removed {}, kept {} -> {}\n", raw.size(), raw.size() - kept.size(),
             kept.size(), c.dataset);
}

void cmd_train(const RunConfig& c) {
  if (!fs::exists(c.dataset)) throw MissingInputError("dataset '" + c.dataset + "' not found");
  const TransitionBuffer data = load(c.dataset);
  if (data.env() != parse_env_id(c.env)) {
    throw ConfigError("dataset is for " + std::string(to_string(data.env())) + ", config asks for " + c.env);
  }
  const TrainResult r = train_ensemble(data, ensemble_config(c), c.seed, c.workers);
  save_ensemble(r.ensemble, c.model);

  std::string csv = "member,epoch,nll\n";
  for (std::size_t m = 0; m < r.loss_history.size(); ++m) {
    for (std::size_t e = 0; e < r.loss_history[m].size(); ++e) {
      csv += fmt::format("{},{},{}\n", m, e + 1, format_real(r.loss_history[m][e]));
    }
  }
  write_text(fs::path(c.out) / "loss_history.csv", csv);
  for (std::size_t m = 0; m < r.loss_history.size(); ++m) {
    fmt::print("member {}: nll {} -> {}\n", m, r.loss_history[m].front(), r.loss_history[m].back());
  }
}

void cmd_sweep(const RunConfig& c, bool single_beta) {
  const Ensemble ens = load_model_for(c);
  SweepOptions options;
  options.betas = single_beta ? std::vector<double>{c.betas.front()} : c.betas;
  options.seeds = c.seeds;
  options.episodes_per_cell = c.episodes;
  options.max_steps = c.max_steps;
  options.workers = c.workers;
  const SweepResult r = run_sweep(ens.env, ens, planner_config(c), region_of(c), options);
  write_results_csv(r, fs::path(c.out) / "results.csv");
  write_aggregate_csv(r, fs::path(c.out) / "aggregate.csv");
  for (const auto& b : r.betas) {
    fmt::print("beta {}: return {:.2f} (std {:.2f}), cost {:.2f} (std {:.2f})\n", b.beta, b.mean_return,
               b.std_return, b.mean_cost, b.std_cost);
  }
}

void cmd_heatmap(const RunConfig& c) {
  const Ensemble ens = load_model_for(c);
  HeatmapGrid grid = HeatmapGrid::defaults(ens.env);
  grid.lo1 = c.heatmap_x[0];
  grid.hi1 = c.heatmap_x[1];
  grid.lo2 = c.heatmap_y[0];
  grid.hi2 = c.heatmap_y[1];
  grid.res1 = grid.res2 = c.heatmap_res;
  HeatmapOptions options;
  options.n_actions = c.heatmap_actions;
  options.particles = c.particles;
  options.seed = c.seed;
  const auto cells = uncertainty_heatmap(ens, grid, options);
  write_heatmap_csv(cells, fs::path(c.out) / "heatmap.csv");
  fmt::print("wrote {} heatmap cells\n", cells.size());
}

void cmd_trace(const RunConfig& c) {
  const Ensemble ens = load_model_for(c);
  CemConfig config = planner_config(c);
  config.beta = *std::max_element(c.betas.begin(), c.betas.end());
  const PlanResult r = plan_trace_experiment(ens, divide_state(region_of(c)), config, c.seed);
  write_trace_scores(r.trace, fs::path(c.out) / "trace_scores.csv");
  write_trace_states(r.trace, fs::path(c.out) / "trace_states.csv");
  for (std::size_t i = 0; i < r.trace.iterations.size(); ++i) {
    const auto& it = r.trace.iterations[i];
    double mean = 0.0;
    for (double w : it.omega) mean += w;
    fmt::print("iteration {}: mean omega {:.4g}, state spread {:.4g}\n", i, mean / static_cast<double>(it.omega.size()),
               it.state_spread);
  }
}

}  // namespace

int run(std::span<const std::string> args) {
  RunConfig config;
  CLI::App app{"Uncertainty-guided cross-entropy planning on a learned ensemble"};
  app.set_config("--config", "", "TOML config file; command-line flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  app.fallthrough();
  add_options(app, config);

  std::vector<std::string> argv(args.begin(), args.end());
  std::string chosen;
  for (const char* name : {"collect", "train", "eval", "sweep", "heatmap", "trace"}) {
    app.add_subcommand(name)->callback([&chosen, name] { chosen = name; });
  }
  app.get_subcommand("collect")->description("random interaction, region filter, save dataset");
  app.get_subcommand("train")->description("fit the ensemble; writes checkpoint and loss_history.csv");
  app.get_subcommand("eval")->description("episodes at the first beta; writes results/aggregate CSVs");
  app.get_subcommand("sweep")->description("episodes over the beta x seed grid");
  app.get_subcommand("heatmap")->description("one-step uncertainty over a state grid");
  app.get_subcommand("trace")->description("one recorded planning call from the region boundary");

  try {
    std::vector<std::string> reversed(argv.rbegin(), argv.rend() - (argv.empty() ? 0 : 1));
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kSuccess : kConfigError;
  }

  try {
    resolve(config);
    fs::create_directories(config.out);
    write_text(fs::path(config.out) / kEchoName, echo(config));
    if (chosen == "collect") cmd_collect(config);
    else if (chosen == "train") cmd_train(config);
    else if (chosen == "eval") cmd_sweep(config, true);
    else if (chosen == "sweep") cmd_sweep(config, false);
    else if (chosen == "heatmap") cmd_heatmap(config);
    else cmd_trace(config);
  } catch (const NumericalError& e) {
    spdlog::error("numerical failure: {}", e.what());
    return kNumericalFailure;
  } catch (const MissingInputError& e) {
    spdlog::error("missing input: {}", e.what());
    return kMissingInput;
  } catch (const FormatError& e) {
    spdlog::error("unreadable input: {}", e.what());
    return kMissingInput;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("filesystem: {}", e.what());
    return kMissingInput;
  } catch (const std::exception& e) {
    // ConfigError, DomainError, ShapeError, UnsupportedModeError and friends.
    spdlog::error("configuration error: {}", e.what());
    return kConfigError;
  }
  return kSuccess;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(std::span<const std::string>(args));
}

}  // namespace ugcem::cli
