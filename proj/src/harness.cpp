#include "ugcem/harness.hpp"

#include "ugcem/data.hpp"
#include "ugcem/errors.hpp"
#include "ugcem/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <thread>

namespace ugcem {

namespace {

enum : std::uint64_t { kEpisodeTag = 101, kResetTag = 102, kPlanTag = 103, kHeatmapTag = 104 };

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MissingInputError("cannot open '" + path.string() + "' for writing");
  return out;
}

}  // namespace

std::uint64_t episode_seed(std::uint64_t run_seed, int episode) {
  return CounterRng(run_seed).stream(kEpisodeTag, static_cast<std::uint64_t>(episode))();
}

EpisodeRecord run_episode(EnvId env_id, const Ensemble& ensemble, const CemConfig& config, const RegionSpec& region,
                          std::uint64_t seed, const EpisodeOptions& options) {
  if (ensemble.env != env_id) throw ConfigError("ensemble was trained for a different environment");
  const CounterRng rng(seed);
  std::mt19937_64 reset_rng(rng.stream(kResetTag)());
  const CounterRng plan_rng = rng.derive(kPlanTag);

  Environment env(env_id);
  Observation obs = env.reset(reset_rng);
  MpcController controller(ensemble, config);

  EpisodeRecord record;
  record.seed = seed;
  record.episode = options.episode;
  record.beta = config.beta;
  for (int step = 0; step < options.max_steps; ++step) {
    const Action action = controller.act(obs, plan_rng.derive(static_cast<std::uint64_t>(step)));
    EnvOutcome out = env.step(action);
    record.trajectory.push_back({obs, action, out.reward});
    record.ret += out.reward;
    if (options.track_cost && in_forbidden_region(out.obs, region)) ++record.cost;
    obs = std::move(out.obs);
    if (out.done) break;
  }
  return record;
}

SweepResult summarize(EnvId env, std::vector<EpisodeRecord> records) {
  SweepResult result;
  result.env = env;
  result.records = std::move(records);

  // Preserve first-appearance order of betas and of seeds within each beta.
  std::vector<double> beta_order;
  std::map<double, std::vector<std::uint64_t>> seed_order;
  std::map<std::pair<double, std::uint64_t>, std::vector<const EpisodeRecord*>> cells;
  for (const auto& r : result.records) {
    if (std::find(beta_order.begin(), beta_order.end(), r.beta) == beta_order.end()) beta_order.push_back(r.beta);
    auto& seeds = seed_order[r.beta];
    if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
    cells[{r.beta, r.seed}].push_back(&r);
  }

  for (double beta : beta_order) {
    std::vector<double> seed_returns;
    std::vector<double> seed_costs;
    std::vector<double> all_returns;
    std::vector<double> all_costs;
    for (std::uint64_t seed : seed_order[beta]) {
      std::vector<double> rets;
      std::vector<double> costs;
      for (const auto* r : cells[{beta, seed}]) {
        rets.push_back(r->ret);
        costs.push_back(r->cost);
      }
      CellSummary c{beta, seed, mean_of(rets), std_of(rets), mean_of(costs), std_of(costs)};
      result.cells.push_back(c);
      seed_returns.push_back(c.mean_return);
      seed_costs.push_back(c.mean_cost);
      all_returns.insert(all_returns.end(), rets.begin(), rets.end());
      all_costs.insert(all_costs.end(), costs.begin(), costs.end());
    }
    result.betas.push_back({beta, mean_of(all_returns), std_of(seed_returns), mean_of(all_costs), std_of(seed_costs)});
  }
  return result;
}

SweepResult run_sweep(EnvId env, const Ensemble& ensemble, const CemConfig& base, const RegionSpec& region,
                      const SweepOptions& options) {
  if (options.betas.empty() || options.seeds.empty()) throw ConfigError("sweep needs at least one beta and one seed");
  if (options.episodes_per_cell < 1) throw ConfigError("episodes_per_cell must be >= 1");

  struct Task {
    double beta;
    std::uint64_t seed;
    int episode;
  };
  std::vector<Task> tasks;
  for (double beta : options.betas) {
    for (std::uint64_t seed : options.seeds) {
      for (int e = 0; e < options.episodes_per_cell; ++e) tasks.push_back({beta, seed, e});
    }
  }

  std::vector<EpisodeRecord> records(tasks.size());
  std::vector<std::exception_ptr> errors(tasks.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      const Task& task = tasks[i];
      try {
        CemConfig config = base;
        config.beta = task.beta;
        EpisodeOptions eo;
        eo.max_steps = options.max_steps;
        eo.episode = task.episode;
        EpisodeRecord r = run_episode(env, ensemble, config, region, episode_seed(task.seed, task.episode), eo);
        r.seed = task.seed;
        records[i] = std::move(r);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n_threads = std::clamp(options.workers, 1, static_cast<int>(tasks.size()));
  if (n_threads == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(work);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return summarize(env, std::move(records));
}

void write_results_csv(const SweepResult& sweep, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "env,beta,seed,episode,return,cost\n";
  for (const auto& r : sweep.records) {
    out << to_string(sweep.env) << ',' << format_real(r.beta) << ',' << r.seed << ',' << r.episode << ','
        << format_real(r.ret) << ',' << r.cost << '\n';
  }
}

void write_aggregate_csv(const SweepResult& sweep, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "env,beta,mean_return,std_return,mean_cost,std_cost\n";
  for (const auto& b : sweep.betas) {
    out << to_string(sweep.env) << ',' << format_real(b.beta) << ',' << format_real(b.mean_return) << ','
        << format_real(b.std_return) << ',' << format_real(b.mean_cost) << ',' << format_real(b.std_cost) << '\n';
  }
}

// ---------------------------------------------------------------------------

HeatmapGrid HeatmapGrid::defaults(EnvId env) {
  HeatmapGrid g;
  if (env == EnvId::cartpole) {
    g.dim1 = 0;  // x
    g.dim2 = 2;  // theta
    // Covers the filtered data's x range and its theta range up to the
    // termination limit, plus an equally wide band below the threshold.
    g.lo1 = -0.25;
    g.hi1 = 0.25;
    g.lo2 = -0.42;
    g.hi2 = 0.21;
  } else {
    g.pendulum_angle = true;
    g.lo1 = -std::numbers::pi;
    g.hi1 = std::numbers::pi;
    g.lo2 = -8.0;
    g.hi2 = 8.0;
  }
  g.base = Observation::Zero(observation_dim(env));
  return g;
}

namespace {

double grid_value(double lo, double hi, int res, int i) {
  if (res <= 1) return 0.5 * (lo + hi);
  return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(res - 1);
}

}  // namespace

std::vector<HeatmapCell> uncertainty_heatmap(const Ensemble& ensemble, const HeatmapGrid& grid,
                                             const HeatmapOptions& options) {
  const int dim = ensemble.obs_dim;
  if (grid.base.size() != dim) throw ShapeError("heatmap base observation dimension mismatch");
  if (grid.pendulum_angle && ensemble.env != EnvId::pendulum) {
    throw ConfigError("angle coordinates are only defined for pendulum");
  }
  if (!grid.pendulum_angle &&
      (grid.dim1 < 0 || grid.dim1 >= dim || grid.dim2 < 0 || grid.dim2 >= dim || grid.dim1 == grid.dim2)) {
    throw ConfigError("heatmap dimensions must be two distinct state dimensions");
  }
  if (grid.res1 < 1 || grid.res2 < 1 || options.n_actions < 1) throw ConfigError("heatmap sizes must be positive");

  CemConfig config = CemConfig::defaults(ensemble.env);
  config.horizon = 1;
  config.particles = options.particles;
  config.population = options.n_actions;
  config.propagation = Propagation::ts_inf;

  PlanningDistribution standard;
  standard.mean = Eigen::MatrixXd::Zero(1, ensemble.act_dim);
  standard.var = Eigen::MatrixXd::Ones(1, ensemble.act_dim);
  const VarianceNormalizer identity(dim, 1);
  const CounterRng rng = CounterRng(options.seed).derive(kHeatmapTag);

  std::vector<HeatmapCell> cells;
  for (int i = 0; i < grid.res1; ++i) {
    for (int j = 0; j < grid.res2; ++j) {
      HeatmapCell cell;
      cell.v1 = grid_value(grid.lo1, grid.hi1, grid.res1, i);
      cell.v2 = grid_value(grid.lo2, grid.hi2, grid.res2, j);
      Observation obs = grid.base;
      if (grid.pendulum_angle) {
        obs = observe(PendulumState{wrap_angle(cell.v1), cell.v2});
      } else {
        obs[grid.dim1] = cell.v1;
        obs[grid.dim2] = cell.v2;
      }

      const CounterRng cell_rng = rng.derive(static_cast<std::uint64_t>(i) * 1000003ULL + static_cast<std::uint64_t>(j));
      const auto actions =
          sample_population(standard, options.n_actions, config.action_low, config.action_high, cell_rng.derive(1));
      const RolloutTensor r = rollout(ensemble, obs, actions, config, cell_rng.derive(2));
      std::vector<double> omegas;
      omegas.reserve(actions.size());
      for (std::size_t n = 0; n < actions.size(); ++n) {
        if (r.flagged[n]) continue;
        omegas.push_back(uncertainty(particle_variance(r.states[n]), identity));
      }
      cell.omega = mean_of(omegas);
      cell.omega_se = omegas.empty() ? 0.0 : std_of(omegas) / std::sqrt(static_cast<double>(omegas.size()));
      cells.push_back(cell);
    }
  }
  return cells;
}

void write_heatmap_csv(const std::vector<HeatmapCell>& cells, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "dim1,dim2,omega\n";
  for (const auto& c : cells) {
    out << format_real(c.v1) << ',' << format_real(c.v2) << ',' << format_real(c.omega) << '\n';
  }
}

Observation divide_state(const RegionSpec& region) {
  if (region.env == EnvId::cartpole) {
    return observe(CartpoleState{0.0, 0.0, region.threshold, 0.0});
  }
  return observe(PendulumState{region.hi, 0.0});
}

PlanResult plan_trace_experiment(const Ensemble& ensemble, const Eigen::Ref<const Eigen::VectorXd>& start_obs,
                                 const CemConfig& config, std::uint64_t seed) {
  VarianceNormalizer normalizer(ensemble.obs_dim, config.horizon);
  PlanOptions options;
  options.record_rollouts = true;
  return plan(ensemble, start_obs, config, normalizer, CounterRng(seed).derive(kPlanTag), std::nullopt, options);
}

}  // namespace ugcem
