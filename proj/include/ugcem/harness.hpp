#pragma once

#include "ugcem/ensemble.hpp"
#include "ugcem/env.hpp"
#include "ugcem/planner.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ugcem {

struct EpisodeStep {
  Observation obs;  // observation the action was chosen from
  Action action;
  double reward = 0.0;
};

struct EpisodeRecord {
  double ret = 0.0;
  /// Steps whose resulting observation lies in the forbidden region.
  int cost = 0;
  std::vector<EpisodeStep> trajectory;
  std::uint64_t seed = 0;
  int episode = 0;
  double beta = 0.0;

  int length() const { return static_cast<int>(trajectory.size()); }
};

struct EpisodeOptions {
  int max_steps = 200;
  /// The planner never sees the cost; disabling it only zeroes the tally.
  bool track_cost = true;
  int episode = 0;
};

/// Seed of episode `episode` within a run seeded by `run_seed`.
std::uint64_t episode_seed(std::uint64_t run_seed, int episode);

/// Seeded reset, then plan / act / observe until termination or max_steps.
EpisodeRecord run_episode(EnvId env, const Ensemble& ensemble, const CemConfig& config, const RegionSpec& region,
                          std::uint64_t seed, const EpisodeOptions& options = {});

struct SweepOptions {
  std::vector<double> betas{0.0, 0.5, 1.0, 2.0, 5.0};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int episodes_per_cell = 10;
  int max_steps = 200;
  int workers = 1;
};

/// Aggregates over the episodes of one (beta, seed) cell.
struct CellSummary {
  double beta = 0.0;
  std::uint64_t seed = 0;
  double mean_return = 0.0;
  double std_return = 0.0;
  double mean_cost = 0.0;
  double std_cost = 0.0;
};

/// Per-beta aggregates: means over every episode, standard deviations across
/// the per-seed cell means (run-to-run variability).
struct BetaSummary {
  double beta = 0.0;
  double mean_return = 0.0;
  double std_return = 0.0;
  double mean_cost = 0.0;
  double std_cost = 0.0;
};

struct SweepResult {
  EnvId env = EnvId::cartpole;
  std::vector<EpisodeRecord> records;  // ordered by (beta, seed, episode)
  std::vector<CellSummary> cells;
  std::vector<BetaSummary> betas;
};

/// Runs the full beta x seed x episode product; results do not depend on `workers`.
SweepResult run_sweep(EnvId env, const Ensemble& ensemble, const CemConfig& base, const RegionSpec& region,
                      const SweepOptions& options);

/// Recomputes cell and beta aggregates from raw records.
SweepResult summarize(EnvId env, std::vector<EpisodeRecord> records);

void write_results_csv(const SweepResult& sweep, const std::filesystem::path& path);
void write_aggregate_csv(const SweepResult& sweep, const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct HeatmapGrid {
  int dim1 = 0;
  int dim2 = 2;
  double lo1 = -0.25;
  double hi1 = 0.25;
  double lo2 = -0.42;
  double hi2 = 0.21;
  int res1 = 21;
  int res2 = 21;
  /// Values for the dimensions not swept.
  Observation base;
  /// Pendulum only: axis 1 is the angle theta and axis 2 is theta_dot; the
  /// observation is built as (cos, sin, theta_dot) and dim1/dim2 are ignored.
  bool pendulum_angle = false;

  static HeatmapGrid defaults(EnvId env);
};

struct HeatmapOptions {
  int n_actions = 200;
  int particles = 12;
  std::uint64_t seed = 0;
};

struct HeatmapCell {
  double v1 = 0.0;
  double v2 = 0.0;
  double omega = 0.0;
  /// Standard error of `omega` over the sampled actions.
  double omega_se = 0.0;
};

/// Mean one-step uncertainty per grid cell over n_actions standard-normal
/// actions (clamped), ts_inf propagation and an identity normalizer.
std::vector<HeatmapCell> uncertainty_heatmap(const Ensemble& ensemble, const HeatmapGrid& grid,
                                             const HeatmapOptions& options);

void write_heatmap_csv(const std::vector<HeatmapCell>& cells, const std::filesystem::path& path);

/// State on the boundary of the forbidden region (cartpole: theta at the
/// threshold, other dims 0; pendulum: theta at the wedge's upper edge, at rest).
Observation divide_state(const RegionSpec& region);

/// One recorded planning call from `start_obs` with a fresh normalizer.
PlanResult plan_trace_experiment(const Ensemble& ensemble, const Eigen::Ref<const Eigen::VectorXd>& start_obs,
                                 const CemConfig& config, std::uint64_t seed);

}  // namespace ugcem
