#pragma once

#include "ugcem/ensemble.hpp"
#include "ugcem/env.hpp"
#include "ugcem/rng.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string_view>
#include <vector>

namespace ugcem {

/// Particle propagation: member fixed per particle (ts_inf) or redrawn every step (ts_1).
enum class Propagation { ts_inf, ts_1 };

/// Which variance feeds the penalty: all particles (total) or the spread of
/// per-member particle means (epistemic).
enum class UncertaintyKind { total, epistemic };

Propagation parse_propagation(std::string_view name);
std::string_view to_string(Propagation p);
UncertaintyKind parse_uncertainty_kind(std::string_view name);
std::string_view to_string(UncertaintyKind k);

struct CemConfig {
  int horizon = 10;
  int iterations = 5;
  double elite_ratio = 0.3;
  int population = 200;
  int particles = 12;
  double alpha = 0.1;  // weight kept on the previous distribution
  double beta = 0.0;   // uncertainty penalty; 0 recovers plain PETS scoring
  Propagation propagation = Propagation::ts_inf;
  UncertaintyKind uncertainty = UncertaintyKind::total;
  Eigen::VectorXd action_low = Eigen::VectorXd::Constant(1, -1.0);
  Eigen::VectorXd action_high = Eigen::VectorXd::Constant(1, 1.0);

  static CemConfig defaults(EnvId env);

  int action_dim() const { return static_cast<int>(action_low.size()); }
  /// round(elite_ratio * population)
  int elite_count() const;
  /// Throws ConfigError when an invariant is violated.
  void validate() const;
};

/// Per-timestep diagonal Gaussian over actions; both matrices are H x act_dim.
struct PlanningDistribution {
  Eigen::MatrixXd mean;
  Eigen::MatrixXd var;

  /// Mid-range mean and ((high - low) / 4)^2 variance.
  static PlanningDistribution initial(const CemConfig& config);
  /// Mean advanced one step with the freed last step at mid-range; variance
  /// reset to the initial value.
  PlanningDistribution shifted(const CemConfig& config) const;
};

using ActionSequence = Eigen::MatrixXd;  // H x act_dim
using ActionPopulation = std::vector<ActionSequence>;

/// Candidate n uses stream n of `rng`; samples are clamped to the bounds.
ActionPopulation sample_population(const PlanningDistribution& dist, int population, const Eigen::VectorXd& low,
                                   const Eigen::VectorXd& high, const CounterRng& rng);

class MemberAssignment {
 public:
  MemberAssignment() = default;
  MemberAssignment(Propagation mode, int population, int particles, int horizon, std::vector<int> index);

  Propagation mode() const { return mode_; }
  int population() const { return population_; }
  int particles() const { return particles_; }
  int horizon() const { return horizon_; }

  /// Member propagating particle p of candidate n at step t (t ignored for ts_inf).
  int operator()(int n, int p, int t = 0) const;

 private:
  Propagation mode_ = Propagation::ts_inf;
  int population_ = 0;
  int particles_ = 0;
  int horizon_ = 0;
  std::vector<int> index_;
};

/// ts_inf: particle p of candidate n gets member perm_n[p] mod B with perm_n a
/// seeded shuffle of 0..P-1. ts_1: an independent uniform member per (n, p, t).
MemberAssignment assign_members(int population, int particles, int members, Propagation mode, int horizon,
                                const CounterRng& rng);

/// States of one candidate's particles, P x (H + 1) x dim(S).
class ParticleStates {
 public:
  ParticleStates() = default;
  ParticleStates(int particles, int steps, int dim)
      : particles_(particles), steps_(steps), dim_(dim),
        data_(static_cast<std::size_t>(particles) * static_cast<std::size_t>(steps) * static_cast<std::size_t>(dim)) {}

  int particles() const { return particles_; }
  int steps() const { return steps_; }  // H + 1
  int dim() const { return dim_; }

  double& operator()(int p, int t, int s) { return data_[offset(p, t, s)]; }
  double operator()(int p, int t, int s) const { return data_[offset(p, t, s)]; }

  Eigen::Map<Eigen::VectorXd> state(int p, int t) { return {&data_[offset(p, t, 0)], dim_}; }
  Eigen::Map<const Eigen::VectorXd> state(int p, int t) const { return {&data_[offset(p, t, 0)], dim_}; }

 private:
  std::size_t offset(int p, int t, int s) const {
    return (static_cast<std::size_t>(p) * static_cast<std::size_t>(steps_) + static_cast<std::size_t>(t)) *
               static_cast<std::size_t>(dim_) +
           static_cast<std::size_t>(s);
  }

  int particles_ = 0;
  int steps_ = 0;
  int dim_ = 0;
  std::vector<double> data_;
};

struct RolloutTensor {
  std::vector<ParticleStates> states;        // one per candidate
  std::vector<Eigen::MatrixXd> rewards;      // one P x H matrix per candidate
  std::vector<std::vector<bool>> done;       // per candidate, P * (H + 1), absorbing along t
  std::vector<bool> flagged;                 // candidate hit a non-finite model output
  MemberAssignment members;

  bool is_done(int n, int p, int t) const {
    return done[static_cast<std::size_t>(n)][static_cast<std::size_t>(p * states[static_cast<std::size_t>(n)].steps() + t)];
  }
};

/// Propagates config.particles copies of start_obs through every candidate.
/// Particles freeze (zero reward, state held) once the termination predicate
/// fires or the model emits a non-finite value; the latter also flags the
/// candidate. Noise for (n, p, t) comes from its own counter stream.
RolloutTensor rollout(const Ensemble& ensemble, const Eigen::Ref<const Eigen::VectorXd>& start_obs,
                      const ActionPopulation& actions, const CemConfig& config, const CounterRng& rng);

/// Running table of mean particle variance per (state dim, rollout step),
/// used to put every step of the horizon on the same scale.
class VarianceNormalizer {
 public:
  static constexpr double kDefaultDecay = 0.99;
  static constexpr double kDefaultFloor = 1e-8;

  VarianceNormalizer(int dim, int horizon, double decay = kDefaultDecay, double floor = kDefaultFloor);

  int dim() const { return static_cast<int>(table_.rows()); }
  int horizon() const { return static_cast<int>(table_.cols()); }
  double decay() const { return decay_; }
  double floor() const { return floor_; }
  long updates() const { return updates_; }
  /// True once the table came from an update or set_table rather than the
  /// all-ones placeholder.
  bool calibrated() const { return updates_ > 0 || table_set_; }
  /// dim x horizon; all ones until the first update.
  const Eigen::MatrixXd& table() const { return table_; }
  /// Overrides the table (floored); does not count as an update.
  void set_table(const Eigen::Ref<const Eigen::MatrixXd>& table);

  /// First call: table = batch mean. Later calls: EMA with `decay`. Floored.
  void update(const std::vector<Eigen::MatrixXd>& sigma2_batch);

 private:
  Eigen::MatrixXd table_;
  double decay_;
  double floor_;
  long updates_ = 0;
  bool table_set_ = false;
};

VarianceNormalizer update_normalizer(VarianceNormalizer normalizer, const std::vector<Eigen::MatrixXd>& sigma2_batch);

/// (1/P) population variance over particles for t = 1..H; dim(S) x H.
Eigen::MatrixXd particle_variance(const ParticleStates& states);

/// Variance (1/G) across the means of the G non-empty member groups; dim(S) x H.
/// Throws UnsupportedModeError for ts_1 assignments.
Eigen::MatrixXd epistemic_variance(const ParticleStates& states, const MemberAssignment& members, int candidate);

/// Mean over dims and steps of sigma2 / normalizer.
double uncertainty(const Eigen::Ref<const Eigen::MatrixXd>& sigma2, const VarianceNormalizer& normalizer);

double uncertainty_decomposed(const ParticleStates& states, const MemberAssignment& members, int candidate,
                              const VarianceNormalizer& normalizer);

/// Particle-mean return minus beta * omega.
double penalized_return(const Eigen::Ref<const Eigen::MatrixXd>& rewards, double omega, double beta);

/// Score assigned to flagged candidates; ranks below every finite score.
inline constexpr double kFlaggedScore = std::numeric_limits<double>::lowest();

/// Indices of the `count` best scores, ties broken by lower index, best first.
std::vector<int> select_elites(const std::vector<double>& scores, int count);

/// Refits the distribution to the elite set with momentum alpha on the old
/// distribution. Returns `dist` unchanged when every candidate is flagged.
PlanningDistribution cem_iteration(const PlanningDistribution& dist, const ActionPopulation& actions,
                                   const std::vector<double>& scores, const CemConfig& config);

struct IterationTrace {
  PlanningDistribution dist;  // distribution the population was drawn from
  std::vector<double> omega;
  std::vector<double> mean_return;
  std::vector<double> penalized;
  std::vector<int> elites;
  /// Mean over state dims of the variance of all visited rollout states (t >= 1).
  double state_spread = 0.0;
  std::optional<RolloutTensor> rollout;
};

struct PlanTrace {
  std::vector<IterationTrace> iterations;
};

struct PlanOptions {
  bool record_rollouts = false;
};

struct PlanResult {
  Eigen::VectorXd action;
  PlanningDistribution dist;
  PlanTrace trace;
};

/// Runs config.iterations CEM iterations from start_obs and folds this call's
/// variances into `normalizer` once all candidates are scored. An uncalibrated
/// normalizer is not used for scoring: the call scores against a table
/// initialized from its first iteration's variances instead.
PlanResult plan(const Ensemble& ensemble, const Eigen::Ref<const Eigen::VectorXd>& start_obs, const CemConfig& config,
                VarianceNormalizer& normalizer, const CounterRng& rng,
                const std::optional<PlanningDistribution>& warm_start = std::nullopt, const PlanOptions& options = {});

/// Receding-horizon controller: owns the normalizer and warm start across steps.
class MpcController {
 public:
  MpcController(const Ensemble& ensemble, CemConfig config);

  Eigen::VectorXd act(const Eigen::Ref<const Eigen::VectorXd>& obs, const CounterRng& rng);
  void reset();

  const CemConfig& config() const { return config_; }
  const VarianceNormalizer& normalizer() const { return normalizer_; }

 private:
  const Ensemble* ensemble_;
  CemConfig config_;
  VarianceNormalizer normalizer_;
  std::optional<PlanningDistribution> previous_;
};

void write_trace_scores(const PlanTrace& trace, const std::filesystem::path& path);
/// Requires rollouts recorded via PlanOptions::record_rollouts.
void write_trace_states(const PlanTrace& trace, const std::filesystem::path& path);

}  // namespace ugcem
