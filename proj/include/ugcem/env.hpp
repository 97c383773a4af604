#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <variant>

namespace ugcem {

using Observation = Eigen::VectorXd;
using Action = Eigen::VectorXd;

enum class EnvId { cartpole, pendulum };

EnvId parse_env_id(std::string_view name);
std::string_view to_string(EnvId id);

int observation_dim(EnvId id);
int action_dim(EnvId id);
double action_low(EnvId id);
double action_high(EnvId id);

// ---------------------------------------------------------------------------
// Cartpole (continuous force, classic Euler-integrated dynamics).

struct CartpoleParams {
  double gravity = 9.8;
  double cart_mass = 1.0;
  double pole_mass = 0.1;
  double half_length = 0.5;
  double force_scale = 10.0;
  double dt = 0.02;
  double x_limit = 2.4;
  double theta_limit = 0.2095;
};

struct CartpoleState {
  double x = 0.0;
  double x_dot = 0.0;
  double theta = 0.0;  // 0 = upright
  double theta_dot = 0.0;

  friend bool operator==(const CartpoleState&, const CartpoleState&) = default;
};

// ---------------------------------------------------------------------------
// Pendulum swing-up.

struct PendulumParams {
  double gravity = 10.0;
  double mass = 1.0;
  double length = 1.0;
  double dt = 0.05;
  double max_speed = 8.0;
  double max_torque = 2.0;
};

struct PendulumState {
  double theta = 0.0;  // wrapped to (-pi, pi], 0 = upright
  double theta_dot = 0.0;

  friend bool operator==(const PendulumState&, const PendulumState&) = default;
};

template <typename State>
struct StepResult {
  State next;
  double reward = 0.0;
  bool done = false;
};

/// Maps an angle onto (-pi, pi].
double wrap_angle(double theta);

/// One Euler step. `action` is expected in [-1, 1]; throws DomainError on
/// non-finite input.
StepResult<CartpoleState> cartpole_step(const CartpoleState& state, double action,
                                        const CartpoleParams& params = {});

/// One semi-implicit Euler step; torque is clamped to +-max_torque.
StepResult<PendulumState> pendulum_step(const PendulumState& state, double torque,
                                        const PendulumParams& params = {});

bool cartpole_terminal(const CartpoleState& s, const CartpoleParams& params = {});

Observation observe(const CartpoleState& s);
Observation observe(const PendulumState& s);

// ---------------------------------------------------------------------------
// Rewards and termination evaluated from observations only.

/// Reward evaluated at a single observation. For cartpole `obs` is the state
/// reached by the transition (1 when inside the bounds, else 0); for pendulum
/// it is the state the action was applied in.
double analytic_reward(EnvId id, const Eigen::Ref<const Eigen::VectorXd>& obs,
                       const Eigen::Ref<const Eigen::VectorXd>& action);

/// Reward of the transition obs --action--> next_obs; equals the reward the
/// true environment step assigns.
double transition_reward(EnvId id, const Eigen::Ref<const Eigen::VectorXd>& obs,
                         const Eigen::Ref<const Eigen::VectorXd>& action,
                         const Eigen::Ref<const Eigen::VectorXd>& next_obs);

/// Termination predicate on an observation (always false for pendulum).
bool is_terminal(EnvId id, const Eigen::Ref<const Eigen::VectorXd>& obs);

// ---------------------------------------------------------------------------
// Out-of-distribution region.

struct RegionSpec {
  EnvId env = EnvId::cartpole;
  double threshold = -0.105;                    // cartpole: theta < threshold
  double lo = -0.75 * std::numbers::pi;         // pendulum wedge lower bound
  double hi = -0.25 * std::numbers::pi;         // pendulum wedge upper bound

  static RegionSpec defaults(EnvId id);
};

bool in_forbidden_region(const Eigen::Ref<const Eigen::VectorXd>& obs, const RegionSpec& region);

// ---------------------------------------------------------------------------
// Stateful wrapper used by data collection and the episode runner.

struct EnvOutcome {
  Observation obs;
  double reward = 0.0;
  bool done = false;
};

class Environment {
 public:
  explicit Environment(EnvId id);

  EnvId id() const { return id_; }

  /// cartpole: uniform in [-0.05, 0.05]^4; pendulum: theta ~ U[-pi, pi], theta_dot ~ U[-1, 1].
  Observation reset(std::mt19937_64& rng);
  Observation observation() const;
  EnvOutcome step(const Eigen::Ref<const Eigen::VectorXd>& action);

  void set_state(const CartpoleState& s) { state_ = s; }
  void set_state(const PendulumState& s) { state_ = s; }

 private:
  EnvId id_;
  std::variant<CartpoleState, PendulumState> state_;
};

}  // namespace ugcem
