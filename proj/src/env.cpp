#include "ugcem/env.hpp"

#include "ugcem/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace ugcem {

namespace {

constexpr double kPi = std::numbers::pi;

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) {
    throw DomainError(std::string("non-finite ") + what);
  }
}

void require_dim(EnvId id, Eigen::Index got) {
  if (got != observation_dim(id)) {
    throw ShapeError("observation dimension " + std::to_string(got) + " does not match " +
                     std::string(to_string(id)) + " (" + std::to_string(observation_dim(id)) + ")");
  }
}

}  // namespace

EnvId parse_env_id(std::string_view name) {
  if (name == "cartpole") return EnvId::cartpole;
  if (name == "pendulum") return EnvId::pendulum;
  throw ConfigError("unknown environment '" + std::string(name) + "'");
}

std::string_view to_string(EnvId id) {
  switch (id) {
    case EnvId::cartpole: return "cartpole";
    case EnvId::pendulum: return "pendulum";
  }
  return "?";
}

int observation_dim(EnvId id) { return id == EnvId::cartpole ? 4 : 3; }
int action_dim(EnvId) { return 1; }
double action_low(EnvId id) { return id == EnvId::cartpole ? -1.0 : -2.0; }
double action_high(EnvId id) { return id == EnvId::cartpole ? 1.0 : 2.0; }

double wrap_angle(double theta) {
  double y = std::fmod(kPi - theta, 2.0 * kPi);
  if (y < 0.0) y += 2.0 * kPi;
  return kPi - y;
}

bool cartpole_terminal(const CartpoleState& s, const CartpoleParams& p) {
  return std::abs(s.x) > p.x_limit || std::abs(s.theta) > p.theta_limit;
}

StepResult<CartpoleState> cartpole_step(const CartpoleState& s, double action, const CartpoleParams& p) {
  require_finite(s.x, "cart position");
  require_finite(s.x_dot, "cart velocity");
  require_finite(s.theta, "pole angle");
  require_finite(s.theta_dot, "pole angular velocity");
  require_finite(action, "action");

  const double force = p.force_scale * action;
  const double cos_t = std::cos(s.theta);
  const double sin_t = std::sin(s.theta);
  const double total_mass = p.cart_mass + p.pole_mass;
  const double pole_mass_length = p.pole_mass * p.half_length;

  const double temp = (force + pole_mass_length * s.theta_dot * s.theta_dot * sin_t) / total_mass;
  const double theta_acc = (p.gravity * sin_t - cos_t * temp) /
                           (p.half_length * (4.0 / 3.0 - p.pole_mass * cos_t * cos_t / total_mass));
  const double x_acc = temp - pole_mass_length * theta_acc * cos_t / total_mass;

  StepResult<CartpoleState> out;
  out.next.x = s.x + p.dt * s.x_dot;
  out.next.x_dot = s.x_dot + p.dt * x_acc;
  out.next.theta = s.theta + p.dt * s.theta_dot;
  out.next.theta_dot = s.theta_dot + p.dt * theta_acc;
  out.done = cartpole_terminal(out.next, p);
  out.reward = out.done ? 0.0 : 1.0;
  return out;
}

StepResult<PendulumState> pendulum_step(const PendulumState& s, double torque, const PendulumParams& p) {
  require_finite(s.theta, "pendulum angle");
  require_finite(s.theta_dot, "pendulum angular velocity");
  require_finite(torque, "torque");

  const double u = std::clamp(torque, -p.max_torque, p.max_torque);
  const double th = wrap_angle(s.theta);

  StepResult<PendulumState> out;
  out.reward = -(th * th + 0.1 * s.theta_dot * s.theta_dot + 0.001 * u * u);

  const double theta_acc = 3.0 * p.gravity / (2.0 * p.length) * std::sin(s.theta) +
                           3.0 / (p.mass * p.length * p.length) * u;
  const double theta_dot = std::clamp(s.theta_dot + theta_acc * p.dt, -p.max_speed, p.max_speed);
  out.next.theta_dot = theta_dot;
  out.next.theta = wrap_angle(s.theta + theta_dot * p.dt);
  out.done = false;
  return out;
}

Observation observe(const CartpoleState& s) {
  Observation o(4);
  o << s.x, s.x_dot, s.theta, s.theta_dot;
  return o;
}

Observation observe(const PendulumState& s) {
  Observation o(3);
  o << std::cos(s.theta), std::sin(s.theta), s.theta_dot;
  return o;
}

double analytic_reward(EnvId id, const Eigen::Ref<const Eigen::VectorXd>& obs,
                       const Eigen::Ref<const Eigen::VectorXd>& action) {
  require_dim(id, obs.size());
  if (id == EnvId::cartpole) {
    return is_terminal(id, obs) ? 0.0 : 1.0;
  }
  const PendulumParams p;
  const double th = std::atan2(obs[1], obs[0]);
  const double u = std::clamp(action[0], -p.max_torque, p.max_torque);
  return -(th * th + 0.1 * obs[2] * obs[2] + 0.001 * u * u);
}

double transition_reward(EnvId id, const Eigen::Ref<const Eigen::VectorXd>& obs,
                         const Eigen::Ref<const Eigen::VectorXd>& action,
                         const Eigen::Ref<const Eigen::VectorXd>& next_obs) {
  return id == EnvId::cartpole ? analytic_reward(id, next_obs, action) : analytic_reward(id, obs, action);
}

bool is_terminal(EnvId id, const Eigen::Ref<const Eigen::VectorXd>& obs) {
  if (id != EnvId::cartpole) return false;
  const CartpoleParams p;
  return std::abs(obs[0]) > p.x_limit || std::abs(obs[2]) > p.theta_limit;
}

RegionSpec RegionSpec::defaults(EnvId id) {
  RegionSpec r;
  r.env = id;
  return r;
}

bool in_forbidden_region(const Eigen::Ref<const Eigen::VectorXd>& obs, const RegionSpec& region) {
  require_dim(region.env, obs.size());
  if (region.env == EnvId::cartpole) {
    return obs[2] < region.threshold;
  }
  const double th = std::atan2(obs[1], obs[0]);
  return region.lo < th && th < region.hi;
}

Environment::Environment(EnvId id) : id_(id) {
  if (id == EnvId::cartpole) {
    state_ = CartpoleState{};
  } else {
    state_ = PendulumState{};
  }
}

Observation Environment::reset(std::mt19937_64& rng) {
  if (id_ == EnvId::cartpole) {
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    CartpoleState s;
    s.x = u(rng);
    s.x_dot = u(rng);
    s.theta = u(rng);
    s.theta_dot = u(rng);
    state_ = s;
  } else {
    std::uniform_real_distribution<double> angle(-kPi, kPi);
    std::uniform_real_distribution<double> speed(-1.0, 1.0);
    PendulumState s;
    s.theta = wrap_angle(angle(rng));
    s.theta_dot = speed(rng);
    state_ = s;
  }
  return observation();
}

Observation Environment::observation() const {
  return std::visit([](const auto& s) { return observe(s); }, state_);
}

EnvOutcome Environment::step(const Eigen::Ref<const Eigen::VectorXd>& action) {
  if (action.size() != action_dim(id_)) {
    throw ShapeError("action dimension mismatch");
  }
  EnvOutcome out;
  if (auto* cp = std::get_if<CartpoleState>(&state_)) {
    const double a = std::clamp(action[0], action_low(id_), action_high(id_));
    const auto r = cartpole_step(*cp, a);
    *cp = r.next;
    out.reward = r.reward;
    out.done = r.done;
  } else {
    auto& ps = std::get<PendulumState>(state_);
    const auto r = pendulum_step(ps, action[0]);
    ps = r.next;
    out.reward = r.reward;
    out.done = r.done;
  }
  out.obs = observation();
  return out;
}

}  // namespace ugcem
