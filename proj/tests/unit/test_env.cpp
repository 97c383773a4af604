#include "ugcem/env.hpp"
#include "ugcem/errors.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

using namespace ugcem;

namespace {

constexpr double kPi = std::numbers::pi;

// Cartpole equations of motion written as the 2x2 linear system in (x_dd, th_dd)
// that falls out of the Lagrangian, then solved directly.
CartpoleState lagrangian_euler_step(const CartpoleState& s, double action) {
  const double M = 1.0, m = 0.1, l = 0.5, g = 9.8, dt = 0.02;
  const double F = 10.0 * action;
  Eigen::Matrix2d A;
  A << M + m, m * l * std::cos(s.theta),
       m * l * std::cos(s.theta), (4.0 / 3.0) * m * l * l;
  Eigen::Vector2d b(F + m * l * s.theta_dot * s.theta_dot * std::sin(s.theta), m * g * l * std::sin(s.theta));
  const Eigen::Vector2d acc = A.fullPivLu().solve(b);
  return {s.x + dt * s.x_dot, s.x_dot + dt * acc[0], s.theta + dt * s.theta_dot, s.theta_dot + dt * acc[1]};
}

double pendulum_energy(const PendulumState& s) { return 0.5 * s.theta_dot * s.theta_dot + 15.0 * std::cos(s.theta); }

}  // namespace

TEST_SUITE("env") {

TEST_CASE("cartpole upright equilibrium is a fixed point") {
  const auto r = cartpole_step({0, 0, 0, 0}, 0.0);
  CHECK(r.next == CartpoleState{0, 0, 0, 0});
  CHECK(r.reward == 1.0);
  CHECK_FALSE(r.done);
}

TEST_CASE("cartpole beyond the angle limit terminates with zero reward") {
  const auto r = cartpole_step({0, 0, 0.25, 0}, 0.0);
  CHECK(r.done);
  CHECK(r.reward == 0.0);
}

TEST_CASE("cartpole step matches the Lagrangian system solution") {
  const CartpoleState s{0, 0, 0.05, 0};
  const auto got = cartpole_step(s, 1.0).next;
  const auto want = lagrangian_euler_step(s, 1.0);
  CHECK(std::abs(got.x - want.x) < 1e-12);
  CHECK(std::abs(got.x_dot - want.x_dot) < 1e-12);
  CHECK(std::abs(got.theta - want.theta) < 1e-12);
  CHECK(std::abs(got.theta_dot - want.theta_dot) < 1e-12);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const CartpoleState r{u(rng), u(rng), 0.3 * u(rng), 2.0 * u(rng)};
    const double a = u(rng);
    const auto g = cartpole_step(r, a).next;
    const auto w = lagrangian_euler_step(r, a);
    REQUIRE(std::abs(g.x_dot - w.x_dot) < 1e-12);
    REQUIRE(std::abs(g.theta_dot - w.theta_dot) < 1e-12);
  }
}

TEST_CASE("cartpole rejects non-finite input") {
  CHECK_THROWS_AS(cartpole_step({0, 0, std::nan(""), 0}, 0.0), DomainError);
  CHECK_THROWS_AS(cartpole_step({0, 0, 0, 0}, std::numeric_limits<double>::infinity()), DomainError);
}

TEST_CASE("pendulum upright equilibrium has zero cost") {
  const auto r = pendulum_step({0, 0}, 0.0);
  CHECK(r.next == PendulumState{0, 0});
  CHECK(r.reward == 0.0);
  CHECK_FALSE(r.done);
}

TEST_CASE("pendulum hanging down costs pi squared") {
  CHECK(pendulum_step({kPi, 0}, 0.0).reward == doctest::Approx(-kPi * kPi).epsilon(1e-15));
}

TEST_CASE("pendulum step matches hand integration") {
  // theta_dd = 15 sin(0.1) + 3 * 2; theta_dot' = 0.05 * theta_dd; theta' = 0.1 + 0.05 * theta_dot'
  const double th_dd = 15.0 * std::sin(0.1) + 6.0;
  const double th_dot = 0.05 * th_dd;
  const double th = 0.1 + 0.05 * th_dot;
  const auto r = pendulum_step({0.1, 0.0}, 2.0);
  CHECK(std::abs(r.next.theta_dot - th_dot) < 1e-12);
  CHECK(std::abs(r.next.theta - th) < 1e-12);
  CHECK(r.reward == doctest::Approx(-(0.01 + 0.001 * 4.0)).epsilon(1e-15));
}

TEST_CASE("pendulum clamps torque and speed, wraps the angle") {
  CHECK(pendulum_step({0.3, 0.0}, 50.0).next == pendulum_step({0.3, 0.0}, 2.0).next);
  CHECK(pendulum_step({1.5, 7.9}, 2.0).next.theta_dot == 8.0);
  const auto r = pendulum_step({kPi - 0.01, 5.0}, 0.0);
  CHECK(r.next.theta < 0.0);
  CHECK(r.next.theta > -kPi);
  CHECK(wrap_angle(-kPi) == kPi);
  CHECK(wrap_angle(3 * kPi) == doctest::Approx(kPi));
}

TEST_CASE("pendulum energy is conserved for small steps") {
  PendulumParams p;
  p.dt = 0.001;
  PendulumState s{2.0, 0.0};
  for (int i = 0; i < 2000; ++i) {
    const auto next = pendulum_step(s, 0.0, p).next;
    REQUIRE(std::abs(pendulum_energy(next) - pendulum_energy(s)) < 1e-3);
    s = next;
  }
}

TEST_CASE("analytic reward examples") {
  const Eigen::VectorXd a = Eigen::VectorXd::Constant(1, 0.7);
  CHECK(analytic_reward(EnvId::cartpole, Eigen::Vector4d(0, 0, 0, 0), a) == 1.0);
  CHECK(analytic_reward(EnvId::cartpole, Eigen::Vector4d(3.0, 0, 0, 0), a) == 0.0);
  CHECK(analytic_reward(EnvId::pendulum, Eigen::Vector3d(1, 0, 0), Eigen::VectorXd::Zero(1)) == 0.0);
  CHECK_THROWS_AS(analytic_reward(EnvId::pendulum, Eigen::Vector4d(0, 0, 0, 0), a), ShapeError);
}

TEST_CASE("transition reward equals the simulator reward on random draws") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 10000; ++i) {
    const CartpoleState cs{2.6 * u(rng), 2.0 * u(rng), 0.25 * u(rng), 2.0 * u(rng)};
    const double ca = u(rng);
    const auto cr = cartpole_step(cs, ca);
    const Eigen::VectorXd act = Eigen::VectorXd::Constant(1, ca);
    REQUIRE(transition_reward(EnvId::cartpole, observe(cs), act, observe(cr.next)) == cr.reward);
    REQUIRE(is_terminal(EnvId::cartpole, observe(cr.next)) == cr.done);

    const PendulumState ps{kPi * u(rng), 8.0 * u(rng)};
    const double pa = 3.0 * u(rng);
    const auto pr = pendulum_step(ps, pa);
    const Eigen::VectorXd pact = Eigen::VectorXd::Constant(1, pa);
    REQUIRE(transition_reward(EnvId::pendulum, observe(ps), pact, observe(pr.next)) ==
            doctest::Approx(pr.reward).epsilon(1e-12));
  }
}

TEST_CASE("forbidden region predicate") {
  const auto cart = RegionSpec::defaults(EnvId::cartpole);
  CHECK(in_forbidden_region(Eigen::Vector4d(0, 0, -0.2, 0), cart));
  CHECK_FALSE(in_forbidden_region(Eigen::Vector4d(0, 0, 0, 0), cart));
  CHECK_FALSE(in_forbidden_region(Eigen::Vector4d(0, 0, -0.105, 0), cart));
  const auto pend = RegionSpec::defaults(EnvId::pendulum);
  CHECK(in_forbidden_region(observe(PendulumState{-kPi / 2, 0}), pend));
  CHECK_FALSE(in_forbidden_region(observe(PendulumState{kPi / 2, 0}), pend));
  CHECK_FALSE(in_forbidden_region(observe(PendulumState{0, 0}), pend));
  CHECK(pend.lo == doctest::Approx(-0.75 * kPi));
  CHECK(pend.hi == doctest::Approx(-0.25 * kPi));
}

TEST_CASE("pendulum observations lie on the unit circle") {
  std::mt19937_64 rng(3);
  Environment env(EnvId::pendulum);
  env.reset(rng);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int i = 0; i < 500; ++i) {
    const auto o = env.step(Eigen::VectorXd::Constant(1, u(rng))).obs;
    REQUIRE(std::abs(o[0] * o[0] + o[1] * o[1] - 1.0) < 1e-9);
  }
}

TEST_CASE("environment is deterministic") {
  std::mt19937_64 r1(5), r2(5);
  Environment a(EnvId::cartpole), b(EnvId::cartpole);
  CHECK(a.reset(r1) == b.reset(r2));
  for (int i = 0; i < 20; ++i) {
    const Eigen::VectorXd act = Eigen::VectorXd::Constant(1, std::sin(i));
    const auto oa = a.step(act);
    const auto ob = b.step(act);
    REQUIRE(oa.obs == ob.obs);
    REQUIRE(oa.reward == ob.reward);
  }
  const auto o = a.observation();
  CHECK((o.array().abs() < 1.0).all());
}

TEST_CASE("environment ids round trip") {
  CHECK(parse_env_id("pendulum") == EnvId::pendulum);
  CHECK(to_string(EnvId::cartpole) == "cartpole");
  CHECK_THROWS_AS(parse_env_id("acrobot"), ConfigError);
}

}
