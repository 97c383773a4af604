#pragma once

#include "ugcem/data.hpp"
#include "ugcem/ensemble.hpp"
#include "ugcem/env.hpp"

#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

namespace ugcem::testing {

/// Untrained ensemble with identity normalization; cheap to build.
inline Ensemble random_ensemble(EnvId env, int members, std::vector<int> hidden, std::uint64_t seed) {
  Ensemble e;
  e.env = env;
  e.obs_dim = observation_dim(env);
  e.act_dim = action_dim(env);
  const int in = e.obs_dim + e.act_dim;
  e.norm.mean = Eigen::VectorXd::Zero(in);
  e.norm.std = Eigen::VectorXd::Ones(in);
  std::mt19937_64 rng(seed);
  for (int m = 0; m < members; ++m) e.members.push_back(MlpParams::init(in, hidden, e.obs_dim, rng));
  return e;
}

/// Zeroes the last layer so every member predicts delta 0 and log-variance
/// bound_logvar(0) (or `logvar_raw` if given).
inline void zero_output(Ensemble& e, double logvar_raw = 0.0) {
  for (auto& m : e.members) {
    auto& last = m.layers.back();
    last.weight.setZero();
    last.bias.setZero();
    last.bias.tail(e.obs_dim).setConstant(logvar_raw);
  }
}

/// Small trained cartpole ensemble shared by several suites.
inline const Ensemble& small_cartpole_ensemble() {
  static const Ensemble ens = [] {
    const auto data = filter_region(collect_random(EnvId::cartpole, 2000, 7), RegionSpec::defaults(EnvId::cartpole));
    EnsembleConfig cfg;
    cfg.hidden = {16, 16};
    cfg.epochs = 5;
    return train_ensemble(data, cfg, 3).ensemble;
  }();
  return ens;
}

class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() / ("ugcem_test_" + name + "_" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& f) const { return path_ / f; }

 private:
  std::filesystem::path path_;
};

}  // namespace ugcem::testing
