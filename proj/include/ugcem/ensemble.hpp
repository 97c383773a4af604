#pragma once

#include "ugcem/data.hpp"
#include "ugcem/env.hpp"
#include "ugcem/nn.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

namespace ugcem {

struct EnsembleConfig {
  int members = 4;
  std::vector<int> hidden{200, 200, 200};
  int epochs = 50;
  int batch_size = 32;
  AdamConfig adam;
  LogVarBounds bounds;
};

/// B probabilistic dynamics models predicting state deltas, sharing one set
/// of input normalization statistics.
struct Ensemble {
  EnvId env = EnvId::cartpole;
  int obs_dim = 0;
  int act_dim = 0;
  NormStats norm;
  std::vector<MlpParams> members;

  int size() const { return static_cast<int>(members.size()); }

  friend bool operator==(const Ensemble& a, const Ensemble& b) {
    return a.env == b.env && a.obs_dim == b.obs_dim && a.act_dim == b.act_dim && a.norm == b.norm &&
           a.members == b.members;
  }
};

struct TrainResult {
  Ensemble ensemble;
  /// loss_history[m][e]: mean training NLL of member m during epoch e.
  std::vector<std::vector<double>> loss_history;
};

/// Indices (with replacement) of member `member`'s bootstrap resample of an
/// n-transition buffer.
std::vector<std::size_t> bootstrap_indices(std::size_t n, std::uint64_t seed, int member);

/// Trains every member on its own bootstrap resample; deterministic in `seed`
/// regardless of `workers`. Throws NumericalError if any epoch leaves
/// non-finite parameters.
TrainResult train_ensemble(const TransitionBuffer& buffer, const EnsembleConfig& config, std::uint64_t seed,
                           int workers = 1);

struct NextStateDistribution {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
};

NextStateDistribution predict_dist(const Ensemble& ensemble, int member, const Eigen::Ref<const Eigen::VectorXd>& obs,
                                   const Eigen::Ref<const Eigen::VectorXd>& action);

/// Batched form: columns of `obs`/`actions` are samples. Returns next-state
/// means (obs + predicted delta) and bounded log-variances.
GaussianOutput predict_batch(const Ensemble& ensemble, int member, const Eigen::Ref<const Eigen::MatrixXd>& obs,
                             const Eigen::Ref<const Eigen::MatrixXd>& actions);

/// mean + sqrt(var) * z with z ~ N(0, I) drawn from `rng`.
template <typename Urbg>
Eigen::VectorXd sample_next(const Ensemble& ensemble, int member, const Eigen::Ref<const Eigen::VectorXd>& obs,
                            const Eigen::Ref<const Eigen::VectorXd>& action, Urbg& rng) {
  const auto d = predict_dist(ensemble, member, obs, action);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd next = d.mean;
  for (Eigen::Index i = 0; i < next.size(); ++i) next[i] += std::sqrt(d.var[i]) * normal(rng);
  return next;
}

void save_ensemble(const Ensemble& ensemble, const std::filesystem::path& path);
Ensemble load_ensemble(const std::filesystem::path& path);

}  // namespace ugcem
