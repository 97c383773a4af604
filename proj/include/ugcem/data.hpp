#pragma once

#include "ugcem/env.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <string>

namespace ugcem {

inline constexpr std::size_t kDefaultBufferCapacity = 10000;

struct Transition {
  Observation obs;
  Action action;
  Observation next_obs;

  friend bool operator==(const Transition& a, const Transition& b) {
    return a.obs == b.obs && a.action == b.action && a.next_obs == b.next_obs;
  }
};

/// FIFO transition store of bounded capacity.
class TransitionBuffer {
 public:
  explicit TransitionBuffer(EnvId env, std::size_t capacity = kDefaultBufferCapacity);

  EnvId env() const { return env_; }
  int obs_dim() const { return obs_dim_; }
  int act_dim() const { return act_dim_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }

  /// Appends, evicting the oldest transition when full. Throws ShapeError on
  /// dimension mismatch and DomainError on non-finite values.
  void push(Transition t);

  const Transition& operator[](std::size_t i) const { return items_[i]; }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  friend bool operator==(const TransitionBuffer& a, const TransitionBuffer& b) {
    return a.env_ == b.env_ && a.items_ == b.items_;
  }

 private:
  EnvId env_;
  int obs_dim_;
  int act_dim_;
  std::size_t capacity_;
  std::deque<Transition> items_;
};

/// Random-interaction dataset: uniform actions over the action bounds,
/// episodes reset on termination or after `episode_length` steps.
TransitionBuffer collect_random(EnvId env, std::size_t n_steps, std::uint64_t seed,
                                int episode_length = 200);

/// Drops every transition whose obs or next_obs lies in the region. Logs a
/// warning when nothing survives.
TransitionBuffer filter_region(const TransitionBuffer& buffer, const RegionSpec& region);

struct NormStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  static constexpr double kStdFloor = 1e-8;

  Eigen::VectorXd apply(const Eigen::Ref<const Eigen::VectorXd>& input) const;
  /// Column-wise normalization of an (input_dim x batch) matrix.
  Eigen::MatrixXd apply_columns(const Eigen::Ref<const Eigen::MatrixXd>& inputs) const;

  friend bool operator==(const NormStats& a, const NormStats& b) {
    return a.mean == b.mean && a.std == b.std;
  }
};

/// Population mean/std of concatenated (obs, action); requires >= 2 transitions.
NormStats fit_norm_stats(const TransitionBuffer& buffer);

/// (obs_dim + act_dim) x n matrix of concatenated inputs and obs_dim x n state deltas.
Eigen::MatrixXd model_inputs(const TransitionBuffer& buffer);
Eigen::MatrixXd delta_targets(const TransitionBuffer& buffer);

void save(const TransitionBuffer& buffer, const std::filesystem::path& path);
TransitionBuffer load(const std::filesystem::path& path);

/// Shortest round-trip decimal formatting used by every text artifact.
std::string format_real(double v);

}  // namespace ugcem
