#include "ugcem/planner.hpp"

#include "ugcem/data.hpp"
#include "ugcem/errors.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <string>

namespace ugcem {

namespace {

// Sub-stream tags of a planning call's CounterRng.
enum : std::uint64_t { kSampleTag = 11, kRolloutTag = 12, kMemberTag = 21, kNoiseTag = 22 };

}  // namespace

Propagation parse_propagation(std::string_view name) {
  if (name == "ts_inf" || name == "TS_inf") return Propagation::ts_inf;
  if (name == "ts_1" || name == "TS_1") return Propagation::ts_1;
  throw ConfigError("unknown propagation mode '" + std::string(name) + "'");
}

std::string_view to_string(Propagation p) { return p == Propagation::ts_inf ? "ts_inf" : "ts_1"; }

UncertaintyKind parse_uncertainty_kind(std::string_view name) {
  if (name == "total") return UncertaintyKind::total;
  if (name == "epistemic") return UncertaintyKind::epistemic;
  throw ConfigError("unknown uncertainty kind '" + std::string(name) + "'");
}

std::string_view to_string(UncertaintyKind k) { return k == UncertaintyKind::total ? "total" : "epistemic"; }

// ---------------------------------------------------------------------------

CemConfig CemConfig::defaults(EnvId env) {
  CemConfig c;
  c.action_low = Eigen::VectorXd::Constant(ugcem::action_dim(env), ugcem::action_low(env));
  c.action_high = Eigen::VectorXd::Constant(ugcem::action_dim(env), ugcem::action_high(env));
  return c;
}

int CemConfig::elite_count() const { return static_cast<int>(std::lround(elite_ratio * population)); }

void CemConfig::validate() const {
  if (horizon < 1) throw ConfigError("horizon must be >= 1");
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (population < 1) throw ConfigError("population must be >= 1");
  if (particles < 1) throw ConfigError("particles must be >= 1");
  if (elite_count() < 1 || elite_count() > population) throw ConfigError("elite count must lie in [1, population]");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be finite and >= 0");
  if (action_low.size() < 1 || action_low.size() != action_high.size() ||
      (action_high.array() < action_low.array()).any()) {
    throw ConfigError("invalid action bounds");
  }
}

PlanningDistribution PlanningDistribution::initial(const CemConfig& c) {
  PlanningDistribution d;
  const Eigen::RowVectorXd mid = ((c.action_low + c.action_high) / 2.0).transpose();
  const Eigen::RowVectorXd var = ((c.action_high - c.action_low) / 4.0).array().square().matrix().transpose();
  d.mean = mid.replicate(c.horizon, 1);
  d.var = var.replicate(c.horizon, 1);
  return d;
}

PlanningDistribution PlanningDistribution::shifted(const CemConfig& c) const {
  PlanningDistribution d = initial(c);
  const Eigen::Index keep = std::min<Eigen::Index>(mean.rows() - 1, c.horizon - 1);
  if (keep > 0 && mean.cols() == d.mean.cols()) {
    d.mean.topRows(keep) = mean.middleRows(1, keep);
  }
  return d;
}

ActionPopulation sample_population(const PlanningDistribution& dist, int population, const Eigen::VectorXd& low,
                                   const Eigen::VectorXd& high, const CounterRng& rng) {
  const Eigen::Index horizon = dist.mean.rows();
  const Eigen::Index act = dist.mean.cols();
  if (low.size() != act || high.size() != act || dist.var.rows() != horizon || dist.var.cols() != act) {
    throw ShapeError("planning distribution and bounds disagree in shape");
  }
  const Eigen::MatrixXd stddev = dist.var.cwiseMax(0.0).cwiseSqrt();
  ActionPopulation out(static_cast<std::size_t>(population));
  for (int n = 0; n < population; ++n) {
    auto stream = rng.stream(static_cast<std::uint64_t>(n));
    std::normal_distribution<double> normal(0.0, 1.0);
    ActionSequence a(horizon, act);
    for (Eigen::Index t = 0; t < horizon; ++t) {
      for (Eigen::Index j = 0; j < act; ++j) {
        a(t, j) = std::clamp(dist.mean(t, j) + stddev(t, j) * normal(stream), low[j], high[j]);
      }
    }
    out[static_cast<std::size_t>(n)] = std::move(a);
  }
  return out;
}

// ---------------------------------------------------------------------------

MemberAssignment::MemberAssignment(Propagation mode, int population, int particles, int horizon,
                                   std::vector<int> index)
    : mode_(mode), population_(population), particles_(particles), horizon_(horizon), index_(std::move(index)) {}

int MemberAssignment::operator()(int n, int p, int t) const {
  const auto np = static_cast<std::size_t>(n) * static_cast<std::size_t>(particles_) + static_cast<std::size_t>(p);
  if (mode_ == Propagation::ts_inf) return index_[np];
  return index_[np * static_cast<std::size_t>(horizon_) + static_cast<std::size_t>(t)];
}

MemberAssignment assign_members(int population, int particles, int members, Propagation mode, int horizon,
                                const CounterRng& rng) {
  if (particles < 1 || members < 1) throw ShapeError("particles and members must be >= 1");
  std::vector<int> index;
  if (mode == Propagation::ts_inf) {
    index.resize(static_cast<std::size_t>(population) * static_cast<std::size_t>(particles));
    std::vector<int> perm(static_cast<std::size_t>(particles));
    for (int n = 0; n < population; ++n) {
      std::iota(perm.begin(), perm.end(), 0);
      auto stream = rng.stream(static_cast<std::uint64_t>(n));
      std::shuffle(perm.begin(), perm.end(), stream);
      for (int p = 0; p < particles; ++p) {
        index[static_cast<std::size_t>(n * particles + p)] = perm[static_cast<std::size_t>(p)] % members;
      }
    }
  } else {
    index.resize(static_cast<std::size_t>(population) * static_cast<std::size_t>(particles) *
                 static_cast<std::size_t>(horizon));
    for (int n = 0; n < population; ++n) {
      for (int p = 0; p < particles; ++p) {
        for (int t = 0; t < horizon; ++t) {
          auto stream = rng.stream(static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(p),
                                   static_cast<std::uint64_t>(t));
          std::uniform_int_distribution<int> pick(0, members - 1);
          index[(static_cast<std::size_t>(n * particles + p)) * static_cast<std::size_t>(horizon) +
                static_cast<std::size_t>(t)] = pick(stream);
        }
      }
    }
  }
  return MemberAssignment(mode, population, particles, horizon, std::move(index));
}

RolloutTensor rollout(const Ensemble& ensemble, const Eigen::Ref<const Eigen::VectorXd>& start_obs,
                      const ActionPopulation& actions, const CemConfig& config, const CounterRng& rng) {
  const int n_cand = static_cast<int>(actions.size());
  const int horizon = config.horizon;
  const int particles = config.particles;
  const int dim = ensemble.obs_dim;
  const int act_dim = ensemble.act_dim;
  if (start_obs.size() != dim) throw ShapeError("start observation dimension mismatch");
  for (const auto& a : actions) {
    if (a.rows() != horizon || a.cols() != act_dim) throw ShapeError("action sequence must be H x act_dim");
  }

  RolloutTensor out;
  out.members = assign_members(n_cand, particles, ensemble.size(), config.propagation, horizon,
                               rng.derive(kMemberTag));
  out.states.assign(static_cast<std::size_t>(n_cand), ParticleStates(particles, horizon + 1, dim));
  out.rewards.assign(static_cast<std::size_t>(n_cand), Eigen::MatrixXd::Zero(particles, horizon));
  out.done.assign(static_cast<std::size_t>(n_cand),
                  std::vector<bool>(static_cast<std::size_t>(particles * (horizon + 1)), false));
  out.flagged.assign(static_cast<std::size_t>(n_cand), false);
  for (auto& s : out.states) {
    for (int p = 0; p < particles; ++p) s.state(p, 0) = start_obs;
  }
  const CounterRng noise_rng = rng.derive(kNoiseTag);

  auto done_at = [&](int n, int p, int t) {
    return out.done[static_cast<std::size_t>(n)][static_cast<std::size_t>(p * (horizon + 1) + t)];
  };

  // Per-step batches: all live particles routed to one member go through a single forward pass.
  std::vector<std::vector<std::pair<int, int>>> groups(static_cast<std::size_t>(ensemble.size()));
  Eigen::MatrixXd obs_batch;
  Eigen::MatrixXd act_batch;
  for (int t = 0; t < horizon; ++t) {
    for (auto& g : groups) g.clear();
    for (int n = 0; n < n_cand; ++n) {
      for (int p = 0; p < particles; ++p) {
        if (done_at(n, p, t)) {
          out.states[static_cast<std::size_t>(n)].state(p, t + 1) = out.states[static_cast<std::size_t>(n)].state(p, t);
          done_at(n, p, t + 1) = true;
        } else {
          groups[static_cast<std::size_t>(out.members(n, p, t))].emplace_back(n, p);
        }
      }
    }
    for (int b = 0; b < ensemble.size(); ++b) {
      const auto& group = groups[static_cast<std::size_t>(b)];
      if (group.empty()) continue;
      const auto k = static_cast<Eigen::Index>(group.size());
      obs_batch.resize(dim, k);
      act_batch.resize(act_dim, k);
      for (Eigen::Index j = 0; j < k; ++j) {
        const auto [n, p] = group[static_cast<std::size_t>(j)];
        obs_batch.col(j) = out.states[static_cast<std::size_t>(n)].state(p, t);
        act_batch.col(j) = actions[static_cast<std::size_t>(n)].row(t).transpose();
      }
      const GaussianOutput pred = predict_batch(ensemble, b, obs_batch, act_batch);
      Eigen::VectorXd next(dim);
      for (Eigen::Index j = 0; j < k; ++j) {
        const auto [n, p] = group[static_cast<std::size_t>(j)];
        auto stream = noise_rng.stream(static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(p),
                                       static_cast<std::uint64_t>(t));
        std::normal_distribution<double> normal(0.0, 1.0);
        for (int s = 0; s < dim; ++s) {
          next[s] = pred.mean(s, j) + std::sqrt(std::exp(pred.logvar(s, j))) * normal(stream);
        }
        auto& cand_states = out.states[static_cast<std::size_t>(n)];
        if (!next.allFinite()) {
          out.flagged[static_cast<std::size_t>(n)] = true;
          cand_states.state(p, t + 1) = cand_states.state(p, t);
          done_at(n, p, t + 1) = true;
          continue;
        }
        cand_states.state(p, t + 1) = next;
        out.rewards[static_cast<std::size_t>(n)](p, t) =
            transition_reward(ensemble.env, obs_batch.col(j), act_batch.col(j), next);
        done_at(n, p, t + 1) = is_terminal(ensemble.env, next);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

VarianceNormalizer::VarianceNormalizer(int dim, int horizon, double decay, double floor)
    : table_(Eigen::MatrixXd::Ones(dim, horizon)), decay_(decay), floor_(floor) {
  if (dim < 1 || horizon < 1) throw ShapeError("normalizer needs positive dimensions");
}

void VarianceNormalizer::set_table(const Eigen::Ref<const Eigen::MatrixXd>& table) {
  if (table.rows() != table_.rows() || table.cols() != table_.cols()) throw ShapeError("normalizer table shape");
  table_ = table.cwiseMax(floor_);
  table_set_ = true;
}

void VarianceNormalizer::update(const std::vector<Eigen::MatrixXd>& sigma2_batch) {
  if (sigma2_batch.empty()) return;
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(table_.rows(), table_.cols());
  for (const auto& s : sigma2_batch) {
    if (s.rows() != table_.rows() || s.cols() != table_.cols()) throw ShapeError("sigma2 shape mismatch");
    if (!s.allFinite()) throw DomainError("non-finite sigma2 in normalizer batch");
    mean += s;
  }
  mean /= static_cast<double>(sigma2_batch.size());
  if (updates_ == 0) {
    table_ = mean;
  } else {
    table_ = decay_ * table_ + (1.0 - decay_) * mean;
  }
  table_ = table_.cwiseMax(floor_);
  ++updates_;
}

VarianceNormalizer update_normalizer(VarianceNormalizer normalizer, const std::vector<Eigen::MatrixXd>& sigma2_batch) {
  normalizer.update(sigma2_batch);
  return normalizer;
}

Eigen::MatrixXd particle_variance(const ParticleStates& states) {
  const int P = states.particles();
  const int H = states.steps() - 1;
  const int S = states.dim();
  if (P < 1) throw ShapeError("particle_variance needs at least one particle");
  // Deviations are taken about particle 0 first, so identical particles give
  // exactly zero and large common offsets do not cost precision.
  Eigen::MatrixXd out(S, H);
  for (int t = 1; t <= H; ++t) {
    for (int s = 0; s < S; ++s) {
      const double ref = states(0, t, s);
      double mean = 0.0;
      for (int p = 0; p < P; ++p) mean += states(p, t, s) - ref;
      mean /= P;
      double acc = 0.0;
      for (int p = 0; p < P; ++p) {
        const double d = states(p, t, s) - ref - mean;
        acc += d * d;
      }
      out(s, t - 1) = acc / P;
    }
  }
  return out;
}

Eigen::MatrixXd epistemic_variance(const ParticleStates& states, const MemberAssignment& members, int candidate) {
  if (members.mode() != Propagation::ts_inf) {
    throw UnsupportedModeError("epistemic decomposition requires ts_inf propagation");
  }
  const int P = states.particles();
  const int H = states.steps() - 1;
  const int S = states.dim();
  int n_groups = 0;
  for (int p = 0; p < P; ++p) n_groups = std::max(n_groups, members(candidate, p) + 1);

  Eigen::MatrixXd out(S, H);
  std::vector<double> sums(static_cast<std::size_t>(n_groups));
  std::vector<int> counts(static_cast<std::size_t>(n_groups));
  for (int t = 1; t <= H; ++t) {
    for (int s = 0; s < S; ++s) {
      std::fill(sums.begin(), sums.end(), 0.0);
      std::fill(counts.begin(), counts.end(), 0);
      const double ref = states(0, t, s);
      for (int p = 0; p < P; ++p) {
        const auto g = static_cast<std::size_t>(members(candidate, p));
        sums[g] += states(p, t, s) - ref;
        ++counts[g];
      }
      double mean = 0.0;
      int present = 0;
      for (std::size_t g = 0; g < sums.size(); ++g) {
        if (counts[g] == 0) continue;
        sums[g] /= counts[g];
        mean += sums[g];
        ++present;
      }
      mean /= present;
      double acc = 0.0;
      for (std::size_t g = 0; g < sums.size(); ++g) {
        if (counts[g] == 0) continue;
        acc += (sums[g] - mean) * (sums[g] - mean);
      }
      out(s, t - 1) = acc / present;
    }
  }
  return out;
}

double uncertainty(const Eigen::Ref<const Eigen::MatrixXd>& sigma2, const VarianceNormalizer& normalizer) {
  if (sigma2.rows() != normalizer.dim() || sigma2.cols() != normalizer.horizon()) {
    throw ShapeError("sigma2 shape does not match the normalizer");
  }
  double total = 0.0;
  for (Eigen::Index s = 0; s < sigma2.rows(); ++s) {
    double over_t = 0.0;
    for (Eigen::Index t = 0; t < sigma2.cols(); ++t) over_t += sigma2(s, t) / normalizer.table()(s, t);
    total += over_t / static_cast<double>(sigma2.cols());
  }
  return total / static_cast<double>(sigma2.rows());
}

double uncertainty_decomposed(const ParticleStates& states, const MemberAssignment& members, int candidate,
                              const VarianceNormalizer& normalizer) {
  return uncertainty(epistemic_variance(states, members, candidate), normalizer);
}

double penalized_return(const Eigen::Ref<const Eigen::MatrixXd>& rewards, double omega, double beta) {
  const double mean_return = rewards.rowwise().sum().mean();
  return mean_return - beta * omega;
}

std::vector<int> select_elites(const std::vector<double>& scores, int count) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(std::max(count, 0))));
  return order;
}

PlanningDistribution cem_iteration(const PlanningDistribution& dist, const ActionPopulation& actions,
                                   const std::vector<double>& scores, const CemConfig& config) {
  if (actions.size() != scores.size()) throw ShapeError("one score per candidate required");
  if (std::all_of(scores.begin(), scores.end(), [](double s) { return s == kFlaggedScore; })) {
    return dist;
  }
  const auto elites = select_elites(scores, config.elite_count());
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(dist.mean.rows(), dist.mean.cols());
  for (int e : elites) mean += actions[static_cast<std::size_t>(e)];
  mean /= static_cast<double>(elites.size());
  Eigen::MatrixXd var = Eigen::MatrixXd::Zero(dist.mean.rows(), dist.mean.cols());
  for (int e : elites) var.array() += (actions[static_cast<std::size_t>(e)] - mean).array().square();
  var /= static_cast<double>(elites.size());

  PlanningDistribution next;
  next.mean = config.alpha * dist.mean + (1.0 - config.alpha) * mean;
  next.var = config.alpha * dist.var + (1.0 - config.alpha) * var;
  return next;
}

namespace {

double state_spread(const RolloutTensor& r) {
  if (r.states.empty()) return 0.0;
  const int P = r.states[0].particles();
  const int T = r.states[0].steps();
  const int S = r.states[0].dim();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(S);
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(S);
  double count = 0.0;
  for (const auto& cand : r.states) {
    for (int p = 0; p < P; ++p) {
      for (int t = 1; t < T; ++t) {
        const auto x = cand.state(p, t);
        sum += x;
        count += 1.0;
      }
    }
  }
  const Eigen::VectorXd mean = sum / count;
  for (const auto& cand : r.states) {
    for (int p = 0; p < P; ++p) {
      for (int t = 1; t < T; ++t) sq.array() += (cand.state(p, t) - mean).array().square();
    }
  }
  return (sq / count).mean();
}

}  // namespace

PlanResult plan(const Ensemble& ensemble, const Eigen::Ref<const Eigen::VectorXd>& start_obs, const CemConfig& config,
                VarianceNormalizer& normalizer, const CounterRng& rng,
                const std::optional<PlanningDistribution>& warm_start, const PlanOptions& options) {
  config.validate();
  if (config.action_dim() != ensemble.act_dim) throw ConfigError("action bounds do not match the ensemble");
  if (normalizer.dim() != ensemble.obs_dim || normalizer.horizon() != config.horizon) {
    throw ShapeError("normalizer shape does not match (obs_dim, horizon)");
  }

  PlanResult result;
  PlanningDistribution dist = warm_start ? warm_start->shifted(config) : PlanningDistribution::initial(config);
  std::vector<Eigen::MatrixXd> sigma2_batch;
  sigma2_batch.reserve(static_cast<std::size_t>(config.iterations * config.population));
  VarianceNormalizer bootstrap = normalizer;
  const VarianceNormalizer* scoring = normalizer.calibrated() ? &normalizer : nullptr;

  for (int it = 0; it < config.iterations; ++it) {
    const CounterRng iter_rng = rng.derive(static_cast<std::uint64_t>(it));
    const ActionPopulation actions =
        sample_population(dist, config.population, config.action_low, config.action_high, iter_rng.derive(kSampleTag));
    RolloutTensor r = rollout(ensemble, start_obs, actions, config, iter_rng.derive(kRolloutTag));

    IterationTrace trace;
    trace.dist = dist;
    const auto n_cand = static_cast<std::size_t>(config.population);
    trace.omega.resize(n_cand);
    trace.mean_return.resize(n_cand);
    trace.penalized.resize(n_cand);
    std::vector<Eigen::MatrixXd> sigma2(n_cand);
    std::vector<Eigen::MatrixXd> iteration_batch;
    for (std::size_t n = 0; n < n_cand; ++n) {
      trace.mean_return[n] = r.rewards[n].rowwise().sum().mean();
      if (r.flagged[n]) continue;
      sigma2[n] = config.uncertainty == UncertaintyKind::total
                      ? particle_variance(r.states[n])
                      : epistemic_variance(r.states[n], r.members, static_cast<int>(n));
      iteration_batch.push_back(sigma2[n]);
    }
    if (!scoring && !iteration_batch.empty()) {
      bootstrap.update(iteration_batch);
      scoring = &bootstrap;
    }
    for (std::size_t n = 0; n < n_cand; ++n) {
      if (r.flagged[n]) {
        trace.omega[n] = std::numeric_limits<double>::infinity();
        trace.penalized[n] = kFlaggedScore;
        continue;
      }
      const double omega = uncertainty(sigma2[n], *scoring);
      trace.omega[n] = omega;
      trace.penalized[n] = penalized_return(r.rewards[n], omega, config.beta);
      sigma2_batch.push_back(std::move(sigma2[n]));
    }
    trace.elites = select_elites(trace.penalized, config.elite_count());
    trace.state_spread = state_spread(r);
    if (options.record_rollouts) trace.rollout = std::move(r);

    dist = cem_iteration(dist, actions, trace.penalized, config);
    result.trace.iterations.push_back(std::move(trace));
  }

  normalizer.update(sigma2_batch);

  result.action = dist.mean.row(0).transpose().cwiseMax(config.action_low).cwiseMin(config.action_high);
  result.dist = std::move(dist);
  return result;
}

MpcController::MpcController(const Ensemble& ensemble, CemConfig config)
    : ensemble_(&ensemble), config_(std::move(config)), normalizer_(ensemble.obs_dim, config_.horizon) {
  config_.validate();
}

Eigen::VectorXd MpcController::act(const Eigen::Ref<const Eigen::VectorXd>& obs, const CounterRng& rng) {
  PlanResult r = plan(*ensemble_, obs, config_, normalizer_, rng, previous_);
  previous_ = std::move(r.dist);
  return r.action;
}

void MpcController::reset() {
  normalizer_ = VarianceNormalizer(ensemble_->obs_dim, config_.horizon);
  previous_.reset();
}

void write_trace_scores(const PlanTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MissingInputError("cannot open '" + path.string() + "' for writing");
  out << "iteration,candidate,omega,mean_return,penalized_return\n";
  for (std::size_t i = 0; i < trace.iterations.size(); ++i) {
    const auto& it = trace.iterations[i];
    for (std::size_t n = 0; n < it.omega.size(); ++n) {
      out << i << ',' << n << ',' << format_real(it.omega[n]) << ',' << format_real(it.mean_return[n]) << ','
          << format_real(it.penalized[n]) << '\n';
    }
  }
}

void write_trace_states(const PlanTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MissingInputError("cannot open '" + path.string() + "' for writing");
  int dim = 0;
  for (const auto& it : trace.iterations) {
    if (!it.rollout) throw ConfigError("plan trace has no recorded rollouts");
    if (!it.rollout->states.empty()) dim = it.rollout->states[0].dim();
  }
  out << "iteration,candidate,particle,t";
  for (int s = 0; s < dim; ++s) out << ",s_" << s;
  out << '\n';
  for (std::size_t i = 0; i < trace.iterations.size(); ++i) {
    const auto& r = *trace.iterations[i].rollout;
    for (std::size_t n = 0; n < r.states.size(); ++n) {
      const auto& st = r.states[n];
      for (int p = 0; p < st.particles(); ++p) {
        for (int t = 0; t < st.steps(); ++t) {
          out << i << ',' << n << ',' << p << ',' << t;
          for (int s = 0; s < st.dim(); ++s) out << ',' << format_real(st(p, t, s));
          out << '\n';
        }
      }
    }
  }
}

}  // namespace ugcem
