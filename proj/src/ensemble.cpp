#include "ugcem/ensemble.hpp"

#include "text_io.hpp"
#include "ugcem/errors.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <numeric>
#include <thread>

namespace ugcem {

namespace {

constexpr std::string_view kEnsembleMagic = "#ugcem-ensemble-v1";

std::mt19937_64 member_rng(std::uint64_t seed, int member, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(member), static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

enum : std::uint64_t { kBootstrapStream = 1, kInitStream = 2, kShuffleStream = 3 };

struct MemberResult {
  MlpParams params;
  std::vector<double> losses;
};

MemberResult train_member(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets, const EnsembleConfig& config,
                          std::uint64_t seed, int member) {
  const auto n = static_cast<std::size_t>(inputs.cols());
  const auto sample = bootstrap_indices(n, seed, member);

  auto init_rng = member_rng(seed, member, kInitStream);
  MemberResult r;
  r.params = MlpParams::init(static_cast<int>(inputs.rows()), config.hidden, static_cast<int>(targets.rows()), init_rng);
  r.params.bounds = config.bounds;
  AdamState adam = AdamState::zeros_like(r.params);

  auto shuffle_rng = member_rng(seed, member, kShuffleStream);
  std::vector<std::size_t> order = sample;
  const auto batch = static_cast<std::size_t>(config.batch_size);
  Eigen::MatrixXd xb(inputs.rows(), config.batch_size);
  Eigen::MatrixXd yb(targets.rows(), config.batch_size);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double weighted = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t count = std::min(batch, n - start);
      xb.resize(inputs.rows(), static_cast<Eigen::Index>(count));
      yb.resize(targets.rows(), static_cast<Eigen::Index>(count));
      for (std::size_t k = 0; k < count; ++k) {
        xb.col(static_cast<Eigen::Index>(k)) = inputs.col(static_cast<Eigen::Index>(order[start + k]));
        yb.col(static_cast<Eigen::Index>(k)) = targets.col(static_cast<Eigen::Index>(order[start + k]));
      }
      const auto lg = backward(r.params, xb, yb);
      adam_step(r.params, lg.gradient, adam, config.adam);
      weighted += lg.loss * static_cast<double>(count);
    }
    if (!r.params.all_finite() || !std::isfinite(weighted)) {
      throw NumericalError("member " + std::to_string(member) + " diverged in epoch " + std::to_string(epoch + 1));
    }
    r.losses.push_back(weighted / static_cast<double>(n));
  }
  return r;
}

}  // namespace

std::vector<std::size_t> bootstrap_indices(std::size_t n, std::uint64_t seed, int member) {
  auto rng = member_rng(seed, member, kBootstrapStream);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

TrainResult train_ensemble(const TransitionBuffer& buffer, const EnsembleConfig& config, std::uint64_t seed,
                           int workers) {
  if (config.members < 1) throw ConfigError("ensemble needs at least one member");
  if (config.batch_size < 1 || config.epochs < 1) throw ConfigError("batch size and epochs must be positive");
  if (buffer.size() < static_cast<std::size_t>(std::max(config.batch_size, 2))) {
    throw ShapeError("buffer has " + std::to_string(buffer.size()) + " transitions, fewer than the batch size " +
                     std::to_string(config.batch_size));
  }

  TrainResult result;
  auto& ens = result.ensemble;
  ens.env = buffer.env();
  ens.obs_dim = buffer.obs_dim();
  ens.act_dim = buffer.act_dim();
  ens.norm = fit_norm_stats(buffer);

  const Eigen::MatrixXd inputs = ens.norm.apply_columns(model_inputs(buffer));
  const Eigen::MatrixXd targets = delta_targets(buffer);

  std::vector<MemberResult> members(static_cast<std::size_t>(config.members));
  std::vector<std::exception_ptr> errors(members.size());
  std::atomic<int> next{0};
  auto work = [&] {
    for (int m = next++; m < config.members; m = next++) {
      try {
        members[static_cast<std::size_t>(m)] = train_member(inputs, targets, config, seed, m);
        spdlog::debug("member {} trained, final nll {}", m, members[static_cast<std::size_t>(m)].losses.back());
      } catch (...) {
        errors[static_cast<std::size_t>(m)] = std::current_exception();
      }
    }
  };
  const int n_threads = std::clamp(workers, 1, config.members);
  if (n_threads == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(work);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (auto& m : members) {
    ens.members.push_back(std::move(m.params));
    result.loss_history.push_back(std::move(m.losses));
  }
  return result;
}

GaussianOutput predict_batch(const Ensemble& ensemble, int member, const Eigen::Ref<const Eigen::MatrixXd>& obs,
                             const Eigen::Ref<const Eigen::MatrixXd>& actions) {
  if (member < 0 || member >= ensemble.size()) {
    throw ShapeError("member index " + std::to_string(member) + " out of range");
  }
  if (obs.rows() != ensemble.obs_dim || actions.rows() != ensemble.act_dim || obs.cols() != actions.cols()) {
    throw ShapeError("prediction input shape mismatch");
  }
  Eigen::MatrixXd x(ensemble.obs_dim + ensemble.act_dim, obs.cols());
  x.topRows(ensemble.obs_dim) = obs;
  x.bottomRows(ensemble.act_dim) = actions;
  GaussianOutput out = forward(ensemble.members[static_cast<std::size_t>(member)], ensemble.norm.apply_columns(x));
  out.mean += obs;
  return out;
}

NextStateDistribution predict_dist(const Ensemble& ensemble, int member, const Eigen::Ref<const Eigen::VectorXd>& obs,
                                   const Eigen::Ref<const Eigen::VectorXd>& action) {
  const auto out = predict_batch(ensemble, member, obs, action);
  return {out.mean.col(0), out.logvar.col(0).array().exp().matrix()};
}

void save_ensemble(const Ensemble& ensemble, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MissingInputError("cannot open '" + path.string() + "' for writing");
  out << kEnsembleMagic << " env=" << to_string(ensemble.env) << " obs_dim=" << ensemble.obs_dim
      << " act_dim=" << ensemble.act_dim << " members=" << ensemble.size() << '\n';
  auto row = [&out](std::string_view name, const Eigen::VectorXd& v) {
    out << name;
    for (Eigen::Index i = 0; i < v.size(); ++i) out << (i ? ',' : ' ') << format_real(v[i]);
    out << '\n';
  };
  row("norm_mean", ensemble.norm.mean);
  row("norm_std", ensemble.norm.std);
  for (const auto& m : ensemble.members) write_model(out, m);
  if (!out) throw FormatError("write to '" + path.string() + "' failed");
}

Ensemble load_ensemble(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open ensemble checkpoint '" + path.string() + "'");
  std::string line;
  if (!detail::read_line(in, line)) throw FormatError("empty checkpoint");
  const auto fields = detail::split_spaces(line);
  if (fields.empty() || fields[0] != kEnsembleMagic) throw FormatError("not a ugcem-ensemble-v1 checkpoint");

  Ensemble ens;
  try {
    ens.env = parse_env_id(detail::header_field(fields, "env"));
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  ens.obs_dim = static_cast<int>(detail::parse_integer(detail::header_field(fields, "obs_dim")));
  ens.act_dim = static_cast<int>(detail::parse_integer(detail::header_field(fields, "act_dim")));
  const long members = detail::parse_integer(detail::header_field(fields, "members"));
  if (ens.obs_dim != observation_dim(ens.env) || ens.act_dim != action_dim(ens.env) || members < 1) {
    throw FormatError("checkpoint header inconsistent with environment");
  }
  const auto in_dim = static_cast<std::size_t>(ens.obs_dim + ens.act_dim);

  auto read_row = [&](std::string_view name) {
    if (!detail::read_line(in, line)) throw FormatError("truncated checkpoint");
    if (line.size() <= name.size() || line.compare(0, name.size(), name) != 0 || line[name.size()] != ' ') {
      throw FormatError("expected '" + std::string(name) + "' row");
    }
    const auto v = detail::parse_reals(std::string_view(line).substr(name.size() + 1));
    if (v.size() != in_dim) throw FormatError("normalization width mismatch");
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  ens.norm.mean = read_row("norm_mean");
  ens.norm.std = read_row("norm_std");
  for (long m = 0; m < members; ++m) {
    MlpParams p = read_model(in);
    if (p.input_dim() != static_cast<int>(in_dim) || p.output_dim != ens.obs_dim) {
      throw FormatError("member " + std::to_string(m) + " shape does not match header");
    }
    ens.members.push_back(std::move(p));
  }
  return ens;
}

}  // namespace ugcem
