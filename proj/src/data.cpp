#include "ugcem/data.hpp"

#include "text_io.hpp"
#include "ugcem/errors.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <random>

namespace ugcem {

namespace {

constexpr std::string_view kDatasetMagic = "#ugcem-v1";

bool all_finite(const Eigen::VectorXd& v) { return v.allFinite(); }

}  // namespace

std::string format_real(double v) { return fmt::format("{:.17g}", v); }

TransitionBuffer::TransitionBuffer(EnvId env, std::size_t capacity)
    : env_(env), obs_dim_(observation_dim(env)), act_dim_(action_dim(env)), capacity_(capacity) {
  if (capacity == 0) throw ShapeError("buffer capacity must be positive");
}

void TransitionBuffer::push(Transition t) {
  if (t.obs.size() != obs_dim_ || t.next_obs.size() != obs_dim_ || t.action.size() != act_dim_) {
    throw ShapeError("transition dimensions do not match the buffer");
  }
  if (!all_finite(t.obs) || !all_finite(t.action) || !all_finite(t.next_obs)) {
    throw DomainError("transition contains non-finite values");
  }
  if (items_.size() == capacity_) items_.pop_front();
  items_.push_back(std::move(t));
}

TransitionBuffer collect_random(EnvId env_id, std::size_t n_steps, std::uint64_t seed, int episode_length) {
  if (n_steps == 0) throw DomainError("n_steps must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> act(action_low(env_id), action_high(env_id));

  Environment env(env_id);
  TransitionBuffer buffer(env_id, n_steps);
  Observation obs = env.reset(rng);
  int t = 0;
  while (buffer.size() < n_steps) {
    Action a(action_dim(env_id));
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = act(rng);
    EnvOutcome out = env.step(a);
    buffer.push({obs, a, out.obs});
    ++t;
    if (out.done || t >= episode_length) {
      obs = env.reset(rng);
      t = 0;
    } else {
      obs = std::move(out.obs);
    }
  }
  return buffer;
}

TransitionBuffer filter_region(const TransitionBuffer& buffer, const RegionSpec& region) {
  if (region.env != buffer.env()) throw ShapeError("region environment differs from buffer environment");
  TransitionBuffer out(buffer.env(), buffer.capacity());
  for (const auto& t : buffer) {
    if (!in_forbidden_region(t.obs, region) && !in_forbidden_region(t.next_obs, region)) {
      out.push(t);
    }
  }
  if (out.empty()) {
    spdlog::warn("region filter removed all {} transitions", buffer.size());
  }
  return out;
}

Eigen::VectorXd NormStats::apply(const Eigen::Ref<const Eigen::VectorXd>& input) const {
  return ((input - mean).array() / std.array()).matrix();
}

Eigen::MatrixXd NormStats::apply_columns(const Eigen::Ref<const Eigen::MatrixXd>& inputs) const {
  return ((inputs.colwise() - mean).array().colwise() / std.array()).matrix();
}

Eigen::MatrixXd model_inputs(const TransitionBuffer& buffer) {
  const int in_dim = buffer.obs_dim() + buffer.act_dim();
  Eigen::MatrixXd x(in_dim, static_cast<Eigen::Index>(buffer.size()));
  Eigen::Index j = 0;
  for (const auto& t : buffer) {
    x.col(j).head(buffer.obs_dim()) = t.obs;
    x.col(j).tail(buffer.act_dim()) = t.action;
    ++j;
  }
  return x;
}

Eigen::MatrixXd delta_targets(const TransitionBuffer& buffer) {
  Eigen::MatrixXd y(buffer.obs_dim(), static_cast<Eigen::Index>(buffer.size()));
  Eigen::Index j = 0;
  for (const auto& t : buffer) {
    y.col(j++) = t.next_obs - t.obs;
  }
  return y;
}

NormStats fit_norm_stats(const TransitionBuffer& buffer) {
  if (buffer.size() < 2) throw ShapeError("normalization needs at least 2 transitions");
  const Eigen::MatrixXd x = model_inputs(buffer);
  const double n = static_cast<double>(x.cols());
  NormStats s;
  s.mean = x.rowwise().sum() / n;
  s.std = ((x.colwise() - s.mean).array().square().rowwise().sum() / n).sqrt().matrix();
  s.std = s.std.cwiseMax(NormStats::kStdFloor);
  return s;
}

void save(const TransitionBuffer& buffer, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MissingInputError("cannot open '" + path.string() + "' for writing");
  out << kDatasetMagic << " env=" << to_string(buffer.env()) << " obs_dim=" << buffer.obs_dim()
      << " act_dim=" << buffer.act_dim() << '\n';
  std::string line;
  for (const auto& t : buffer) {
    line.clear();
    auto append = [&line](const Eigen::VectorXd& v) {
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (!line.empty()) line += ',';
        line += format_real(v[i]);
      }
    };
    append(t.obs);
    append(t.action);
    append(t.next_obs);
    out << line << '\n';
  }
  if (!out) throw FormatError("write to '" + path.string() + "' failed");
}

TransitionBuffer load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open dataset '" + path.string() + "'");
  std::string line;
  if (!detail::read_line(in, line)) throw FormatError("empty dataset file");
  const auto fields = detail::split_spaces(line);
  if (fields.empty() || fields[0] != kDatasetMagic) throw FormatError("not a ugcem-v1 dataset");
  const EnvId env = [&] {
    try {
      return parse_env_id(detail::header_field(fields, "env"));
    } catch (const ConfigError& e) {
      throw FormatError(e.what());
    }
  }();
  const long obs_dim = detail::parse_integer(detail::header_field(fields, "obs_dim"));
  const long act_dim = detail::parse_integer(detail::header_field(fields, "act_dim"));
  if (obs_dim != observation_dim(env) || act_dim != action_dim(env)) {
    throw FormatError("header dimensions do not match environment " + std::string(to_string(env)));
  }

  std::vector<Transition> rows;
  const auto width = static_cast<std::size_t>(2 * obs_dim + act_dim);
  while (detail::read_line(in, line)) {
    const auto v = detail::parse_reals(line);
    if (v.size() != width) {
      throw FormatError("row " + std::to_string(rows.size() + 1) + " has " + std::to_string(v.size()) +
                        " values, header implies " + std::to_string(width));
    }
    Transition t;
    t.obs = Eigen::Map<const Eigen::VectorXd>(v.data(), obs_dim);
    t.action = Eigen::Map<const Eigen::VectorXd>(v.data() + obs_dim, act_dim);
    t.next_obs = Eigen::Map<const Eigen::VectorXd>(v.data() + obs_dim + act_dim, obs_dim);
    rows.push_back(std::move(t));
  }
  TransitionBuffer buffer(env, std::max(rows.size(), kDefaultBufferCapacity));
  for (auto& t : rows) buffer.push(std::move(t));
  return buffer;
}

}  // namespace ugcem
