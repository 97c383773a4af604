#include "ugcem/nn.hpp"

#include "text_io.hpp"
#include "ugcem/data.hpp"
#include "ugcem/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <string>

namespace ugcem {

namespace {

constexpr std::string_view kModelMagic = "#ugcem-model-v1";

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<int> layer_sizes(int input_dim, const std::vector<int>& hidden, int output_dim) {
  std::vector<int> sizes{input_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(2 * output_dim);
  return sizes;
}

constexpr Eigen::Index kColumnPanel = 8;

void check_shapes(const MlpParams& params, Eigen::Index input_rows) {
  if (params.layers.empty()) throw ShapeError("network has no layers");
  if (input_rows != params.input_dim()) {
    throw ShapeError("input dimension " + std::to_string(input_rows) + " does not match network input " +
                     std::to_string(params.input_dim()));
  }
}

}  // namespace

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double bound_logvar(double raw, const LogVarBounds& b) {
  const double upper = b.max - softplus(b.max - raw);
  return b.min + softplus(upper - b.min);
}

std::size_t MlpParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

bool MlpParams::all_finite() const {
  return std::all_of(layers.begin(), layers.end(),
                     [](const DenseLayer& l) { return l.weight.allFinite() && l.bias.allFinite(); });
}

MlpParams MlpParams::init(int input_dim, const std::vector<int>& hidden, int output_dim, std::mt19937_64& rng) {
  MlpParams p = zeros(input_dim, hidden, output_dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& layer : p.layers) {
    const double scale = std::sqrt(2.0 / static_cast<double>(layer.weight.cols()));
    for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
      for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
        double z = normal(rng);
        while (std::abs(z) > 2.0) z = normal(rng);
        layer.weight(i, j) = scale * z;
      }
    }
  }
  return p;
}

MlpParams MlpParams::zeros(int input_dim, const std::vector<int>& hidden, int output_dim) {
  if (input_dim <= 0 || output_dim <= 0) throw ShapeError("network dimensions must be positive");
  const auto sizes = layer_sizes(input_dim, hidden, output_dim);
  MlpParams p;
  p.output_dim = output_dim;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    if (sizes[l + 1] <= 0) throw ShapeError("hidden layer sizes must be positive");
    p.layers.push_back({Eigen::MatrixXd::Zero(sizes[l + 1], sizes[l]), Eigen::VectorXd::Zero(sizes[l + 1])});
  }
  return p;
}

MlpParams MlpParams::zeros_like(const MlpParams& like) {
  MlpParams p = like;
  for (auto& l : p.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  return p;
}

double& MlpParams::coord(std::size_t i) {
  for (auto& l : layers) {
    const auto nw = static_cast<std::size_t>(l.weight.size());
    if (i < nw) return l.weight.data()[i];
    i -= nw;
    const auto nb = static_cast<std::size_t>(l.bias.size());
    if (i < nb) return l.bias.data()[i];
    i -= nb;
  }
  throw ShapeError("parameter index out of range");
}

double MlpParams::coord(std::size_t i) const { return const_cast<MlpParams&>(*this).coord(i); }

GaussianOutput forward(const MlpParams& params, const Eigen::Ref<const Eigen::MatrixXd>& inputs) {
  check_shapes(params, inputs.rows());
  // Pad the batch to whole GEMM column panels so every sample goes through the
  // same kernel: a column's result then does not depend on its position in
  // the batch or on the batch size.
  const Eigen::Index n = inputs.cols();
  const Eigen::Index padded = (n + kColumnPanel - 1) / kColumnPanel * kColumnPanel;
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(inputs.rows(), padded);
  h.leftCols(n) = inputs;
  const std::size_t last = params.layers.size() - 1;
  for (std::size_t l = 0; l < last; ++l) {
    const auto& layer = params.layers[l];
    h = ((layer.weight * h).colwise() + layer.bias).cwiseMax(0.0);
  }
  const auto& out_layer = params.layers[last];
  Eigen::MatrixXd out = (out_layer.weight * h).colwise() + out_layer.bias;

  const int d = params.output_dim;
  GaussianOutput g;
  g.mean = out.topLeftCorner(d, n);
  g.logvar = out.bottomLeftCorner(d, n).unaryExpr([&](double raw) { return bound_logvar(raw, params.bounds); });
  return g;
}

double nll_loss(const Eigen::Ref<const Eigen::MatrixXd>& mean, const Eigen::Ref<const Eigen::MatrixXd>& logvar,
                const Eigen::Ref<const Eigen::MatrixXd>& target) {
  if (mean.rows() != target.rows() || mean.cols() != target.cols() || logvar.rows() != target.rows() ||
      logvar.cols() != target.cols()) {
    throw ShapeError("nll_loss operands differ in shape");
  }
  const double d = static_cast<double>(target.rows());
  const double n = static_cast<double>(target.cols());
  const auto sq = (target - mean).array().square();
  return ((sq * (-logvar.array()).exp() + logvar.array()).sum() / 2.0) / (d * n);
}

LossAndGradient backward(const MlpParams& params, const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                         const Eigen::Ref<const Eigen::MatrixXd>& targets) {
  check_shapes(params, inputs.rows());
  const int d = params.output_dim;
  if (targets.rows() != d || targets.cols() != inputs.cols()) throw ShapeError("target shape mismatch");

  const std::size_t n_layers = params.layers.size();
  // activations[l] is the input to layer l.
  std::vector<Eigen::MatrixXd> activations;
  activations.reserve(n_layers);
  activations.emplace_back(inputs);
  for (std::size_t l = 0; l + 1 < n_layers; ++l) {
    const auto& layer = params.layers[l];
    activations.emplace_back(((layer.weight * activations.back()).colwise() + layer.bias).cwiseMax(0.0));
  }
  const auto& out_layer = params.layers.back();
  const Eigen::MatrixXd out = (out_layer.weight * activations.back()).colwise() + out_layer.bias;

  const Eigen::Index batch = inputs.cols();
  const double scale = 1.0 / (static_cast<double>(d) * static_cast<double>(batch));
  const auto& b = params.bounds;

  Eigen::MatrixXd grad_out(2 * d, batch);
  double loss = 0.0;
  for (Eigen::Index j = 0; j < batch; ++j) {
    for (int i = 0; i < d; ++i) {
      const double mu = out(i, j);
      const double raw = out(d + i, j);
      const double upper = b.max - softplus(b.max - raw);
      const double lv = b.min + softplus(upper - b.min);
      const double inv_var = std::exp(-lv);
      const double resid = targets(i, j) - mu;
      loss += (resid * resid * inv_var + lv) / 2.0;
      grad_out(i, j) = -resid * inv_var * scale;
      const double dlv = (1.0 - resid * resid * inv_var) / 2.0 * scale;
      grad_out(d + i, j) = dlv * sigmoid(upper - b.min) * sigmoid(b.max - raw);
    }
  }

  LossAndGradient result;
  result.loss = loss * scale;
  result.gradient = MlpParams::zeros_like(params);

  Eigen::MatrixXd delta = std::move(grad_out);
  for (std::size_t l = n_layers; l-- > 0;) {
    auto& g = result.gradient.layers[l];
    g.weight.noalias() = delta * activations[l].transpose();
    g.bias = delta.rowwise().sum();
    if (l == 0) break;
    Eigen::MatrixXd upstream = params.layers[l].weight.transpose() * delta;
    // ReLU derivative: activations[l] is the post-ReLU output of layer l-1.
    delta = (activations[l].array() > 0.0).select(upstream, 0.0);
  }
  return result;
}

AdamState AdamState::zeros_like(const MlpParams& params) {
  AdamState s;
  const MlpParams z = MlpParams::zeros_like(params);
  s.first = z.layers;
  s.second = z.layers;
  return s;
}

void adam_step(MlpParams& params, const MlpParams& grads, AdamState& state, const AdamConfig& c) {
  if (grads.layers.size() != params.layers.size() || state.first.size() != params.layers.size()) {
    throw ShapeError("adam_step shape mismatch");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);

  auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
    if (p.size() != g.size() || p.size() != m.size()) throw ShapeError("adam_step shape mismatch");
    p.array() -= c.lr * c.weight_decay * p.array();
    m.array() = c.beta1 * m.array() + (1.0 - c.beta1) * g.array();
    v.array() = c.beta2 * v.array() + (1.0 - c.beta2) * g.array().square();
    p.array() -= c.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    update(params.layers[l].weight, grads.layers[l].weight, state.first[l].weight, state.second[l].weight);
    update(params.layers[l].bias, grads.layers[l].bias, state.first[l].bias, state.second[l].bias);
  }
}

double grad_check(const MlpParams& params, const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                  const Eigen::Ref<const Eigen::MatrixXd>& targets, const MlpParams& analytic,
                  const GradCheckOptions& options) {
  const std::size_t n = params.parameter_count();
  if (analytic.parameter_count() != n) throw ShapeError("gradient shape mismatch");

  std::vector<std::size_t> coords(n);
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (options.max_coords != 0 && options.max_coords < n) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  auto loss_at = [&](const MlpParams& p) {
    const auto g = forward(p, inputs);
    return nll_loss(g.mean, g.logvar, targets);
  };

  MlpParams probe = params;
  double worst = 0.0;
  for (const std::size_t i : coords) {
    const double original = probe.coord(i);
    probe.coord(i) = original + options.step;
    const double plus = loss_at(probe);
    probe.coord(i) = original - options.step;
    const double minus = loss_at(probe);
    probe.coord(i) = original;

    const double numeric = (plus - minus) / (2.0 * options.step);
    const double a = analytic.coord(i);
    const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-4);
    worst = std::max(worst, rel);
  }
  return worst;
}

double grad_check(const MlpParams& params, const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                  const Eigen::Ref<const Eigen::MatrixXd>& targets, const GradCheckOptions& options) {
  return grad_check(params, inputs, targets, backward(params, inputs, targets).gradient, options);
}

void write_model(std::ostream& out, const MlpParams& params) {
  out << kModelMagic << " layers=" << params.layers.size() << " output_dim=" << params.output_dim
      << " lv_min=" << format_real(params.bounds.min) << " lv_max=" << format_real(params.bounds.max) << '\n';
  std::string line;
  for (const auto& layer : params.layers) {
    out << "layer " << layer.weight.rows() << ' ' << layer.weight.cols() << '\n';
    for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
      line.clear();
      for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
        if (j) line += ',';
        line += format_real(layer.weight(i, j));
      }
      out << line << '\n';
    }
    line.clear();
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) {
      if (i) line += ',';
      line += format_real(layer.bias[i]);
    }
    out << line << '\n';
  }
}

MlpParams read_model(std::istream& in) {
  std::string line;
  if (!detail::read_line(in, line)) throw FormatError("missing model header");
  const auto fields = detail::split_spaces(line);
  if (fields.empty() || fields[0] != kModelMagic) throw FormatError("not a ugcem-model-v1 checkpoint");
  const long n_layers = detail::parse_integer(detail::header_field(fields, "layers"));
  MlpParams p;
  p.output_dim = static_cast<int>(detail::parse_integer(detail::header_field(fields, "output_dim")));
  p.bounds.min = detail::parse_real(detail::header_field(fields, "lv_min"));
  p.bounds.max = detail::parse_real(detail::header_field(fields, "lv_max"));
  if (n_layers <= 0 || p.output_dim <= 0) throw FormatError("invalid model header");

  for (long l = 0; l < n_layers; ++l) {
    if (!detail::read_line(in, line)) throw FormatError("truncated model: missing layer header");
    const auto lf = detail::split_spaces(line);
    if (lf.size() != 3 || lf[0] != "layer") throw FormatError("malformed layer header '" + line + "'");
    const long rows = detail::parse_integer(lf[1]);
    const long cols = detail::parse_integer(lf[2]);
    if (rows <= 0 || cols <= 0) throw FormatError("invalid layer shape");
    if (!p.layers.empty() && p.layers.back().weight.rows() != cols) throw FormatError("layer shapes do not chain");
    DenseLayer layer{Eigen::MatrixXd(rows, cols), Eigen::VectorXd(rows)};
    for (long i = 0; i < rows; ++i) {
      if (!detail::read_line(in, line)) throw FormatError("truncated model weights");
      const auto v = detail::parse_reals(line);
      if (static_cast<long>(v.size()) != cols) throw FormatError("weight row width mismatch");
      for (long j = 0; j < cols; ++j) layer.weight(i, j) = v[static_cast<std::size_t>(j)];
    }
    if (!detail::read_line(in, line)) throw FormatError("truncated model biases");
    const auto v = detail::parse_reals(line);
    if (static_cast<long>(v.size()) != rows) throw FormatError("bias width mismatch");
    for (long i = 0; i < rows; ++i) layer.bias[i] = v[static_cast<std::size_t>(i)];
    p.layers.push_back(std::move(layer));
  }
  if (p.layers.back().weight.rows() != 2 * p.output_dim) throw FormatError("output layer does not match output_dim");
  return p;
}

void save_model(const MlpParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MissingInputError("cannot open '" + path.string() + "' for writing");
  write_model(out, params);
}

MlpParams load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open model '" + path.string() + "'");
  return read_model(in);
}

}  // namespace ugcem
