#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <vector>

namespace ugcem {

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out

  friend bool operator==(const DenseLayer& a, const DenseLayer& b) {
    return a.weight == b.weight && a.bias == b.bias;
  }
};

/// Soft bounds on the predicted log-variance:
///   lv = max - softplus(max - raw);  lv = min + softplus(lv - min)
struct LogVarBounds {
  double min = -10.0;
  double max = 4.0;

  friend bool operator==(const LogVarBounds&, const LogVarBounds&) = default;
};

/// Feed-forward ReLU network whose final linear layer emits a Gaussian mean
/// head and a raw log-variance head, each of size `output_dim`.
struct MlpParams {
  std::vector<DenseLayer> layers;
  int output_dim = 0;
  LogVarBounds bounds;

  int input_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().weight.cols()); }
  std::size_t parameter_count() const;
  bool all_finite() const;

  /// Weights ~ N(0, 2/fan_in) truncated at two standard deviations, biases zero.
  static MlpParams init(int input_dim, const std::vector<int>& hidden, int output_dim, std::mt19937_64& rng);
  /// Same shapes as `like`, every entry zero.
  static MlpParams zeros_like(const MlpParams& like);
  static MlpParams zeros(int input_dim, const std::vector<int>& hidden, int output_dim);

  /// Flat view over all parameters: layer by layer, weights (column-major) then bias.
  double& coord(std::size_t i);
  double coord(std::size_t i) const;

  friend bool operator==(const MlpParams& a, const MlpParams& b) {
    return a.layers == b.layers && a.output_dim == b.output_dim && a.bounds == b.bounds;
  }
};

struct GaussianOutput {
  Eigen::MatrixXd mean;    // output_dim x batch
  Eigen::MatrixXd logvar;  // output_dim x batch, bounded
};

double softplus(double x);
double bound_logvar(double raw, const LogVarBounds& b);

/// Columns of `inputs` are samples. Throws ShapeError on dimension mismatch.
GaussianOutput forward(const MlpParams& params, const Eigen::Ref<const Eigen::MatrixXd>& inputs);

/// Batch mean of (1/d) sum_i [(t_i - mu_i)^2 exp(-lv_i) + lv_i] / 2.
double nll_loss(const Eigen::Ref<const Eigen::MatrixXd>& mean, const Eigen::Ref<const Eigen::MatrixXd>& logvar,
                const Eigen::Ref<const Eigen::MatrixXd>& target);

struct LossAndGradient {
  double loss = 0.0;
  MlpParams gradient;
};

/// Exact gradient of the batch-mean nll_loss through the log-variance bounds.
LossAndGradient backward(const MlpParams& params, const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                         const Eigen::Ref<const Eigen::MatrixXd>& targets);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-5;
};

struct AdamState {
  std::vector<DenseLayer> first;
  std::vector<DenseLayer> second;
  long step = 0;

  static AdamState zeros_like(const MlpParams& params);
};

/// Decoupled weight decay (p -= lr*wd*p) followed by a bias-corrected Adam step.
void adam_step(MlpParams& params, const MlpParams& grads, AdamState& state, const AdamConfig& config = {});

struct GradCheckOptions {
  double step = 1e-5;
  /// 0 checks every coordinate; otherwise a seeded random subset of this size.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

/// Max relative error |a - n| / max(|a| + |n|, 1e-4) between `analytic` and
/// central differences of nll_loss(forward(params)).
double grad_check(const MlpParams& params, const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                  const Eigen::Ref<const Eigen::MatrixXd>& targets, const MlpParams& analytic,
                  const GradCheckOptions& options = {});

/// grad_check against this module's own backward().
double grad_check(const MlpParams& params, const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                  const Eigen::Ref<const Eigen::MatrixXd>& targets, const GradCheckOptions& options = {});

void write_model(std::ostream& out, const MlpParams& params);
MlpParams read_model(std::istream& in);
void save_model(const MlpParams& params, const std::filesystem::path& path);
MlpParams load_model(const std::filesystem::path& path);

}  // namespace ugcem
