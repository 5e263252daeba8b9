#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "geoformer/kernel_ops.hpp"
#include "geoformer/kernels.hpp"
#include "geoformer/tensor.hpp"

namespace geoformer {

enum class ModelVariant { Geo, Vanilla };

std::string to_string(ModelVariant v);
ModelVariant model_variant_from_string(const std::string& s);

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int lookback = 12;
  double dropout_p = 0.1;
  ModelVariant variant = ModelVariant::Geo;
  KernelSpec kernel;  // initial kernel parameters; unused by Vanilla
  bool share_kernel_across_heads = true;

  int d_k() const { return d_model / n_heads; }
  void validate() const;
};

/// Post-softmax attention matrices of one encoder layer plus the share of the
/// pre-softmax logit mass contributed by the distance bias in that layer.
struct AttentionRecord {
  std::vector<Eigen::MatrixXd> weights;  // n_heads matrices, each N x N
  double geo_bias_share = 0.0;           // mean|lambda*Psi| / (mean|QK^T/sqrt(dk)| + mean|lambda*Psi|)
};

/// Transformer encoder over sensor tokens. Each token is one sensor; its
/// feature vector is the L-step history, so attention mixes space and the
/// embedding/feed-forward layers mix time. The Geo variant adds a learnable
/// Matern bias lambda * Psi(d_ij; rho) to every pre-softmax logit; the
/// Vanilla variant instead adds a learnable per-sensor positional embedding.
class GeoformerModel {
 public:
  GeoformerModel(ModelConfig config, SensorGrid grid, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  const SensorGrid& grid() const { return grid_; }
  int n_sites() const { return static_cast<int>(grid_.n()); }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  const Parameter* find_parameter(const std::string& name) const;
  Parameter* find_parameter(const std::string& name);
  /// Kernel parameters are identified by name so the optimizer can exempt
  /// them from weight decay.
  static bool is_kernel_parameter(const std::string& name);

  /// Effective kernel parameters (softplus of the raw thetas). In per-head
  /// mode these are means over heads; for Vanilla both are 0.
  double rho() const;
  double lambda() const;
  /// Current bias matrix lambda * Psi (zero matrix for Vanilla).
  Eigen::MatrixXd kernel_bias_matrix_now() const;

  /// Forward pass. `windows` is [N, L] for a single window or [B, N, L] for a
  /// batch; the result is [N, 1] or [B, N, 1]. The graph is taped whenever
  /// grad mode is on. `records` (optional) receives one AttentionRecord per
  /// layer, taken from the first window of the batch.
  Tensor forward(const Tensor& windows, DropoutMode mode, std::mt19937_64& rng,
                 std::vector<AttentionRecord>* records = nullptr) const;

  /// Stacks windows (each N x L) into a [B, N, L] input tensor.
  static Tensor stack_windows(const std::vector<Eigen::MatrixXd>& windows);

  /// Deterministic eval-mode point forecast for one window.
  Eigen::VectorXd predict(const Eigen::MatrixXd& window) const;
  /// Eval-mode forecasts for a batch; row b is the prediction for windows[b].
  Eigen::MatrixXd predict_batch(const std::vector<Eigen::MatrixXd>& windows) const;

  /// Eval-mode attention maps for one window, one record per layer.
  std::vector<AttentionRecord> attention_records(const Eigen::MatrixXd& window) const;

  /// MC-dropout predictive distribution: n_mc stochastic passes, per-sensor
  /// sample mean and unbiased variance, plus the nugget floor. n_mc must be
  /// at least 2.
  void predict_distribution(const Eigen::MatrixXd& window, int n_mc, std::mt19937_64& rng,
                            Eigen::VectorXd& mean, Eigen::VectorXd& variance) const;
  /// Batched variant: row b of mean/variance is the distribution for
  /// windows[b]. Each stochastic pass runs over the whole batch with
  /// elementwise masks, so samples stay independent per window.
  void predict_distribution_batch(const std::vector<Eigen::MatrixXd>& windows, int n_mc,
                                  std::mt19937_64& rng, Eigen::MatrixXd& mean,
                                  Eigen::MatrixXd& variance) const;

  /// Recursive multi-horizon forecast: row h-1 is the (h)-step-ahead point
  /// forecast, each step feeding the previous prediction back as the newest
  /// history column.
  Eigen::MatrixXd recursive_forecast(const Eigen::MatrixXd& window, int horizon) const;
  /// Batched recursion over many windows: result[h-1] has one row per window.
  std::vector<Eigen::MatrixXd> recursive_forecast_batch(
      const std::vector<Eigen::MatrixXd>& windows, int horizon) const;

  /// Additive variance floor for predict_distribution, normally set to the
  /// training-residual variance after fitting.
  void set_noise_floor(double sigma_eps2);
  double noise_floor() const { return noise_floor_; }

  /// Raw parameter values in registry order (for checkpointing).
  std::vector<Eigen::VectorXd> snapshot_parameters() const;
  void restore_parameters(const std::vector<Eigen::VectorXd>& snapshot);

 private:
  struct LayerParams {
    std::vector<Tensor> wq, wk, wv;  // per head, [d_model, d_k]
    Tensor wo, bo;                   // [d_model, d_model], [d_model]
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };

  Tensor register_param(const std::string& name, Tensor t);
  std::vector<Tensor> head_bias_tensors() const;  // tracked lambda*Psi per head (empty for Vanilla)

  ModelConfig config_;
  SensorGrid grid_;

  Tensor embed_w_, embed_b_;
  Tensor pos_e_;  // Vanilla only
  std::vector<LayerParams> layers_;
  Tensor final_ln_g_, final_ln_b_;
  Tensor head_w_, head_b_;
  std::vector<Tensor> theta_rho_, theta_lambda_;  // size 1 (shared) or n_heads

  mutable std::vector<KernelMatrixCache> kernel_caches_;
  double noise_floor_ = 0.0;
  std::vector<Parameter> params_;
};

}  // namespace geoformer
