#pragma once

#include <Eigen/Dense>
#include <memory>
#include <utility>
#include <vector>

#include "geoformer/kernels.hpp"

namespace geoformer {

/// Generator settings for the separable Matern x AR(1) field with nugget.
struct SimConfig {
  int grid_side = 20;
  double nu = 1.5;        // smoothness; one of 0.5, 1.5, 2.5, inf (Gaussian)
  double rho_true = 0.2;
  double sigma2 = 1.0;
  double phi_t = 0.8;
  double nugget = 0.05;   // sigma_eps^2
  int t_steps = 2000;
  int n_replicates = 50;
  unsigned int seed = 1;

  KernelFamily family() const;
  /// Throws std::invalid_argument naming the violated invariant.
  void validate() const;
};

KernelFamily family_from_nu(double nu);
double nu_from_family(KernelFamily family);

/// One simulated replicate: observations Y = latent F + nugget noise.
struct StDataset {
  SensorGrid grid;
  Eigen::MatrixXd observations;  // t_steps x n
  Eigen::MatrixXd latent;        // t_steps x n, nugget-free field
  SimConfig config;
  int replicate_id = 0;
};

/// Lower Cholesky factor of a symmetric PSD matrix, retrying with an
/// escalating diagonal jitter (1e-10*scale, x10 steps, up to 1e-6*scale).
/// Throws std::runtime_error with condition diagnostics if all fail.
Eigen::MatrixXd cholesky_with_jitter(const Eigen::MatrixXd& a, double scale);

/// All replicates of the configured process. Replicate r is seeded from
/// (config.seed, r), so subsets are reproducible independently.
std::vector<StDataset> simulate(const SimConfig& config);
StDataset simulate_replicate(const SimConfig& config, int replicate_id);

/// Correlogram bin: average sample correlation (over time) of site pairs
/// whose separation falls in [lo, hi). Self-pairs land in the bin holding 0.
struct CorrelogramBin {
  double lo = 0.0;
  double hi = 0.0;
  long pair_count = 0;
  double value = 0.0;
  bool has_value = false;  // false = empty bin, flagged rather than zeroed
};

std::vector<CorrelogramBin> empirical_spatial_correlation(const StDataset& dataset,
                                                          const std::vector<double>& edges);

/// One-step-ahead supervised windows over a dataset. Window w pairs the
/// lookback block ending at targets[w]-1 with the observation row at
/// targets[w]; the window matrix is n x lookback, oldest column first.
class WindowSet {
 public:
  WindowSet() = default;
  WindowSet(std::shared_ptr<const Eigen::MatrixXd> observations, std::vector<int> targets,
            int lookback);

  int count() const { return static_cast<int>(targets_.size()); }
  int lookback() const { return lookback_; }
  int sites() const { return observations_ ? static_cast<int>(observations_->cols()) : 0; }
  int target_time(int w) const { return targets_.at(w); }

  Eigen::MatrixXd window_matrix(int w) const;  // n x lookback
  Eigen::VectorXd target_vector(int w) const;  // n

 private:
  std::shared_ptr<const Eigen::MatrixXd> observations_;
  std::vector<int> targets_;
  int lookback_ = 0;
};

/// Chronological split: training targets [lookback, t_train-1], test targets
/// [t_train, t_train+t_test-1]. Requires t_train > lookback and
/// t_train + t_test <= t_steps; throws std::invalid_argument otherwise.
std::pair<WindowSet, WindowSet> split(const StDataset& dataset, int t_train, int t_test,
                                      int lookback);

}  // namespace geoformer
