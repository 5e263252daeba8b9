#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "geoformer/kernels.hpp"

namespace geoformer {

double normal_pdf(double z);
double normal_cdf(double z);

/// Forecasts of one model at one horizon, aligned with their targets.
/// variances is empty (0x0) for point-only forecasters.
struct ForecastResult {
  std::string model_name;
  int horizon = 1;
  Eigen::MatrixXd predictions;  // t_test x n
  Eigen::MatrixXd targets;      // t_test x n
  Eigen::MatrixXd variances;    // t_test x n or empty

  bool has_variances() const { return variances.size() > 0; }
  Eigen::MatrixXd residuals() const { return targets - predictions; }
  /// Throws std::invalid_argument on shape disagreement or non-positive
  /// variances.
  void validate() const;
};

double rmse(const ForecastResult& result);
double mae(const ForecastResult& result);

/// Closed-form CRPS of a Gaussian forecast N(mu, sigma^2) against outcome y:
/// sigma * [z(2*Phi(z) - 1) + 2*phi(z) - 1/sqrt(pi)], z = (y-mu)/sigma.
/// Throws std::domain_error for sigma <= 0.
double crps_gaussian(double y, double mu, double sigma);

/// Mean CRPS over all (t, site); requires variances.
double crps_mean(const ForecastResult& result);

struct DMResult {
  double statistic = 0.0;
  double p_two_sided = 1.0;
  /// P(Z <= statistic): small when the first error series is more accurate.
  double p_one_sided = 1.0;
  int lag = 0;
};

/// Diebold-Mariano test on squared-error loss differentials d_t = e1_t^2 -
/// e2_t^2 with a Newey-West (Bartlett) long-run variance at the given lag
/// (use horizon-1; 0 for one-step forecasts). Requires equal lengths >= 10.
/// Throws std::domain_error("degenerate loss differential") when the
/// differential series has zero variance.
DMResult diebold_mariano(const Eigen::VectorXd& e1, const Eigen::VectorXd& e2, int lag = 0);

/// PIT values Phi((y - mu)/sigma) pooled over all (t, site), row-major.
Eigen::VectorXd pit_values(const ForecastResult& result);

struct PitSummary {
  std::vector<double> histogram;  // fraction of mass per equal-width bin
  double ks = 0.0;                // Kolmogorov-Smirnov distance to U[0,1]
};

PitSummary pit_uniformity(const Eigen::VectorXd& pit, int bins = 10);

/// Inverse-distance weights w_ij = 1/d_ij, zero diagonal, no row
/// normalization.
struct SpatialWeights {
  Eigen::MatrixXd w;
  static SpatialWeights inverse_distance(const SensorGrid& grid);
};

/// Global Moran's I of one residual snapshot. Throws
/// std::domain_error("zero residual variance") on a constant vector.
double morans_i(const Eigen::VectorXd& residual, const SpatialWeights& weights);

/// Mean of per-snapshot Moran's I over the rows of a t x n residual matrix.
double mean_morans_i(const Eigen::MatrixXd& residuals, const SpatialWeights& weights);

struct VariogramBin {
  double lo = 0.0;
  double hi = 0.0;
  long pair_count = 0;
  double value = 0.0;
  bool has_value = false;
};

/// Matheron estimator: gamma(h) = mean over site pairs in the bin and over
/// time of 0.5*(Z_i - Z_j)^2. field is t x n; self-pairs are excluded.
std::vector<VariogramBin> empirical_variogram(const Eigen::MatrixXd& field,
                                              const SensorGrid& grid,
                                              const std::vector<double>& edges);

}  // namespace geoformer
