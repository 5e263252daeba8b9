#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <vector>

namespace geoformer {

/// Stationary isotropic correlation families. The half-integer Matern
/// smoothness orders have closed forms; Gaussian is the nu -> inf limit.
enum class KernelFamily { Exponential, Matern15, Matern25, Gaussian };

std::string to_string(KernelFamily family);
KernelFamily kernel_family_from_string(const std::string& name);

/// softplus(x) = log(1 + e^x), overflow-safe for large |x|.
double softplus(double x);
/// Inverse of softplus on (0, inf).
double softplus_inv(double y);
/// d/dx softplus(x) = sigmoid(x).
double softplus_grad(double x);

/// Correlation Psi(d; rho) of the given family.
///   Exponential: exp(-d/rho)
///   Matern15:    (1 + sqrt(3) d/rho) exp(-sqrt(3) d/rho)
///   Matern25:    (1 + sqrt(5) d/rho + 5 d^2/(3 rho^2)) exp(-sqrt(5) d/rho)
///   Gaussian:    exp(-d^2 / (2 rho^2))
/// Psi(0) = 1 and Psi is non-increasing in d. Throws std::domain_error for
/// d < 0 or rho <= 0.
double matern_correlation(double d, double rho, KernelFamily family);

/// Analytic d/drho of matern_correlation. Zero at d = 0 for every family.
double matern_correlation_grad_rho(double d, double rho, KernelFamily family);

/// Fixed sensor locations in [0,1]^2 with the precomputed Euclidean
/// distance matrix used by attention biases, simulation and Kriging.
struct SensorGrid {
  std::vector<std::array<double, 2>> locations;
  Eigen::MatrixXd dist;  // n x n, symmetric, zero diagonal

  int n() const { return static_cast<int>(locations.size()); }

  static SensorGrid from_locations(std::vector<std::array<double, 2>> locations);
  /// side x side lattice of cell centers ((i+0.5)/side, (j+0.5)/side).
  static SensorGrid lattice(int side);
};

/// Pairwise Euclidean distances. Throws on empty input or non-finite
/// coordinates.
Eigen::MatrixXd pairwise_distances(const std::vector<std::array<double, 2>>& locations);

/// Kernel family plus raw (unconstrained) parameters. Effective values are
/// rho = softplus(theta_rho) > 0 and lambda = softplus(theta_lambda) > 0.
/// Defaults give effective rho = 0.2 and lambda = 1.
struct KernelSpec {
  KernelFamily family = KernelFamily::Matern15;
  double theta_rho = -1.5077718009705199;   // softplus_inv(0.2)
  double theta_lambda = 0.54132485461291802;  // softplus_inv(1.0)
  double sigma2 = 1.0;  // marginal variance; fixed, used by simulation/Kriging

  double rho() const { return softplus(theta_rho); }
  double lambda() const { return softplus(theta_lambda); }

  static KernelSpec from_effective(KernelFamily family, double rho, double lambda,
                                   double sigma2 = 1.0);
};

/// n x n matrix of Psi(d_ij; rho) for all grid pairs.
Eigen::MatrixXd correlation_matrix(const SensorGrid& grid, double rho, KernelFamily family);

/// Elementwise d/drho of correlation_matrix.
Eigen::MatrixXd correlation_matrix_grad_rho(const SensorGrid& grid, double rho,
                                            KernelFamily family);

/// lambda * Psi(d_ij; rho): the additive attention bias of the geo variant,
/// evaluated at the spec's effective parameters. The autodiff-tracked
/// version lives in kernel_ops.hpp; this one is for plain numeric use.
Eigen::MatrixXd kernel_bias_matrix(const SensorGrid& grid, const KernelSpec& spec);

}  // namespace geoformer
