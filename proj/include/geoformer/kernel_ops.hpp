#pragma once

#include "geoformer/kernels.hpp"
#include "geoformer/tensor.hpp"

namespace geoformer {

/// Correlation matrix and its rho-derivative, memoized on the effective rho.
/// The bias op consults this before rebuilding, so the O(n^2) kernel
/// evaluation runs once per optimizer step rather than once per layer.
struct KernelMatrixCache {
  double rho = -1.0;
  KernelFamily family = KernelFamily::Matern15;
  Eigen::MatrixXd psi;
  Eigen::MatrixXd dpsi_drho;

  void refresh(const SensorGrid& grid, double rho_now, KernelFamily family_now);
};

/// Tape-tracked attention bias lambda * Psi(d_ij; rho) as an [n,n] tensor,
/// with rho = softplus(theta_rho) and lambda = softplus(theta_lambda).
/// theta_rho and theta_lambda must be scalar tensors. Gradients flow to both
/// thetas through the softplus and the analytic kernel derivative.
Tensor kernel_bias(const Tensor& theta_rho, const Tensor& theta_lambda,
                   const SensorGrid& grid, KernelFamily family, KernelMatrixCache& cache);

}  // namespace geoformer
