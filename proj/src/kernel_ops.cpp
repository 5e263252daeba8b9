#include "geoformer/kernel_ops.hpp"

#include <stdexcept>

namespace geoformer {

void KernelMatrixCache::refresh(const SensorGrid& grid, double rho_now,
                                KernelFamily family_now) {
  if (rho == rho_now && family == family_now && psi.rows() == grid.dist.rows()) return;
  rho = rho_now;
  family = family_now;
  psi = correlation_matrix(grid, rho_now, family_now);
  dpsi_drho = correlation_matrix_grad_rho(grid, rho_now, family_now);
}

Tensor kernel_bias(const Tensor& theta_rho, const Tensor& theta_lambda,
                   const SensorGrid& grid, KernelFamily family, KernelMatrixCache& cache) {
  if (theta_rho.size() != 1 || theta_lambda.size() != 1)
    throw std::invalid_argument("kernel_bias: theta_rho and theta_lambda must be scalars");
  const int n = grid.n();
  const double rho = softplus(theta_rho.value());
  const double lambda = softplus(theta_lambda.value());
  cache.refresh(grid, rho, family);

  Tensor out = make_op_tensor({n, n}, "kernel_bias", {theta_rho, theta_lambda});
  Eigen::Map<RowMat>(out.node()->data.data(), n, n) = lambda * cache.psi;

  if (out.requires_grad()) {
    // Snapshot the matrices: the cache may be refreshed by a later forward
    // before this graph's backward runs.
    out.node()->backward_fn = [n, lambda, psi = cache.psi,
                               dpsi = cache.dpsi_drho](detail::Node& self) {
      Eigen::Map<const RowMat> g(self.grad.data(), n, n);
      auto& p_rho = *self.parents[0];
      auto& p_lambda = *self.parents[1];
      if (p_rho.requires_grad) {
        p_rho.ensure_grad();
        const double sum_dpsi = g.cwiseProduct(dpsi).sum();
        p_rho.grad[0] += lambda * sum_dpsi * softplus_grad(p_rho.data[0]);
      }
      if (p_lambda.requires_grad) {
        p_lambda.ensure_grad();
        const double sum_psi = g.cwiseProduct(psi).sum();
        p_lambda.grad[0] += sum_psi * softplus_grad(p_lambda.data[0]);
      }
    };
  }
  return out;
}

}  // namespace geoformer
