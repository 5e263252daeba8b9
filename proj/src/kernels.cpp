#include "geoformer/kernels.hpp"

#include <cmath>
#include <stdexcept>

namespace geoformer {

std::string to_string(KernelFamily family) {
  switch (family) {
    case KernelFamily::Exponential: return "exponential";
    case KernelFamily::Matern15: return "matern15";
    case KernelFamily::Matern25: return "matern25";
    case KernelFamily::Gaussian: return "gaussian";
  }
  throw std::logic_error("unknown kernel family");
}

KernelFamily kernel_family_from_string(const std::string& name) {
  if (name == "exponential") return KernelFamily::Exponential;
  if (name == "matern15") return KernelFamily::Matern15;
  if (name == "matern25") return KernelFamily::Matern25;
  if (name == "gaussian") return KernelFamily::Gaussian;
  throw std::invalid_argument("unknown kernel family '" + name +
                              "' (expected exponential|matern15|matern25|gaussian)");
}

double softplus(double x) {
  // log1p(e^x) with the linear branch for large x to avoid overflow
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double softplus_inv(double y) {
  if (!(y > 0.0)) throw std::domain_error("softplus_inv requires y > 0");
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

double softplus_grad(double x) { return 1.0 / (1.0 + std::exp(-x)); }

namespace {

constexpr double kSqrt3 = 1.7320508075688772;
constexpr double kSqrt5 = 2.2360679774997896;

void check_kernel_args(double d, double rho) {
  if (!(rho > 0.0) || !std::isfinite(rho))
    throw std::domain_error("kernel range rho must be positive and finite, got " +
                            std::to_string(rho));
  if (d < 0.0 || !std::isfinite(d))
    throw std::domain_error("kernel distance must be finite and >= 0, got " +
                            std::to_string(d));
}

}  // namespace

double matern_correlation(double d, double rho, KernelFamily family) {
  check_kernel_args(d, rho);
  const double u = d / rho;
  switch (family) {
    case KernelFamily::Exponential:
      return std::exp(-u);
    case KernelFamily::Matern15: {
      const double a = kSqrt3 * u;
      return (1.0 + a) * std::exp(-a);
    }
    case KernelFamily::Matern25: {
      const double a = kSqrt5 * u;
      return (1.0 + a + a * a / 3.0) * std::exp(-a);
    }
    case KernelFamily::Gaussian:
      return std::exp(-0.5 * u * u);
  }
  throw std::logic_error("unknown kernel family");
}

double matern_correlation_grad_rho(double d, double rho, KernelFamily family) {
  check_kernel_args(d, rho);
  const double u = d / rho;
  switch (family) {
    case KernelFamily::Exponential:
      // (d / rho^2) exp(-d/rho)
      return u / rho * std::exp(-u);
    case KernelFamily::Matern15: {
      // d/drho (1 + a) e^{-a} with a = sqrt(3) d / rho, da/drho = -a/rho:
      // = a^2 / rho * e^{-a}
      const double a = kSqrt3 * u;
      return a * a / rho * std::exp(-a);
    }
    case KernelFamily::Matern25: {
      // d/drho (1 + a + a^2/3) e^{-a} = (a^2/3)(1 + a)/rho * e^{-a}
      const double a = kSqrt5 * u;
      return a * a / 3.0 * (1.0 + a) / rho * std::exp(-a);
    }
    case KernelFamily::Gaussian:
      // (d^2 / rho^3) exp(-d^2 / (2 rho^2))
      return u * u / rho * std::exp(-0.5 * u * u);
  }
  throw std::logic_error("unknown kernel family");
}

Eigen::MatrixXd pairwise_distances(const std::vector<std::array<double, 2>>& locations) {
  const auto n = static_cast<Eigen::Index>(locations.size());
  if (n == 0) throw std::invalid_argument("pairwise_distances: need at least one location");
  for (const auto& p : locations)
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]))
      throw std::invalid_argument("pairwise_distances: non-finite coordinate");
  Eigen::MatrixXd dist(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    dist(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double dx = locations[i][0] - locations[j][0];
      const double dy = locations[i][1] - locations[j][1];
      const double d = std::sqrt(dx * dx + dy * dy);
      dist(i, j) = d;
      dist(j, i) = d;
    }
  }
  return dist;
}

SensorGrid SensorGrid::from_locations(std::vector<std::array<double, 2>> locations) {
  SensorGrid grid;
  grid.dist = pairwise_distances(locations);
  grid.locations = std::move(locations);
  return grid;
}

SensorGrid SensorGrid::lattice(int side) {
  if (side < 1) throw std::invalid_argument("lattice side must be >= 1");
  std::vector<std::array<double, 2>> pts;
  pts.reserve(static_cast<size_t>(side) * side);
  for (int j = 0; j < side; ++j)
    for (int i = 0; i < side; ++i)
      pts.push_back({(i + 0.5) / side, (j + 0.5) / side});
  return from_locations(std::move(pts));
}

KernelSpec KernelSpec::from_effective(KernelFamily family, double rho, double lambda,
                                      double sigma2) {
  KernelSpec spec;
  spec.family = family;
  spec.theta_rho = softplus_inv(rho);
  spec.theta_lambda = softplus_inv(lambda);
  spec.sigma2 = sigma2;
  return spec;
}

Eigen::MatrixXd correlation_matrix(const SensorGrid& grid, double rho, KernelFamily family) {
  const Eigen::Index n = grid.dist.rows();
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = matern_correlation(grid.dist(i, j), rho, family);
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return out;
}

Eigen::MatrixXd correlation_matrix_grad_rho(const SensorGrid& grid, double rho,
                                            KernelFamily family) {
  const Eigen::Index n = grid.dist.rows();
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = matern_correlation_grad_rho(grid.dist(i, j), rho, family);
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return out;
}

Eigen::MatrixXd kernel_bias_matrix(const SensorGrid& grid, const KernelSpec& spec) {
  return spec.lambda() * correlation_matrix(grid, spec.rho(), spec.family);
}

}  // namespace geoformer
