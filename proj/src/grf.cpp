#include "geoformer/grf.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

namespace geoformer {

KernelFamily family_from_nu(double nu) {
  if (nu == 0.5) return KernelFamily::Exponential;
  if (nu == 1.5) return KernelFamily::Matern15;
  if (nu == 2.5) return KernelFamily::Matern25;
  if (std::isinf(nu)) return KernelFamily::Gaussian;
  throw std::invalid_argument("nu must be 0.5, 1.5, 2.5 or inf; got " + std::to_string(nu));
}

double nu_from_family(KernelFamily family) {
  switch (family) {
    case KernelFamily::Exponential: return 0.5;
    case KernelFamily::Matern15: return 1.5;
    case KernelFamily::Matern25: return 2.5;
    case KernelFamily::Gaussian: return std::numeric_limits<double>::infinity();
  }
  throw std::logic_error("unreachable");
}

KernelFamily SimConfig::family() const { return family_from_nu(nu); }

void SimConfig::validate() const {
  if (grid_side < 2) throw std::invalid_argument("grid_side must be >= 2");
  if (!(std::abs(phi_t) < 1.0)) throw std::invalid_argument("|phi_t| must be < 1");
  if (!(rho_true > 0.0)) throw std::invalid_argument("rho_true must be > 0");
  if (nugget < 0.0) throw std::invalid_argument("nugget must be >= 0");
  if (sigma2 < 0.0) throw std::invalid_argument("sigma2 must be >= 0");
  if (t_steps < 1) throw std::invalid_argument("t_steps must be >= 1");
  if (n_replicates < 1) throw std::invalid_argument("n_replicates must be >= 1");
  family_from_nu(nu);  // throws on unsupported smoothness
}

Eigen::MatrixXd cholesky_with_jitter(const Eigen::MatrixXd& a, double scale) {
  if (a.rows() != a.cols()) throw std::invalid_argument("cholesky: non-square input");
  const double base = scale > 0.0 ? scale : 1.0;
  for (double jitter = 0.0; jitter <= 1e-6 * base;
       jitter = jitter == 0.0 ? 1e-10 * base : jitter * 10.0) {
    Eigen::MatrixXd work = a;
    work.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(work);
    if (llt.info() == Eigen::Success) return llt.matrixL();
  }
  std::ostringstream os;
  os << "Cholesky failed after max jitter 1e-6*" << base << "; matrix " << a.rows() << "x"
     << a.cols() << ", diag range [" << a.diagonal().minCoeff() << ", "
     << a.diagonal().maxCoeff() << "], min eigenvalue "
     << Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(a).eigenvalues().minCoeff();
  throw std::runtime_error(os.str());
}

StDataset simulate_replicate(const SimConfig& config, int replicate_id) {
  config.validate();
  StDataset ds;
  ds.grid = SensorGrid::lattice(config.grid_side);
  ds.config = config;
  ds.replicate_id = replicate_id;
  const int n = ds.grid.n();
  const int t_steps = config.t_steps;

  std::seed_seq seq{config.seed, static_cast<unsigned int>(replicate_id)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> gauss(0.0, 1.0);

  ds.latent = Eigen::MatrixXd::Zero(t_steps, n);
  if (config.sigma2 > 0.0) {
    const Eigen::MatrixXd sigma_s =
        config.sigma2 * correlation_matrix(ds.grid, config.rho_true, config.family());
    const Eigen::MatrixXd chol = cholesky_with_jitter(sigma_s, config.sigma2);
    const double innov = std::sqrt(1.0 - config.phi_t * config.phi_t);
    Eigen::VectorXd z(n), f(n);
    for (int t = 0; t < t_steps; ++t) {
      for (int i = 0; i < n; ++i) z[i] = gauss(rng);
      if (t == 0)
        f = chol * z;
      else
        f = config.phi_t * f + innov * (chol * z);
      ds.latent.row(t) = f.transpose();
    }
  }

  ds.observations = ds.latent;
  if (config.nugget > 0.0) {
    const double sd = std::sqrt(config.nugget);
    for (int t = 0; t < t_steps; ++t)
      for (int i = 0; i < n; ++i) ds.observations(t, i) += sd * gauss(rng);
  }
  return ds;
}

std::vector<StDataset> simulate(const SimConfig& config) {
  config.validate();
  std::vector<StDataset> out;
  out.reserve(config.n_replicates);
  for (int r = 0; r < config.n_replicates; ++r) out.push_back(simulate_replicate(config, r));
  return out;
}

std::vector<CorrelogramBin> empirical_spatial_correlation(const StDataset& dataset,
                                                          const std::vector<double>& edges) {
  if (edges.size() < 3) throw std::invalid_argument("need at least 2 distance bins");
  for (size_t k = 1; k < edges.size(); ++k)
    if (!(edges[k] > edges[k - 1]))
      throw std::invalid_argument("bin edges must be strictly increasing");
  const auto t_steps = dataset.observations.rows();
  if (t_steps < 100) throw std::invalid_argument("need t_steps >= 100 for stable correlations");

  const int n = static_cast<int>(dataset.observations.cols());
  Eigen::MatrixXd centered = dataset.observations;
  centered.rowwise() -= centered.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(t_steps - 1);
  const Eigen::VectorXd sd = cov.diagonal().cwiseSqrt();

  std::vector<CorrelogramBin> bins(edges.size() - 1);
  std::vector<double> sums(bins.size(), 0.0);
  for (size_t k = 0; k < bins.size(); ++k) {
    bins[k].lo = edges[k];
    bins[k].hi = edges[k + 1];
  }
  auto bin_of = [&](double d) -> int {
    if (d < edges.front() || d > edges.back()) return -1;
    for (size_t k = 1; k < edges.size(); ++k)
      if (d < edges[k] || k + 1 == edges.size()) return static_cast<int>(k) - 1;
    return -1;
  };
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      const int k = bin_of(dataset.grid.dist(i, j));
      if (k < 0) continue;
      const double denom = sd[i] * sd[j];
      const double corr = i == j ? 1.0 : (denom > 0.0 ? cov(i, j) / denom : 0.0);
      sums[static_cast<size_t>(k)] += corr;
      ++bins[static_cast<size_t>(k)].pair_count;
    }
  }
  for (size_t k = 0; k < bins.size(); ++k) {
    if (bins[k].pair_count > 0) {
      bins[k].value = sums[k] / static_cast<double>(bins[k].pair_count);
      bins[k].has_value = true;
    }
  }
  return bins;
}

WindowSet::WindowSet(std::shared_ptr<const Eigen::MatrixXd> observations,
                     std::vector<int> targets, int lookback)
    : observations_(std::move(observations)), targets_(std::move(targets)),
      lookback_(lookback) {}

Eigen::MatrixXd WindowSet::window_matrix(int w) const {
  const int t = targets_.at(w);
  return observations_->block(t - lookback_, 0, lookback_, observations_->cols()).transpose();
}

Eigen::VectorXd WindowSet::target_vector(int w) const {
  return observations_->row(targets_.at(w)).transpose();
}

std::pair<WindowSet, WindowSet> split(const StDataset& dataset, int t_train, int t_test,
                                      int lookback) {
  const int t_steps = static_cast<int>(dataset.observations.rows());
  if (lookback < 1) throw std::invalid_argument("lookback must be >= 1");
  if (t_train <= lookback)
    throw std::invalid_argument("t_train must exceed lookback for at least one window");
  if (t_test < 1) throw std::invalid_argument("t_test must be >= 1");
  if (t_train + t_test > t_steps)
    throw std::invalid_argument("insufficient length: t_train + t_test = " +
                                std::to_string(t_train + t_test) + " > t_steps = " +
                                std::to_string(t_steps));
  auto obs = std::make_shared<const Eigen::MatrixXd>(dataset.observations);
  std::vector<int> train_targets, test_targets;
  for (int t = lookback; t < t_train; ++t) train_targets.push_back(t);
  for (int t = t_train; t < t_train + t_test; ++t) test_targets.push_back(t);
  return {WindowSet(obs, std::move(train_targets), lookback),
          WindowSet(obs, std::move(test_targets), lookback)};
}

}  // namespace geoformer
