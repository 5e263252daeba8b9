#include "geoformer/baselines.hpp"

#include <cmath>
#include <stdexcept>

namespace geoformer {

KrigingOracle::KrigingOracle(SensorGrid grid, SimConfig config, int conditioning_depth)
    : grid_(std::move(grid)), config_(config), depth_(conditioning_depth) {
  if (depth_ < 1) throw std::invalid_argument("conditioning_depth must be >= 1");
  const int n = grid_.n();
  const int k = depth_;
  const Eigen::MatrixXd psi =
      config_.sigma2 > 0.0
          ? Eigen::MatrixXd(config_.sigma2 *
                            correlation_matrix(grid_, config_.rho_true, config_.family()))
          : Eigen::MatrixXd::Zero(n, n);

  // Cov(Y(s,t-k+1+a), Y(s',t-k+1+b)) = sigma^2 Psi(d) phi^{|a-b|} + nugget delta
  Eigen::MatrixXd sigma_hh(n * k, n * k);
  for (int a = 0; a < k; ++a) {
    for (int b = 0; b < k; ++b) {
      Eigen::MatrixXd block = std::pow(config_.phi_t, std::abs(a - b)) * psi;
      if (a == b) block.diagonal().array() += config_.nugget;
      sigma_hh.block(a * n, b * n, n, n) = block;
    }
  }
  // Cov(history block a, target Y_{t+1}) decays with lag k - a.
  Eigen::MatrixXd cross(n * k, n);
  for (int a = 0; a < k; ++a)
    cross.block(a * n, 0, n, n) = std::pow(config_.phi_t, k - a) * psi;

  const double scale = config_.sigma2 + config_.nugget;
  const Eigen::MatrixXd chol = cholesky_with_jitter(sigma_hh, scale);
  weights_ = chol.transpose().triangularView<Eigen::Upper>().solve(
      chol.triangularView<Eigen::Lower>().solve(cross));
  variance_ = Eigen::VectorXd::Constant(n, scale) -
              cross.cwiseProduct(weights_).colwise().sum().transpose();
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> KrigingOracle::predict(
    const Eigen::MatrixXd& history) const {
  const int n = grid_.n();
  if (history.rows() != n || history.cols() != depth_)
    throw std::invalid_argument("kriging history must be " + std::to_string(n) + "x" +
                                std::to_string(depth_) + ", got " +
                                std::to_string(history.rows()) + "x" +
                                std::to_string(history.cols()));
  Eigen::VectorXd stacked(n * depth_);
  for (int a = 0; a < depth_; ++a) stacked.segment(a * n, n) = history.col(a);
  return {weights_.transpose() * stacked, variance_};
}

ForecastResult KrigingOracle::forecast(const StDataset& dataset, int t_start,
                                       int t_count) const {
  const int n = grid_.n();
  if (t_start < depth_ || t_start + t_count > dataset.observations.rows())
    throw std::invalid_argument("forecast range outside dataset");
  ForecastResult result;
  result.model_name = "kriging_oracle";
  result.predictions.resize(t_count, n);
  result.targets.resize(t_count, n);
  result.variances.resize(t_count, n);
  for (int i = 0; i < t_count; ++i) {
    const int t = t_start + i;  // target index; history ends at t-1
    const Eigen::MatrixXd history =
        dataset.observations.block(t - depth_, 0, depth_, n).transpose();
    auto [mean, var] = predict(history);
    result.predictions.row(i) = mean.transpose();
    result.variances.row(i) = var.transpose();
    result.targets.row(i) = dataset.observations.row(t);
  }
  // guard the validate() positivity contract against jitter-level negatives
  result.variances = result.variances.cwiseMax(1e-12);
  return result;
}

Eigen::VectorXd historical_average(const Eigen::MatrixXd& train_observations) {
  if (train_observations.rows() < 1)
    throw std::invalid_argument("historical_average needs at least one observation row");
  return train_observations.colwise().mean().transpose();
}

ForecastResult historical_average_forecast(const Eigen::MatrixXd& train_observations,
                                           const StDataset& dataset, int t_start,
                                           int t_count) {
  if (t_start < 0 || t_start + t_count > dataset.observations.rows())
    throw std::invalid_argument("forecast range outside dataset");
  const Eigen::VectorXd mean = historical_average(train_observations);
  ForecastResult result;
  result.model_name = "historical_average";
  result.predictions = mean.transpose().replicate(t_count, 1);
  result.targets = dataset.observations.middleRows(t_start, t_count);
  return result;
}

}  // namespace geoformer
