#pragma once

#include <Eigen/Dense>
#include <utility>

#include "geoformer/grf.hpp"
#include "geoformer/stats.hpp"

namespace geoformer {

/// Exact Gaussian conditioning on the last k observed steps using the true
/// generating covariance (simple Kriging, zero mean). The conditioning
/// system is factorized once at construction; prediction is then a matrix
/// product per step, and the predictive variance is constant in t.
class KrigingOracle {
 public:
  KrigingOracle(SensorGrid grid, SimConfig config, int conditioning_depth = 3);

  int depth() const { return depth_; }
  const SensorGrid& grid() const { return grid_; }

  /// history: n x k with the oldest step in column 0 and the current step t
  /// in column k-1. Returns conditional mean and variance of Y_{t+1}.
  std::pair<Eigen::VectorXd, Eigen::VectorXd> predict(const Eigen::MatrixXd& history) const;

  /// Forecast the targets [t_start, t_start + t_count) of a dataset drawn
  /// from the same generator.
  ForecastResult forecast(const StDataset& dataset, int t_start, int t_count) const;

 private:
  SensorGrid grid_;
  SimConfig config_;
  int depth_;
  Eigen::MatrixXd weights_;   // (n*k) x n solve of the conditioning system
  Eigen::VectorXd variance_;  // per-site predictive variance
};

/// Per-site mean of the training observations; the constant forecast.
Eigen::VectorXd historical_average(const Eigen::MatrixXd& train_observations);

ForecastResult historical_average_forecast(const Eigen::MatrixXd& train_observations,
                                           const StDataset& dataset, int t_start,
                                           int t_count);

}  // namespace geoformer
