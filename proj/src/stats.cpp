#include "geoformer/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace geoformer {

double normal_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

void ForecastResult::validate() const {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols())
    throw std::invalid_argument("forecast shapes disagree: predictions " +
                                std::to_string(predictions.rows()) + "x" +
                                std::to_string(predictions.cols()) + " vs targets " +
                                std::to_string(targets.rows()) + "x" +
                                std::to_string(targets.cols()));
  if (predictions.size() == 0) throw std::invalid_argument("empty forecast");
  if (has_variances()) {
    if (variances.rows() != predictions.rows() || variances.cols() != predictions.cols())
      throw std::invalid_argument("variance shape disagrees with predictions");
    if (!(variances.minCoeff() > 0.0))
      throw std::invalid_argument("variances must be strictly positive");
  }
  if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
}

double rmse(const ForecastResult& result) {
  result.validate();
  const Eigen::MatrixXd r = result.residuals();
  return std::sqrt(r.squaredNorm() / static_cast<double>(r.size()));
}

double mae(const ForecastResult& result) {
  result.validate();
  const Eigen::MatrixXd r = result.residuals();
  return r.cwiseAbs().sum() / static_cast<double>(r.size());
}

double crps_gaussian(double y, double mu, double sigma) {
  if (!(sigma > 0.0))
    throw std::domain_error("crps_gaussian requires sigma > 0, got " + std::to_string(sigma));
  const double z = (y - mu) / sigma;
  return sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) -
                  1.0 / std::sqrt(std::numbers::pi));
}

double crps_mean(const ForecastResult& result) {
  result.validate();
  if (!result.has_variances())
    throw std::invalid_argument("crps_mean requires predictive variances");
  double total = 0.0;
  for (Eigen::Index t = 0; t < result.predictions.rows(); ++t)
    for (Eigen::Index i = 0; i < result.predictions.cols(); ++i)
      total += crps_gaussian(result.targets(t, i), result.predictions(t, i),
                             std::sqrt(result.variances(t, i)));
  return total / static_cast<double>(result.predictions.size());
}

DMResult diebold_mariano(const Eigen::VectorXd& e1, const Eigen::VectorXd& e2, int lag) {
  if (e1.size() != e2.size())
    throw std::invalid_argument("diebold_mariano: unequal series lengths");
  const Eigen::Index t_len = e1.size();
  if (t_len < 10) throw std::invalid_argument("diebold_mariano: need at least 10 observations");
  if (lag < 0) throw std::invalid_argument("diebold_mariano: negative lag");

  const Eigen::VectorXd d = e1.array().square() - e2.array().square();
  const double mean = d.mean();
  const Eigen::VectorXd c = d.array() - mean;

  auto gamma = [&](int l) {
    double s = 0.0;
    for (Eigen::Index t = l; t < t_len; ++t) s += c[t] * c[t - l];
    return s / static_cast<double>(t_len);
  };
  double lrv = gamma(0);
  for (int l = 1; l <= lag; ++l)
    lrv += 2.0 * (1.0 - static_cast<double>(l) / (lag + 1.0)) * gamma(l);
  if (lrv <= 0.0) throw std::domain_error("degenerate loss differential");

  DMResult out;
  out.lag = lag;
  out.statistic = mean / std::sqrt(lrv / static_cast<double>(t_len));
  out.p_two_sided = 2.0 * normal_cdf(-std::abs(out.statistic));
  out.p_one_sided = normal_cdf(out.statistic);
  return out;
}

Eigen::VectorXd pit_values(const ForecastResult& result) {
  result.validate();
  if (!result.has_variances())
    throw std::invalid_argument("pit_values requires predictive variances");
  Eigen::VectorXd pit(result.predictions.size());
  Eigen::Index k = 0;
  for (Eigen::Index t = 0; t < result.predictions.rows(); ++t)
    for (Eigen::Index i = 0; i < result.predictions.cols(); ++i)
      pit[k++] = normal_cdf((result.targets(t, i) - result.predictions(t, i)) /
                            std::sqrt(result.variances(t, i)));
  return pit;
}

PitSummary pit_uniformity(const Eigen::VectorXd& pit, int bins) {
  if (bins < 2) throw std::invalid_argument("pit_uniformity: need at least 2 bins");
  if (pit.size() == 0) throw std::invalid_argument("pit_uniformity: empty series");
  PitSummary out;
  out.histogram.assign(static_cast<size_t>(bins), 0.0);
  std::vector<double> sorted(pit.data(), pit.data() + pit.size());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double d_stat = 0.0;
  for (size_t i = 0; i < sorted.size(); ++i) {
    const double u = sorted[i];
    d_stat = std::max(d_stat, (static_cast<double>(i) + 1.0) / n - u);
    d_stat = std::max(d_stat, u - static_cast<double>(i) / n);
    int b = static_cast<int>(u * bins);
    b = std::clamp(b, 0, bins - 1);
    out.histogram[static_cast<size_t>(b)] += 1.0 / n;
  }
  out.ks = d_stat;
  return out;
}

SpatialWeights SpatialWeights::inverse_distance(const SensorGrid& grid) {
  const int n = grid.n();
  SpatialWeights sw;
  sw.w = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) sw.w(i, j) = 1.0 / grid.dist(i, j);
  return sw;
}

double morans_i(const Eigen::VectorXd& residual, const SpatialWeights& weights) {
  const Eigen::Index n = residual.size();
  if (weights.w.rows() != n || weights.w.cols() != n)
    throw std::invalid_argument("morans_i: weight matrix does not match residual length");
  const Eigen::VectorXd c = residual.array() - residual.mean();
  const double denom = c.squaredNorm();
  if (denom <= 0.0) throw std::domain_error("zero residual variance");
  const double w_total = weights.w.sum();
  const double cross = c.transpose() * weights.w * c;
  return static_cast<double>(n) / w_total * cross / denom;
}

double mean_morans_i(const Eigen::MatrixXd& residuals, const SpatialWeights& weights) {
  if (residuals.rows() == 0) throw std::invalid_argument("mean_morans_i: empty residuals");
  double total = 0.0;
  for (Eigen::Index t = 0; t < residuals.rows(); ++t)
    total += morans_i(residuals.row(t).transpose(), weights);
  return total / static_cast<double>(residuals.rows());
}

std::vector<VariogramBin> empirical_variogram(const Eigen::MatrixXd& field,
                                              const SensorGrid& grid,
                                              const std::vector<double>& edges) {
  if (edges.size() < 2) throw std::invalid_argument("empirical_variogram: need >= 1 bin");
  for (size_t k = 1; k < edges.size(); ++k)
    if (!(edges[k] > edges[k - 1]))
      throw std::invalid_argument("bin edges must be strictly increasing");
  const int n = grid.n();
  if (field.cols() != n)
    throw std::invalid_argument("empirical_variogram: field columns != grid size");
  if (field.rows() < 1) throw std::invalid_argument("empirical_variogram: empty field");

  const double t_len = static_cast<double>(field.rows());
  // mean over t of (z_i - z_j)^2 = m2_i + m2_j - 2 * cross_ij
  const Eigen::VectorXd m2 = field.array().square().colwise().mean();
  const Eigen::MatrixXd cross = field.transpose() * field / t_len;

  std::vector<VariogramBin> bins(edges.size() - 1);
  std::vector<double> sums(bins.size(), 0.0);
  for (size_t k = 0; k < bins.size(); ++k) {
    bins[k].lo = edges[k];
    bins[k].hi = edges[k + 1];
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double d = grid.dist(i, j);
      if (d < edges.front() || d > edges.back()) continue;
      size_t k = bins.size() - 1;
      for (size_t b = 1; b < edges.size(); ++b)
        if (d < edges[b]) {
          k = b - 1;
          break;
        }
      sums[k] += 0.5 * (m2[i] + m2[j] - 2.0 * cross(i, j));
      ++bins[k].pair_count;
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

}  // namespace geoformer
