#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "geoformer/grf.hpp"
#include "geoformer/stats.hpp"

using namespace geoformer;

namespace {

ForecastResult make_result(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target) {
  ForecastResult r;
  r.model_name = "test";
  r.predictions = pred;
  r.targets = target;
  return r;
}

// Simpson integration of the CRPS integrand (F(x) - H(x - y))^2. The kink at
// x = y splits the range; each piece gets its own smooth branch so the shared
// endpoint is not contaminated by the other branch.
double crps_by_integration(double y, double mu, double sigma) {
  auto simpson = [&](double lo, double hi, int intervals, double indicator) {
    auto integrand = [&](double x) {
      const double f = normal_cdf((x - mu) / sigma) - indicator;
      return f * f;
    };
    const double h = (hi - lo) / intervals;
    double s = integrand(lo) + integrand(hi);
    for (int i = 1; i < intervals; ++i) s += integrand(lo + i * h) * (i % 2 ? 4.0 : 2.0);
    return s * h / 3.0;
  };
  const double lo = std::min(mu - 12.0 * sigma, y - 2.0);
  const double hi = std::max(mu + 12.0 * sigma, y + 2.0);
  return simpson(lo, y, 6000, 0.0) + simpson(y, hi, 6000, 1.0);
}

}  // namespace

TEST_CASE("rmse and mae hand values") {
  const Eigen::MatrixXd z = Eigen::MatrixXd::Zero(3, 2);
  CHECK(rmse(make_result(z, z)) == 0.0);
  CHECK(mae(make_result(z, z)) == 0.0);

  CHECK(rmse(make_result(z, Eigen::MatrixXd::Constant(3, 2, 2.0))) == doctest::Approx(2.0));
  CHECK(mae(make_result(z, Eigen::MatrixXd::Constant(3, 2, 2.0))) == doctest::Approx(2.0));

  Eigen::MatrixXd target(1, 2);
  target << 3.0, -4.0;
  const auto r = make_result(Eigen::MatrixXd::Zero(1, 2), target);
  CHECK(rmse(r) == doctest::Approx(std::sqrt(12.5)).epsilon(1e-14));
  CHECK(mae(r) == doctest::Approx(3.5).epsilon(1e-14));
}

TEST_CASE("forecast validation") {
  ForecastResult r = make_result(Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Zero(2, 3));
  CHECK_THROWS_AS(r.validate(), std::invalid_argument);
  r = make_result(Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Zero(2, 2));
  r.variances = Eigen::MatrixXd::Zero(2, 2);
  CHECK_THROWS_AS(r.validate(), std::invalid_argument);
  r.variances = Eigen::MatrixXd::Constant(2, 2, 0.5);
  CHECK_NOTHROW(r.validate());
}

TEST_CASE("CRPS closed form: center value, point-mass limit, homogeneity") {
  const double at_center = (std::numbers::sqrt2 - 1.0) / std::sqrt(std::numbers::pi);
  CHECK(crps_gaussian(0.0, 0.0, 1.0) == doctest::Approx(at_center).epsilon(1e-14));
  CHECK(crps_gaussian(0.0, 0.0, 1.0) ==
        doctest::Approx(0.23369497725510907).epsilon(1e-14));

  const double limit = crps_gaussian(1.0, 0.0, 1e-6);
  CHECK(limit > 0.999);
  CHECK(limit < 1.001);

  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.1, 3.0);
  for (int i = 0; i < 50; ++i) {
    const double y = u(rng) - 1.5, mu = u(rng) - 1.5, sigma = u(rng), a = u(rng);
    CHECK(crps_gaussian(a * y, a * mu, a * sigma) ==
          doctest::Approx(a * crps_gaussian(y, mu, sigma)).epsilon(1e-12));
  }

  CHECK_THROWS_AS(crps_gaussian(0.0, 0.0, 0.0), std::domain_error);
  CHECK_THROWS_AS(crps_gaussian(0.0, 0.0, -1.0), std::domain_error);
}

TEST_CASE("CRPS closed form matches numerical integration on random triples") {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> us(0.1, 3.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const double sigma = us(rng);
    const double mu = gauss(rng);
    const double y = mu + 3.0 * sigma * std::tanh(gauss(rng));
    const double closed = crps_gaussian(y, mu, sigma);
    const double integral = crps_by_integration(y, mu, sigma);
    CHECK(std::abs(closed - integral) <= 1e-6);
  }
}

TEST_CASE("mean CRPS over a forecast") {
  ForecastResult r = make_result(Eigen::MatrixXd::Zero(1, 2), Eigen::MatrixXd::Zero(1, 2));
  CHECK_THROWS_AS(crps_mean(r), std::invalid_argument);
  r.variances = Eigen::MatrixXd::Constant(1, 2, 1.0);
  CHECK(crps_mean(r) == doctest::Approx(crps_gaussian(0, 0, 1)).epsilon(1e-14));
}

TEST_CASE("Diebold-Mariano: degeneracy, antisymmetry, size") {
  Eigen::VectorXd e1 = Eigen::VectorXd::LinSpaced(50, -1.0, 1.0);
  CHECK_THROWS_WITH_AS(diebold_mariano(e1, e1), "degenerate loss differential",
                       std::domain_error);
  CHECK_THROWS_AS(diebold_mariano(e1, Eigen::VectorXd::Zero(10)), std::invalid_argument);
  CHECK_THROWS_AS(diebold_mariano(Eigen::VectorXd::Zero(5), Eigen::VectorXd::Zero(5)),
                  std::invalid_argument);

  std::mt19937_64 rng(31);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::VectorXd a(200), b(200);
  for (int i = 0; i < 200; ++i) {
    a[i] = gauss(rng);
    b[i] = gauss(rng) * 1.3;
  }
  const DMResult fwd = diebold_mariano(a, b, 2);
  const DMResult rev = diebold_mariano(b, a, 2);
  CHECK(fwd.statistic == -rev.statistic);  // exact antisymmetry
  CHECK(fwd.p_two_sided == doctest::Approx(rev.p_two_sided).epsilon(1e-12));
  CHECK(fwd.p_one_sided == doctest::Approx(1.0 - rev.p_one_sided).epsilon(1e-9));

  // size under the null: d_t iid N(0,1) via e1 = sqrt(d+), e2 = sqrt(d-)
  int inside = 0;
  const int trials = 1000, t_len = 500;
  std::mt19937_64 rng2(77);
  for (int k = 0; k < trials; ++k) {
    Eigen::VectorXd e1n(t_len), e2n(t_len);
    for (int t = 0; t < t_len; ++t) {
      const double d = gauss(rng2);
      e1n[t] = d > 0 ? std::sqrt(d) : 0.0;
      e2n[t] = d < 0 ? std::sqrt(-d) : 0.0;
    }
    if (std::abs(diebold_mariano(e1n, e2n).statistic) < 1.96) ++inside;
  }
  CHECK(inside >= 930);
}

TEST_CASE("PIT: degenerate, calibrated, under-dispersed") {
  const int t_len = 100, n_sites = 100;
  ForecastResult r =
      make_result(Eigen::MatrixXd::Zero(t_len, n_sites), Eigen::MatrixXd::Zero(t_len, n_sites));
  CHECK_THROWS_AS(pit_values(r), std::invalid_argument);

  r.variances = Eigen::MatrixXd::Constant(t_len, n_sites, 1.0);
  const Eigen::VectorXd degenerate = pit_values(r);
  CHECK(degenerate.minCoeff() == 0.5);
  CHECK(degenerate.maxCoeff() == 0.5);
  CHECK(pit_uniformity(degenerate).ks == doctest::Approx(0.5).epsilon(1e-9));

  // calibrated: y drawn from the stated Gaussians
  std::mt19937_64 rng(41);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int t = 0; t < t_len; ++t)
    for (int i = 0; i < n_sites; ++i) r.targets(t, i) = 2.0 * gauss(rng) + 1.0;
  r.predictions = Eigen::MatrixXd::Constant(t_len, n_sites, 1.0);
  r.variances = Eigen::MatrixXd::Constant(t_len, n_sites, 4.0);
  const PitSummary calibrated = pit_uniformity(pit_values(r));
  CHECK(calibrated.ks < 0.02);

  // sigma understated x2: U-shaped histogram, heavy outer deciles
  r.variances = Eigen::MatrixXd::Constant(t_len, n_sites, 1.0);
  const PitSummary under = pit_uniformity(pit_values(r));
  CHECK(under.histogram.front() + under.histogram.back() > 0.4);
  CHECK(under.ks > calibrated.ks);
}

TEST_CASE("PIT of the generating distribution passes KS at the 1% level") {
  std::mt19937_64 rng(53);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int trials = 100, n = 1000;
  const double crit = 1.6276 / std::sqrt(static_cast<double>(n));
  int passes = 0;
  for (int k = 0; k < trials; ++k) {
    Eigen::VectorXd pit(n);
    for (int i = 0; i < n; ++i) pit[i] = normal_cdf(gauss(rng));
    if (pit_uniformity(pit).ks < crit) ++passes;
  }
  CHECK(passes >= 95);
}

TEST_CASE("Moran's I golden value on four collinear sites") {
  const SensorGrid g = SensorGrid::from_locations({{0, 0}, {1, 0}, {2, 0}, {3, 0}});
  const SpatialWeights w = SpatialWeights::inverse_distance(g);
  CHECK(w.w(0, 0) == 0.0);
  CHECK(w.w(0, 1) == 1.0);
  CHECK(w.w(0, 3) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Eigen::VectorXd eps(4);
  eps << 1.0, 1.0, -1.0, -1.0;
  CHECK(morans_i(eps, w) == doctest::Approx(-1.0 / 13.0).epsilon(1e-13));

  CHECK_THROWS_WITH_AS(morans_i(Eigen::VectorXd::Constant(4, 2.0), w),
                       "zero residual variance", std::domain_error);
}

TEST_CASE("Moran's I null expectation on the 20x20 grid") {
  const SensorGrid g = SensorGrid::lattice(20);
  const SpatialWeights w = SpatialWeights::inverse_distance(g);
  std::mt19937_64 rng(67);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int draws = 1000;
  Eigen::VectorXd stats(draws);
  for (int k = 0; k < draws; ++k) {
    Eigen::VectorXd e(g.n());
    for (int i = 0; i < g.n(); ++i) e[i] = gauss(rng);
    stats[k] = morans_i(e, w);
  }
  const double mean = stats.mean();
  const double sd = std::sqrt((stats.array() - mean).square().sum() / (draws - 1));
  const double expected = -1.0 / (g.n() - 1);
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(mean - expected) < 3.0 * sd / std::sqrt(static_cast<double>(draws)));
}

TEST_CASE("Moran's I flags spatially clustered fields") {
  SimConfig cfg;  // rho 0.2 on the 20x20 grid
  cfg.t_steps = 40;
  cfg.nugget = 0.0;
  cfg.seed = 5;
  const StDataset ds = simulate_replicate(cfg, 0);
  const SpatialWeights w = SpatialWeights::inverse_distance(ds.grid);
  // single GRF draws fluctuate (roughly 0.1 to 0.35 under these weights), so
  // assert the time-mean, which concentrates near 0.2
  const double mean_i = mean_morans_i(ds.latent, w);
  CHECK(mean_i > 0.15);
  const double null_scale = 1.0 / (ds.grid.n() - 1);
  CHECK(mean_i > 20.0 * null_scale);
}

TEST_CASE("variogram: white noise, sill and near-range value") {
  // white noise: flat variogram at the noise variance
  const SensorGrid g = SensorGrid::lattice(10);
  std::mt19937_64 rng(71);
  std::normal_distribution<double> gauss(0.0, std::sqrt(0.7));
  Eigen::MatrixXd field(800, g.n());
  for (Eigen::Index t = 0; t < field.rows(); ++t)
    for (int i = 0; i < g.n(); ++i) field(t, i) = gauss(rng);
  const auto flat = empirical_variogram(field, g, {0.05, 0.3, 0.6, 1.0});
  for (const auto& bin : flat) {
    REQUIRE(bin.has_value);
    CHECK(bin.pair_count >= 50);
    CHECK(std::abs(bin.value - 0.7) < 0.05);
  }

  SimConfig cfg;  // defaults: sill sigma^2 + nugget = 1.05
  const StDataset ds = simulate_replicate(cfg, 1);
  const auto bins =
      empirical_variogram(ds.observations, ds.grid, {0.17, 0.23, 0.9, 1.42});
  REQUIRE(bins.size() == 3);
  REQUIRE(bins[0].has_value);
  CHECK(bins[0].pair_count >= 50);
  const double analytic_near =
      1.05 - matern_correlation(0.2, 0.2, KernelFamily::Matern15);
  CHECK(std::abs(bins[0].value - analytic_near) < 0.06);
  REQUIRE(bins[2].has_value);
  CHECK(std::abs(bins[2].value - 1.05) < 0.1);

  const auto gap = empirical_variogram(field, g, {1.9, 2.5});
  CHECK_FALSE(gap[0].has_value);
}
