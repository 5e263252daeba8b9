#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "doctest.h"
#include "geoformer/grf.hpp"
#include "geoformer/kernels.hpp"
#include "geoformer/model.hpp"
#include "geoformer/train.hpp"

using namespace geoformer;

namespace {

std::vector<Parameter> scalar_params(const std::vector<std::pair<std::string, double>>& init) {
  std::vector<Parameter> out;
  for (const auto& [name, value] : init)
    out.push_back(Parameter{name, Tensor::from_values({1}, {value}, true)});
  return out;
}

void set_grad(Parameter& p, double g) {
  p.value.zero_grad();
  p.value.node()->grad[0] = g;
}

ModelConfig small_model_config(ModelVariant variant, int lookback) {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.lookback = lookback;
  cfg.dropout_p = 0.1;
  cfg.variant = variant;
  cfg.kernel.theta_rho = softplus_inv(0.35);
  cfg.kernel.theta_lambda = softplus_inv(0.7);
  return cfg;
}

double pooled_mse(const GeoformerModel& model, const WindowSet& ws, int first, int last) {
  std::vector<Eigen::MatrixXd> wins;
  double sq = 0.0;
  long count = 0;
  for (int w = first; w < last; ++w) wins.push_back(ws.window_matrix(w));
  Eigen::MatrixXd pred = model.predict_batch(wins);
  for (int w = first; w < last; ++w) {
    Eigen::VectorXd r = ws.target_vector(w) - pred.row(w - first).transpose();
    sq += r.squaredNorm();
    count += r.size();
  }
  return sq / double(count);
}

}  // namespace

TEST_CASE("training: config validation rejects bad settings") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.plateau_factor = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.plateau_factor = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.val_fraction = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.max_epochs = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.weight_decay = -1e-4;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("training: adam reproduces the hand-rolled three-step trajectory") {
  // lr 0.1, gradients (1, 1, -1), no decay
  auto params = scalar_params({{"w", 0.0}});
  AdamOptimizer opt(params, 0.1, 0.0);
  const double expected[3] = {-0.09999999900000002, -0.19999999799999935, -0.22619925973062666};
  const double grads[3] = {1.0, 1.0, -1.0};
  for (int t = 0; t < 3; ++t) {
    set_grad(params[0], grads[t]);
    opt.step();
    CHECK(std::abs(params[0].value.value() - expected[t]) < 1e-14);
  }
  CHECK(opt.step_count() == 3);
}

TEST_CASE("training: first adam step moves by about minus lr times the gradient sign") {
  for (double g : {0.37, -2.1, 14.0}) {
    auto params = scalar_params({{"w", 0.0}});
    AdamOptimizer opt(params, 0.01, 0.0);
    set_grad(params[0], g);
    opt.step();
    CHECK(std::abs(params[0].value.value() + 0.01 * (g > 0 ? 1.0 : -1.0)) < 1e-6);
  }
}

TEST_CASE("training: zero gradient leaves the parameter to the decay term") {
  auto params = scalar_params({{"embed.w", 2.0}, {"kernel.theta_rho", 2.0}});
  AdamOptimizer opt(params, 0.1, 0.01);
  set_grad(params[0], 0.0);
  set_grad(params[1], 0.0);
  opt.step();
  // decayed: theta *= (1 - lr*wd); kernel parameter exempt
  CHECK(params[0].value.value() == 2.0 * (1.0 - 0.1 * 0.01));
  CHECK(params[1].value.value() == 2.0);

  // without decay nothing moves at all
  auto params2 = scalar_params({{"w", 2.0}});
  AdamOptimizer opt2(params2, 0.1, 0.0);
  set_grad(params2[0], 0.0);
  opt2.step();
  CHECK(params2[0].value.value() == 2.0);
}

TEST_CASE("training: kernel parameters are exempt from weight decay but not from updates") {
  auto params = scalar_params({{"layer0.attn.wo", 1.0}, {"kernel.theta_lambda", 1.0}});
  AdamOptimizer opt(params, 0.05, 0.1);
  set_grad(params[0], 0.5);
  set_grad(params[1], 0.5);
  opt.step();
  // both receive the same adam step; only the first is decayed
  const double adam_only = params[1].value.value();
  CHECK(adam_only < 1.0);
  CHECK(std::abs(params[0].value.value() - (1.0 * (1.0 - 0.05 * 0.1) + (adam_only - 1.0))) < 1e-12);
}

TEST_CASE("training: non-finite gradients abort the step with a diagnostic") {
  auto params = scalar_params({{"embed.w", 1.0}, {"head.w", 1.0}});
  AdamOptimizer opt(params, 0.1, 0.0);
  set_grad(params[0], 1.0);
  set_grad(params[1], std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_WITH_AS(opt.step(), "non-finite gradient in head.w", std::runtime_error);
  CHECK(opt.step_count() == 0);
  CHECK(params[1].value.value() == 1.0);
}

TEST_CASE("training: gradient clipping rescales to the norm ceiling") {
  auto params = scalar_params({{"a", 0.0}, {"b", 0.0}});
  set_grad(params[0], 6.0);
  set_grad(params[1], 8.0);
  double norm = clip_gradients(params, 5.0);
  CHECK(std::abs(norm - 10.0) < 1e-12);
  CHECK(std::abs(params[0].value.grad()[0] - 3.0) < 1e-12);
  CHECK(std::abs(params[1].value.grad()[0] - 4.0) < 1e-12);

  // inside the ceiling nothing changes
  set_grad(params[0], 3.0);
  set_grad(params[1], 4.0);
  norm = clip_gradients(params, 5.0);
  CHECK(std::abs(norm - 5.0) < 1e-12);
  CHECK(params[0].value.grad()[0] == 3.0);

  // a non-finite norm is reported but left in place
  set_grad(params[0], std::numeric_limits<double>::infinity());
  norm = clip_gradients(params, 5.0);
  CHECK(std::isinf(norm));
  CHECK(std::isinf(params[0].value.grad()[0]));
}

TEST_CASE("training: plateau scheduler semantics") {
  SUBCASE("strictly decreasing loss never reduces") {
    PlateauScheduler sched(1e-3, 3, 0.5, 1e-6);
    double lr = 1e-3;
    for (int i = 0; i < 20; ++i) lr = sched.observe(1.0 / (i + 1));
    CHECK(lr == 1e-3);
  }
  SUBCASE("flat loss for patience plus one epochs reduces exactly once") {
    PlateauScheduler sched(1e-3, 3, 0.5, 1e-6);
    CHECK(sched.observe(1.0) == 1e-3);  // first observation sets the best
    CHECK(sched.observe(1.0) == 1e-3);
    CHECK(sched.observe(1.0) == 1e-3);
    CHECK(sched.observe(1.0) == 5e-4);  // third consecutive bad epoch
    CHECK(sched.observe(1.0) == 5e-4);
    CHECK(sched.observe(1.0) == 5e-4);
    CHECK(sched.observe(1.0) == 2.5e-4);  // counter restarted after the cut
  }
  SUBCASE("improvement below the relative threshold still counts as stagnation") {
    PlateauScheduler sched(1e-3, 2, 0.5, 1e-6);
    sched.observe(1.0);
    sched.observe(1.0 - 1e-9);  // relative gain 1e-9 < 1e-6
    CHECK(sched.observe(1.0 - 2e-9) == 5e-4);
  }
  SUBCASE("the floor holds") {
    PlateauScheduler sched(2e-6, 1, 0.5, 1e-6);
    sched.observe(1.0);
    CHECK(sched.observe(1.0) == 1e-6);
    CHECK(sched.observe(1.0) == 1e-6);
  }
  SUBCASE("a new best resets the counter") {
    PlateauScheduler sched(1e-3, 2, 0.5, 1e-6);
    sched.observe(1.0);
    sched.observe(1.0);        // bad 1
    sched.observe(0.5);        // new best, counter resets
    sched.observe(0.5);        // bad 1
    CHECK(sched.observe(0.5) == 5e-4);  // bad 2 -> cut
  }
}

TEST_CASE("training: zero max epochs returns the initialized model and an empty log") {
  SimConfig sim;
  sim.grid_side = 4;
  sim.t_steps = 60;
  sim.n_replicates = 1;
  StDataset data = simulate_replicate(sim, 0);
  auto [train_ws, test_ws] = split(data, 50, 10, 6);

  GeoformerModel model(small_model_config(ModelVariant::Geo, 6), data.grid, 3);
  auto before = model.snapshot_parameters();
  TrainConfig tc;
  tc.max_epochs = 0;
  TrainResult res = train(model, train_ws, tc);
  CHECK(res.log.epochs.empty());
  CHECK_FALSE(res.diverged);
  CHECK(res.best_epoch == -1);
  auto after = model.snapshot_parameters();
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK((before[i] - after[i]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("training: fit on synthetic data improves, checkpoints the best epoch, and replays") {
  SimConfig sim;
  sim.grid_side = 5;
  sim.t_steps = 220;
  sim.n_replicates = 1;
  sim.seed = 9;
  StDataset data = simulate_replicate(sim, 0);
  const int lookback = 8;
  auto [train_ws, test_ws] = split(data, 200, 20, lookback);
  REQUIRE(train_ws.count() == 192);

  TrainConfig tc;
  tc.lr = 3e-3;
  tc.batch_size = 32;
  tc.max_epochs = 8;
  tc.seed = 17;

  GeoformerModel model(small_model_config(ModelVariant::Geo, lookback), data.grid, 31);
  TrainResult res = train(model, train_ws, tc);

  REQUIRE_FALSE(res.diverged);
  REQUIRE(res.log.epochs.size() == 8);

  // log invariants
  double min_val = std::numeric_limits<double>::infinity();
  for (const auto& e : res.log.epochs) {
    CHECK(e.rho > 0.0);
    CHECK(e.lambda > 0.0);
    CHECK(std::isfinite(e.train_mse));
    CHECK(std::isfinite(e.val_mse));
    CHECK(e.geo_bias_share > 0.0);
    CHECK(e.geo_bias_share < 1.0);
    min_val = std::min(min_val, e.val_mse);
  }
  CHECK(res.best_val_mse == min_val);
  CHECK(res.best_epoch >= 0);

  // the returned parameters really are the best-validation checkpoint:
  // recomputing the held-out MSE (the chronological tail of 20%) reproduces it
  const int n_val = 192 / 5;
  const double recomputed = pooled_mse(model, train_ws, 192 - n_val, 192);
  CHECK(std::abs(recomputed - res.best_val_mse) < 1e-12);

  // learning happened and the kernel moved
  CHECK(res.best_epoch > 0);
  CHECK(res.log.epochs[res.best_epoch].train_mse < res.log.epochs[0].train_mse);
  CHECK(std::abs(res.log.epochs.back().rho - 0.35) > 1e-5);

  // noise floor equals the training-residual variance at the checkpoint
  CHECK(res.noise_floor > 0.0);
  CHECK(model.noise_floor() == res.noise_floor);
  {
    std::vector<Eigen::MatrixXd> wins;
    for (int w = 0; w < 192 - n_val; ++w) wins.push_back(train_ws.window_matrix(w));
    Eigen::MatrixXd pred = model.predict_batch(wins);
    double sum = 0.0, sq = 0.0;
    long cnt = 0;
    for (int w = 0; w < 192 - n_val; ++w) {
      Eigen::VectorXd r = train_ws.target_vector(w) - pred.row(w).transpose();
      sum += r.sum();
      sq += r.squaredNorm();
      cnt += r.size();
    }
    const double mean = sum / double(cnt);
    const double var = (sq - double(cnt) * mean * mean) / double(cnt - 1);
    CHECK(std::abs(res.noise_floor - std::max(var, 0.0)) < 1e-12);
  }

  // deterministic replay: a fresh identical model and the same seed reproduce
  // the log (timings aside) and the final parameters bit for bit
  GeoformerModel model2(small_model_config(ModelVariant::Geo, lookback), data.grid, 31);
  TrainResult res2 = train(model2, train_ws, tc);
  REQUIRE(res2.log.epochs.size() == res.log.epochs.size());
  for (std::size_t i = 0; i < res.log.epochs.size(); ++i) {
    CHECK(res2.log.epochs[i].train_mse == res.log.epochs[i].train_mse);
    CHECK(res2.log.epochs[i].val_mse == res.log.epochs[i].val_mse);
    CHECK(res2.log.epochs[i].lr == res.log.epochs[i].lr);
    CHECK(res2.log.epochs[i].rho == res.log.epochs[i].rho);
    CHECK(res2.log.epochs[i].lambda == res.log.epochs[i].lambda);
    CHECK(res2.log.epochs[i].geo_bias_share == res.log.epochs[i].geo_bias_share);
  }
  auto s1 = model.snapshot_parameters();
  auto s2 = model2.snapshot_parameters();
  for (std::size_t i = 0; i < s1.size(); ++i)
    CHECK((s1[i] - s2[i]).cwiseAbs().maxCoeff() == 0.0);

  // a different seed shuffles differently
  TrainConfig tc3 = tc;
  tc3.seed = 18;
  GeoformerModel model3(small_model_config(ModelVariant::Geo, lookback), data.grid, 31);
  TrainResult res3 = train(model3, train_ws, tc3);
  bool any_diff = false;
  for (std::size_t i = 0; i < res.log.epochs.size(); ++i)
    any_diff = any_diff || res3.log.epochs[i].train_mse != res.log.epochs[i].train_mse;
  CHECK(any_diff);
}

TEST_CASE("training: vanilla variant logs zero kernel diagnostics") {
  SimConfig sim;
  sim.grid_side = 4;
  sim.t_steps = 80;
  sim.n_replicates = 1;
  StDataset data = simulate_replicate(sim, 0);
  auto [train_ws, test_ws] = split(data, 70, 10, 6);

  TrainConfig tc;
  tc.max_epochs = 2;
  tc.seed = 5;
  GeoformerModel model(small_model_config(ModelVariant::Vanilla, 6), data.grid, 7);
  TrainResult res = train(model, train_ws, tc);
  REQUIRE_FALSE(res.diverged);
  for (const auto& e : res.log.epochs) {
    CHECK(e.rho == 0.0);
    CHECK(e.lambda == 0.0);
    CHECK(e.geo_bias_share == 0.0);
  }
}

TEST_CASE("training: a non-finite loss aborts with the error flag and a rollback") {
  SimConfig sim;
  sim.grid_side = 4;
  sim.t_steps = 60;
  sim.n_replicates = 1;
  StDataset data = simulate_replicate(sim, 0);
  auto [train_ws, test_ws] = split(data, 50, 10, 6);

  GeoformerModel model(small_model_config(ModelVariant::Geo, 6), data.grid, 3);
  // blow up the prediction head so the very first squared error overflows
  model.find_parameter("head.w")->value.mutable_data().setConstant(1e200);
  auto before = model.snapshot_parameters();

  TrainConfig tc;
  tc.max_epochs = 4;
  TrainResult res = train(model, train_ws, tc);
  CHECK(res.diverged);
  CHECK_FALSE(res.error.empty());
  CHECK(res.log.epochs.empty());  // nothing completed
  // rolled back to the last finite checkpoint, here the starting parameters
  auto after = model.snapshot_parameters();
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK((before[i] - after[i]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("training: window geometry mismatches are rejected") {
  SimConfig sim;
  sim.grid_side = 4;
  sim.t_steps = 60;
  sim.n_replicates = 1;
  StDataset data = simulate_replicate(sim, 0);
  auto [train_ws, test_ws] = split(data, 50, 10, 6);

  GeoformerModel wrong_lookback(small_model_config(ModelVariant::Geo, 7), data.grid, 3);
  TrainConfig tc;
  CHECK_THROWS_AS(train(wrong_lookback, train_ws, tc), std::invalid_argument);

  GeoformerModel wrong_grid(small_model_config(ModelVariant::Geo, 6), SensorGrid::lattice(3), 3);
  CHECK_THROWS_AS(train(wrong_grid, train_ws, tc), std::invalid_argument);
}
