#include "geoformer/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace geoformer {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (max_epochs < 0) throw std::invalid_argument("max_epochs must be non-negative");
  if (plateau_patience < 1) throw std::invalid_argument("plateau_patience must be at least 1");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0))
    throw std::invalid_argument("plateau_factor must lie in (0, 1)");
  if (!(min_lr > 0.0)) throw std::invalid_argument("min_lr must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0))
    throw std::invalid_argument("val_fraction must lie in [0, 1)");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
  if (!(kernel_lr_mult > 0.0)) throw std::invalid_argument("kernel_lr_mult must be positive");
}

AdamOptimizer::AdamOptimizer(std::vector<Parameter>& params, double lr, double weight_decay,
                             double kernel_lr_mult)
    : params_(&params), lr_(lr), weight_decay_(weight_decay) {
  if (!(lr > 0.0)) throw std::invalid_argument("optimizer lr must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("weight decay must be non-negative");
  if (!(kernel_lr_mult > 0.0)) throw std::invalid_argument("kernel_lr_mult must be positive");
  slots_.reserve(params.size());
  for (const auto& p : params) {
    Slot s;
    s.m = Eigen::VectorXd::Zero(p.value.data().size());
    s.v = Eigen::VectorXd::Zero(p.value.data().size());
    const bool kernel = GeoformerModel::is_kernel_parameter(p.name);
    s.decay = !kernel;
    s.lr_scale = kernel ? kernel_lr_mult : 1.0;
    slots_.push_back(std::move(s));
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& p : *params_) p.value.zero_grad();
}

void AdamOptimizer::set_lr(double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("optimizer lr must be positive");
  lr_ = lr;
}

void AdamOptimizer::step() {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++step_;
  const double bc1 = 1.0 - std::pow(b1, step_);
  const double bc2 = 1.0 - std::pow(b2, step_);
  for (std::size_t i = 0; i < params_->size(); ++i) {
    auto& p = (*params_)[i];
    const Eigen::VectorXd& g = p.value.grad();
    if (!g.allFinite()) {
      --step_;
      throw std::runtime_error("non-finite gradient in " + p.name);
    }
    auto& s = slots_[i];
    s.m = b1 * s.m + (1.0 - b1) * g;
    s.v = b2 * s.v + (1.0 - b2) * g.cwiseAbs2();
    auto& x = p.value.mutable_data();
    if (s.decay && weight_decay_ > 0.0) x *= (1.0 - lr_ * weight_decay_);
    x.array() -= lr_ * s.lr_scale * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + eps);
  }
}

double clip_gradients(std::vector<Parameter>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip norm must be positive");
  double sq = 0.0;
  for (const auto& p : params) sq += p.value.grad().squaredNorm();
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) return norm;  // leave evidence for the optimizer's check
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params) p.value.node()->grad *= s;
  }
  return norm;
}

PlateauScheduler::PlateauScheduler(double initial_lr, int patience, double factor, double min_lr)
    : lr_(initial_lr), patience_(patience), factor_(factor), min_lr_(min_lr) {
  if (!(initial_lr > 0.0)) throw std::invalid_argument("initial lr must be positive");
  if (patience < 1) throw std::invalid_argument("patience must be at least 1");
  if (!(factor > 0.0 && factor < 1.0)) throw std::invalid_argument("factor must lie in (0, 1)");
  if (!(min_lr > 0.0)) throw std::invalid_argument("min_lr must be positive");
}

double PlateauScheduler::observe(double val_loss) {
  if (!std::isfinite(val_loss)) throw std::invalid_argument("validation loss must be finite");
  if (val_loss < best_ * (1.0 - 1e-6)) {
    best_ = val_loss;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= patience_) {
    lr_ = std::max(lr_ * factor_, min_lr_);
    bad_epochs_ = 0;
  }
  return lr_;
}

namespace {

/// Pooled eval-mode MSE over the listed windows, in bounded chunks.
double eval_mse(const GeoformerModel& model, const std::vector<Eigen::MatrixXd>& wmats,
                const std::vector<Eigen::VectorXd>& tvecs, const std::vector<int>& idx) {
  constexpr int kChunk = 256;
  double sq = 0.0;
  long count = 0;
  for (std::size_t start = 0; start < idx.size(); start += kChunk) {
    const std::size_t stop = std::min(idx.size(), start + kChunk);
    std::vector<Eigen::MatrixXd> chunk;
    chunk.reserve(stop - start);
    for (std::size_t k = start; k < stop; ++k) chunk.push_back(wmats[idx[k]]);
    Eigen::MatrixXd pred = model.predict_batch(chunk);
    for (std::size_t k = start; k < stop; ++k) {
      sq += (pred.row(static_cast<Eigen::Index>(k - start)).transpose() - tvecs[idx[k]])
                .squaredNorm();
      count += tvecs[idx[k]].size();
    }
  }
  return count > 0 ? sq / double(count) : 0.0;
}

/// Variance of eval-mode training residuals (unbiased; mean square when only
/// one residual exists).
double residual_variance(const GeoformerModel& model, const std::vector<Eigen::MatrixXd>& wmats,
                         const std::vector<Eigen::VectorXd>& tvecs, const std::vector<int>& idx) {
  constexpr int kChunk = 256;
  double sum = 0.0, sq = 0.0;
  long count = 0;
  for (std::size_t start = 0; start < idx.size(); start += kChunk) {
    const std::size_t stop = std::min(idx.size(), start + kChunk);
    std::vector<Eigen::MatrixXd> chunk;
    chunk.reserve(stop - start);
    for (std::size_t k = start; k < stop; ++k) chunk.push_back(wmats[idx[k]]);
    Eigen::MatrixXd pred = model.predict_batch(chunk);
    for (std::size_t k = start; k < stop; ++k) {
      Eigen::VectorXd r =
          tvecs[idx[k]] - pred.row(static_cast<Eigen::Index>(k - start)).transpose();
      sum += r.sum();
      sq += r.squaredNorm();
      count += r.size();
    }
  }
  if (count == 0) return 0.0;
  if (count == 1) return sq;
  const double mean = sum / double(count);
  const double var = (sq - double(count) * mean * mean) / double(count - 1);
  return std::max(var, 0.0);
}

}  // namespace

TrainResult train(GeoformerModel& model, const WindowSet& windows, const TrainConfig& config) {
  config.validate();
  const int n = windows.count();
  if (n < 1) throw std::invalid_argument("training requires at least one window");
  if (windows.sites() != model.n_sites() || windows.lookback() != model.config().lookback)
    throw std::invalid_argument("window set does not match the model geometry");

  TrainResult result;
  if (config.max_epochs == 0) return result;  // initialized model, empty log

  const int n_sites = model.n_sites();
  int n_val = static_cast<int>(std::floor(config.val_fraction * n));
  if (config.val_fraction > 0.0 && n_val == 0 && n >= 2) n_val = 1;
  const int n_train = n - n_val;

  // windows arrive in chronological order; validation is the trailing block
  std::vector<int> train_idx(n_train), val_idx(n_val);
  std::iota(train_idx.begin(), train_idx.end(), 0);
  std::iota(val_idx.begin(), val_idx.end(), n_train);

  std::vector<Eigen::MatrixXd> wmats(n);
  std::vector<Eigen::VectorXd> tvecs(n);
  for (int i = 0; i < n; ++i) {
    wmats[i] = windows.window_matrix(i);
    tvecs[i] = windows.target_vector(i);
  }

  std::seed_seq shuffle_seq{config.seed, std::uint64_t{1}};
  std::seed_seq dropout_seq{config.seed, std::uint64_t{2}};
  std::mt19937_64 shuffle_rng(shuffle_seq);
  std::mt19937_64 dropout_rng(dropout_seq);

  AdamOptimizer opt(model.parameters(), config.lr, config.weight_decay,
                    config.kernel_lr_mult);
  PlateauScheduler sched(config.lr, config.plateau_patience, config.plateau_factor, config.min_lr);

  std::vector<Eigen::VectorXd> best_snap = model.snapshot_parameters();
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;

  const std::vector<int> train_chrono = train_idx;
  for (int epoch = 0; epoch < config.max_epochs && !result.diverged; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(train_idx.begin(), train_idx.end(), shuffle_rng);

    double loss_sum = 0.0;
    long weight = 0;
    for (int start = 0; start < n_train; start += config.batch_size) {
      const int bsz = std::min(config.batch_size, n_train - start);
      std::vector<Eigen::MatrixXd> batch;
      batch.reserve(bsz);
      std::vector<double> targets;
      targets.reserve(static_cast<std::size_t>(bsz) * n_sites);
      for (int k = 0; k < bsz; ++k) {
        const int w = train_idx[start + k];
        batch.push_back(wmats[w]);
        targets.insert(targets.end(), tvecs[w].data(), tvecs[w].data() + tvecs[w].size());
      }
      Tensor x = GeoformerModel::stack_windows(batch);
      Tensor y = Tensor::from_values({bsz, n_sites, 1}, std::move(targets));

      opt.zero_grad();
      Tensor loss = mse_loss(model.forward(x, DropoutMode::Train, dropout_rng), y);
      const double lv = loss.value();
      if (!std::isfinite(lv)) {
        result.diverged = true;
        result.error = "training loss became non-finite";
        break;
      }
      loss_sum += lv * bsz;
      weight += bsz;
      loss.backward();
      clip_gradients(model.parameters(), config.clip_norm);
      try {
        opt.step();
      } catch (const std::runtime_error& e) {
        result.diverged = true;
        result.error = e.what();
        break;
      }
    }
    if (result.diverged) break;

    const double train_mse = weight > 0 ? loss_sum / double(weight) : 0.0;
    const double val_mse = n_val > 0 ? eval_mse(model, wmats, tvecs, val_idx) : train_mse;
    const double rho = model.rho();
    if (model.config().variant == ModelVariant::Geo && !(rho > 0.0)) {
      result.diverged = true;
      result.error = "effective range collapsed to zero";
      break;
    }

    double share = 0.0;
    {
      auto records = model.attention_records(wmats[0]);
      for (const auto& rec : records) share += rec.geo_bias_share;
      if (!records.empty()) share /= double(records.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mse = train_mse;
    rec.val_mse = val_mse;
    rec.lr = opt.lr();
    rec.rho = rho;
    rec.lambda = model.lambda();
    rec.geo_bias_share = share;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.epochs.push_back(rec);

    if (val_mse < best_val) {
      best_val = val_mse;
      best_epoch = epoch;
      best_snap = model.snapshot_parameters();
    }
    opt.set_lr(sched.observe(val_mse));
  }

  // roll back to the best checkpoint (the init snapshot if nothing completed)
  model.restore_parameters(best_snap);
  result.best_epoch = best_epoch;
  result.best_val_mse = best_val;
  if (!result.diverged) {
    result.noise_floor = residual_variance(model, wmats, tvecs, train_chrono);
    model.set_noise_floor(result.noise_floor);
  }
  return result;
}

}  // namespace geoformer
