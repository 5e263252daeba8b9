#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "geoformer/grf.hpp"
#include "geoformer/model.hpp"
#include "geoformer/tensor.hpp"

namespace geoformer {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;  // decoupled; kernel parameters are exempt
  int batch_size = 32;
  int max_epochs = 100;
  int plateau_patience = 5;
  double plateau_factor = 0.5;
  double min_lr = 1e-6;
  double val_fraction = 0.2;
  double clip_norm = 5.0;  // global gradient norm ceiling
  // Rate multiplier for the two kernel scalars. The MSE signal on the
  // effective range is tiny next to minibatch noise (the spatial denoising
  // margin is a few percent of the loss), so the scalars get their own,
  // larger rate; Adam's normalization keeps the step bounded either way.
  double kernel_lr_mult = 25.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  double lr = 0.0;
  double rho = 0.0;
  double lambda = 0.0;
  double geo_bias_share = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

struct TrainResult {
  TrainLog log;
  bool diverged = false;
  std::string error;  // diagnostic when diverged
  int best_epoch = -1;
  double best_val_mse = std::numeric_limits<double>::infinity();
  double noise_floor = 0.0;  // training-residual variance at the returned checkpoint
};

/// Bias-corrected Adam (beta1 0.9, beta2 0.999, eps 1e-8) with decoupled
/// weight decay. Kernel parameters never receive decay: pulling theta_rho
/// toward zero would drag the effective range toward softplus(0) and bias
/// the variogram fit. A non-finite gradient aborts the step by throwing
/// std::runtime_error naming the parameter.
class AdamOptimizer {
 public:
  /// kernel_lr_mult scales the rate for kernel parameters only.
  AdamOptimizer(std::vector<Parameter>& params, double lr, double weight_decay,
                double kernel_lr_mult = 1.0);

  void zero_grad();
  void step();

  double lr() const { return lr_; }
  void set_lr(double lr);
  int step_count() const { return step_; }

 private:
  struct Slot {
    Eigen::VectorXd m, v;
    bool decay = true;
    double lr_scale = 1.0;
  };
  std::vector<Parameter>* params_;
  std::vector<Slot> slots_;
  double lr_;
  double weight_decay_;
  int step_ = 0;
};

/// Scales all gradients in place so the global L2 norm is at most max_norm.
/// Returns the pre-clip norm. A non-finite norm leaves the gradients
/// untouched (the optimizer's finite check reports the offender).
double clip_gradients(std::vector<Parameter>& params, double max_norm);

/// Reduce-on-plateau: after `patience` consecutive epochs without a relative
/// improvement of more than 1e-6 over the best seen value, the rate is
/// multiplied by `factor` (floored at min_lr) and the counter restarts.
class PlateauScheduler {
 public:
  PlateauScheduler(double initial_lr, int patience, double factor, double min_lr);

  /// Observes one validation loss and returns the rate for the next epoch.
  double observe(double val_loss);
  double lr() const { return lr_; }

 private:
  double lr_;
  int patience_;
  double factor_;
  double min_lr_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
};

/// Fits the model on the window set: the last fifth (chronologically) is held
/// out for validation, mini-batches are reshuffled each epoch from the seeded
/// stream, and the parameters returned are the best-validation checkpoint.
/// A NaN training loss aborts the run; the model is rolled back to the last
/// finite checkpoint and the result carries the error flag. After training
/// the model's noise floor is set to the training-residual variance.
TrainResult train(GeoformerModel& model, const WindowSet& windows, const TrainConfig& config);

}  // namespace geoformer
