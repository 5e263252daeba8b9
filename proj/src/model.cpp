#include "geoformer/model.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace geoformer {

namespace {

Tensor glorot_tensor(std::vector<int> shape, int fan_in, int fan_out, std::mt19937_64& rng) {
  Tensor t = Tensor::zeros(shape, true);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in + fan_out)));
  auto& d = t.mutable_data();
  for (Eigen::Index i = 0; i < d.size(); ++i) d[i] = dist(rng);
  return t;
}

Tensor normal_tensor(std::vector<int> shape, double sd, std::mt19937_64& rng) {
  Tensor t = Tensor::zeros(shape, true);
  std::normal_distribution<double> dist(0.0, sd);
  auto& d = t.mutable_data();
  for (Eigen::Index i = 0; i < d.size(); ++i) d[i] = dist(rng);
  return t;
}

Tensor ones_tensor(std::vector<int> shape) {
  Tensor t = Tensor::zeros(shape, true);
  t.mutable_data().setOnes();
  return t;
}

}  // namespace

std::string to_string(ModelVariant v) {
  return v == ModelVariant::Geo ? "geo" : "vanilla";
}

ModelVariant model_variant_from_string(const std::string& s) {
  if (s == "geo") return ModelVariant::Geo;
  if (s == "vanilla") return ModelVariant::Vanilla;
  throw std::invalid_argument("unknown model variant: " + s);
}

void ModelConfig::validate() const {
  if (d_model < 1) throw std::invalid_argument("d_model must be positive");
  if (n_heads < 1) throw std::invalid_argument("n_heads must be positive");
  if (d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
  if (n_layers < 1) throw std::invalid_argument("n_layers must be positive");
  if (lookback < 1) throw std::invalid_argument("lookback must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0))
    throw std::invalid_argument("dropout_p must lie in [0, 1)");
}

GeoformerModel::GeoformerModel(ModelConfig config, SensorGrid grid, std::uint64_t init_seed)
    : config_(std::move(config)), grid_(std::move(grid)) {
  config_.validate();
  if (grid_.n() == 0) throw std::invalid_argument("model requires a nonempty sensor grid");

  std::mt19937_64 rng(init_seed);
  const int d = config_.d_model;
  const int dk = config_.d_k();
  const int l = config_.lookback;
  const int n = n_sites();

  embed_w_ = register_param("embed.w", glorot_tensor({l, d}, l, d, rng));
  embed_b_ = register_param("embed.b", Tensor::zeros({d}, true));
  if (config_.variant == ModelVariant::Vanilla)
    pos_e_ = register_param("pos.e", normal_tensor({n, d}, 0.02, rng));

  layers_.resize(config_.n_layers);
  for (int li = 0; li < config_.n_layers; ++li) {
    auto& lp = layers_[li];
    const std::string p = "layer" + std::to_string(li) + ".";
    for (int h = 0; h < config_.n_heads; ++h) {
      const std::string hp = p + "attn.h" + std::to_string(h) + ".";
      // Geo Q and K start near zero so attention opens as the kernel
      // smoother and the content pathway grows in during training; the
      // Vanilla baseline keeps the conventional Glorot scale throughout.
      const bool small_qk = config_.variant == ModelVariant::Geo;
      lp.wq.push_back(register_param(
          hp + "wq", small_qk ? normal_tensor({d, dk}, 0.02, rng)
                              : glorot_tensor({d, dk}, d, dk, rng)));
      lp.wk.push_back(register_param(
          hp + "wk", small_qk ? normal_tensor({d, dk}, 0.02, rng)
                              : glorot_tensor({d, dk}, d, dk, rng)));
      lp.wv.push_back(register_param(hp + "wv", glorot_tensor({d, dk}, d, dk, rng)));
    }
    lp.wo = register_param(p + "attn.wo", glorot_tensor({d, d}, d, d, rng));
    lp.bo = register_param(p + "attn.bo", Tensor::zeros({d}, true));
    lp.ln1_g = register_param(p + "ln1.gain", ones_tensor({d}));
    lp.ln1_b = register_param(p + "ln1.bias", Tensor::zeros({d}, true));
    lp.ffn_w1 = register_param(p + "ffn.w1", glorot_tensor({d, 4 * d}, d, 4 * d, rng));
    lp.ffn_b1 = register_param(p + "ffn.b1", Tensor::zeros({4 * d}, true));
    lp.ffn_w2 = register_param(p + "ffn.w2", glorot_tensor({4 * d, d}, 4 * d, d, rng));
    lp.ffn_b2 = register_param(p + "ffn.b2", Tensor::zeros({d}, true));
    lp.ln2_g = register_param(p + "ln2.gain", ones_tensor({d}));
    lp.ln2_b = register_param(p + "ln2.bias", Tensor::zeros({d}, true));
  }
  final_ln_g_ = register_param("final_ln.gain", ones_tensor({d}));
  final_ln_b_ = register_param("final_ln.bias", Tensor::zeros({d}, true));
  head_w_ = register_param("head.w", glorot_tensor({d, 1}, d, 1, rng));
  head_b_ = register_param("head.b", Tensor::zeros({1}, true));

  if (config_.variant == ModelVariant::Geo) {
    const int n_kernel = config_.share_kernel_across_heads ? 1 : config_.n_heads;
    for (int h = 0; h < n_kernel; ++h) {
      const std::string kp = config_.share_kernel_across_heads
                                 ? std::string("kernel.")
                                 : "kernel.h" + std::to_string(h) + ".";
      theta_rho_.push_back(
          register_param(kp + "theta_rho", Tensor::from_values({1}, {config_.kernel.theta_rho}, true)));
      theta_lambda_.push_back(register_param(
          kp + "theta_lambda", Tensor::from_values({1}, {config_.kernel.theta_lambda}, true)));
    }
    kernel_caches_.resize(n_kernel);
  }
}

Tensor GeoformerModel::register_param(const std::string& name, Tensor t) {
  params_.push_back(Parameter{name, t});
  return t;
}

const Parameter* GeoformerModel::find_parameter(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

Parameter* GeoformerModel::find_parameter(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

bool GeoformerModel::is_kernel_parameter(const std::string& name) {
  return name.rfind("kernel.", 0) == 0;
}

double GeoformerModel::rho() const {
  if (config_.variant != ModelVariant::Geo) return 0.0;
  double s = 0.0;
  for (const auto& t : theta_rho_) s += softplus(t.value());
  return s / double(theta_rho_.size());
}

double GeoformerModel::lambda() const {
  if (config_.variant != ModelVariant::Geo) return 0.0;
  double s = 0.0;
  for (const auto& t : theta_lambda_) s += softplus(t.value());
  return s / double(theta_lambda_.size());
}

Eigen::MatrixXd GeoformerModel::kernel_bias_matrix_now() const {
  const Eigen::Index n = grid_.n();
  if (config_.variant != ModelVariant::Geo) return Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t h = 0; h < theta_rho_.size(); ++h) {
    const double r = softplus(theta_rho_[h].value());
    const double lam = softplus(theta_lambda_[h].value());
    acc += lam * correlation_matrix(grid_, r, config_.kernel.family);
  }
  return acc / double(theta_rho_.size());
}

std::vector<Tensor> GeoformerModel::head_bias_tensors() const {
  if (config_.variant != ModelVariant::Geo) return {};
  std::vector<Tensor> out;
  if (config_.share_kernel_across_heads) {
    Tensor b = kernel_bias(theta_rho_[0], theta_lambda_[0], grid_, config_.kernel.family,
                           kernel_caches_[0]);
    out.assign(static_cast<std::size_t>(config_.n_heads), b);
  } else {
    for (int h = 0; h < config_.n_heads; ++h)
      out.push_back(kernel_bias(theta_rho_[h], theta_lambda_[h], grid_, config_.kernel.family,
                                kernel_caches_[h]));
  }
  return out;
}

Tensor GeoformerModel::forward(const Tensor& windows, DropoutMode mode, std::mt19937_64& rng,
                               std::vector<AttentionRecord>* records) const {
  const int rank = windows.rank();
  if (rank != 2 && rank != 3)
    throw std::invalid_argument("model input must be [N,L] or [B,N,L]");
  const int n = windows.shape()[rank - 2];
  const int l = windows.shape()[rank - 1];
  if (n != n_sites() || l != config_.lookback)
    throw std::invalid_argument("model input shape does not match grid size and lookback");
  if (!windows.data().allFinite())
    throw std::invalid_argument("model input contains non-finite values");
  if (records) records->clear();

  Tensor x = add(matmul(windows, embed_w_), embed_b_);
  if (config_.variant == ModelVariant::Vanilla) x = add(x, pos_e_);

  const std::vector<Tensor> biases = head_bias_tensors();
  const double inv_sqrt_dk = 1.0 / std::sqrt(double(config_.d_k()));

  for (const auto& lp : layers_) {
    Tensor h = layer_norm(x, lp.ln1_g, lp.ln1_b);
    std::vector<Tensor> head_outs;
    head_outs.reserve(lp.wq.size());
    AttentionRecord rec;
    double abs_scores = 0.0, abs_bias = 0.0;
    for (std::size_t hd = 0; hd < lp.wq.size(); ++hd) {
      Tensor q = matmul(h, lp.wq[hd]);
      Tensor k = matmul(h, lp.wk[hd]);
      Tensor v = matmul(h, lp.wv[hd]);
      Tensor scores = scale(matmul_nt(q, k), inv_sqrt_dk);
      if (!biases.empty()) {
        if (records) {
          abs_scores += scores.data().cwiseAbs().mean();
          abs_bias += biases[hd].data().cwiseAbs().mean();
        }
        scores = add(scores, biases[hd]);
      }
      Tensor attn = softmax_rows(scores);
      if (records)
        rec.weights.emplace_back(rank == 3 ? attn.batch(0) : attn.matrix());
      head_outs.push_back(matmul(attn, v));
    }
    if (records) {
      const double denom = abs_scores + abs_bias;
      rec.geo_bias_share = denom > 0.0 ? abs_bias / denom : 0.0;
      records->push_back(std::move(rec));
    }
    Tensor attn_out = add(matmul(concat_last(head_outs), lp.wo), lp.bo);
    x = add(x, dropout(attn_out, config_.dropout_p, mode, rng));

    Tensor f = layer_norm(x, lp.ln2_g, lp.ln2_b);
    f = relu(add(matmul(f, lp.ffn_w1), lp.ffn_b1));
    f = add(matmul(f, lp.ffn_w2), lp.ffn_b2);
    x = add(x, dropout(f, config_.dropout_p, mode, rng));
  }

  x = layer_norm(x, final_ln_g_, final_ln_b_);
  return add(matmul(x, head_w_), head_b_);
}

Tensor GeoformerModel::stack_windows(const std::vector<Eigen::MatrixXd>& windows) {
  if (windows.empty()) throw std::invalid_argument("window batch is empty");
  const int b = static_cast<int>(windows.size());
  const int n = static_cast<int>(windows.front().rows());
  const int l = static_cast<int>(windows.front().cols());
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(b) * n * l);
  for (const auto& w : windows) {
    if (w.rows() != n || w.cols() != l)
      throw std::invalid_argument("windows in a batch must share one shape");
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < l; ++j) values.push_back(w(i, j));
  }
  return Tensor::from_values({b, n, l}, std::move(values));
}

Eigen::VectorXd GeoformerModel::predict(const Eigen::MatrixXd& window) const {
  NoGradGuard guard;
  std::mt19937_64 rng(0);  // untouched in eval mode
  Tensor out = forward(Tensor::from_matrix(window), DropoutMode::Eval, rng);
  return out.data();
}

Eigen::MatrixXd GeoformerModel::predict_batch(const std::vector<Eigen::MatrixXd>& windows) const {
  NoGradGuard guard;
  std::mt19937_64 rng(0);
  Tensor out = forward(stack_windows(windows), DropoutMode::Eval, rng);
  const int b = static_cast<int>(windows.size());
  const int n = n_sites();
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      out.data().data(), b, n);
}

std::vector<AttentionRecord> GeoformerModel::attention_records(
    const Eigen::MatrixXd& window) const {
  NoGradGuard guard;
  std::mt19937_64 rng(0);
  std::vector<AttentionRecord> records;
  forward(Tensor::from_matrix(window), DropoutMode::Eval, rng, &records);
  return records;
}

void GeoformerModel::predict_distribution(const Eigen::MatrixXd& window, int n_mc,
                                          std::mt19937_64& rng, Eigen::VectorXd& mean,
                                          Eigen::VectorXd& variance) const {
  Eigen::MatrixXd m, v;
  predict_distribution_batch({window}, n_mc, rng, m, v);
  mean = m.row(0).transpose();
  variance = v.row(0).transpose();
}

void GeoformerModel::predict_distribution_batch(const std::vector<Eigen::MatrixXd>& windows,
                                                int n_mc, std::mt19937_64& rng,
                                                Eigen::MatrixXd& mean,
                                                Eigen::MatrixXd& variance) const {
  if (n_mc < 2) throw std::invalid_argument("predictive distribution needs n_mc >= 2");
  NoGradGuard guard;
  Tensor input = stack_windows(windows);
  const int b = static_cast<int>(windows.size());
  const int n = n_sites();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(b) * n);
  Eigen::VectorXd sumsq = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(b) * n);
  for (int s = 0; s < n_mc; ++s) {
    Tensor out = forward(input, DropoutMode::Sample, rng);
    sum += out.data();
    sumsq += out.data().cwiseAbs2();
  }
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::VectorXd mu = sum / double(n_mc);
  Eigen::VectorXd var =
      ((sumsq - double(n_mc) * mu.cwiseAbs2()) / double(n_mc - 1)).cwiseMax(0.0).array() +
      noise_floor_;
  mean = Eigen::Map<const RowMajor>(mu.data(), b, n);
  variance = Eigen::Map<const RowMajor>(var.data(), b, n);
}

Eigen::MatrixXd GeoformerModel::recursive_forecast(const Eigen::MatrixXd& window,
                                                   int horizon) const {
  auto per_step = recursive_forecast_batch({window}, horizon);
  Eigen::MatrixXd out(horizon, n_sites());
  for (int h = 0; h < horizon; ++h) out.row(h) = per_step[h].row(0);
  return out;
}

std::vector<Eigen::MatrixXd> GeoformerModel::recursive_forecast_batch(
    const std::vector<Eigen::MatrixXd>& windows, int horizon) const {
  if (horizon < 1) throw std::invalid_argument("horizon must be at least 1");
  std::vector<Eigen::MatrixXd> wins = windows;
  std::vector<Eigen::MatrixXd> out;
  out.reserve(horizon);
  const int l = config_.lookback;
  for (int h = 0; h < horizon; ++h) {
    Eigen::MatrixXd pred = predict_batch(wins);  // B x N
    out.push_back(pred);
    for (std::size_t b = 0; b < wins.size(); ++b) {
      // drop the oldest column, append the prediction as the newest
      wins[b].leftCols(l - 1) = wins[b].rightCols(l - 1).eval();
      wins[b].col(l - 1) = pred.row(static_cast<Eigen::Index>(b)).transpose();
    }
  }
  return out;
}

void GeoformerModel::set_noise_floor(double sigma_eps2) {
  if (!(sigma_eps2 >= 0.0) || !std::isfinite(sigma_eps2))
    throw std::invalid_argument("noise floor must be finite and non-negative");
  noise_floor_ = sigma_eps2;
}

std::vector<Eigen::VectorXd> GeoformerModel::snapshot_parameters() const {
  std::vector<Eigen::VectorXd> snap;
  snap.reserve(params_.size());
  for (const auto& p : params_) snap.push_back(p.value.data());
  return snap;
}

void GeoformerModel::restore_parameters(const std::vector<Eigen::VectorXd>& snapshot) {
  if (snapshot.size() != params_.size())
    throw std::invalid_argument("parameter snapshot count mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (snapshot[i].size() != params_[i].value.data().size())
      throw std::invalid_argument("parameter snapshot shape mismatch for " + params_[i].name);
    params_[i].value.mutable_data() = snapshot[i];
  }
}

}  // namespace geoformer
