#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace geoformer {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

struct Node {
  std::vector<int> shape;
  Eigen::VectorXd data;   // row-major contiguous
  Eigen::VectorXd grad;   // same length as data once touched
  bool requires_grad = false;
  bool is_leaf = false;
  bool backward_done = false;  // set on the loss node by backward()
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Pulls this node's grad into the parents' grads.
  std::function<void(Node&)> backward_fn;

  Eigen::Index size() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad = Eigen::VectorXd::Zero(data.size());
  }
};

}  // namespace detail

/// Dense double-precision tensor (rank 0..3, row-major) with a dynamic
/// reverse-mode tape. The graph is rebuilt on every forward pass; backward()
/// may be called once per graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor constant(std::vector<int> shape, double value);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor from_matrix(const Eigen::MatrixXd& m, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Eigen::Index size() const { return node_->size(); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Scalar value; throws unless rank 0 (or size 1).
  double value() const;

  const Eigen::VectorXd& data() const { return node_->data; }
  Eigen::VectorXd& mutable_data() { return node_->data; }
  const Eigen::VectorXd& grad() const;
  void zero_grad();

  /// 2-D view of a rank-2 tensor (or one batch slice of a rank-3 tensor).
  Eigen::Map<const RowMat> matrix() const;
  Eigen::Map<const RowMat> batch(int b) const;

  double at(std::initializer_list<int> idx) const;

  /// Deep copy with no graph history; keeps requires_grad.
  Tensor clone_detached() const;

  std::shared_ptr<detail::Node> node() const { return node_; }

  /// Reverse-mode sweep from a scalar loss. Populates .grad on every
  /// reachable tensor that requires grad. Throws if the loss is not scalar,
  /// or on a second call for the same loss node.
  void backward();

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op_tensor(std::vector<int> shape, const char* op,
                               std::vector<Tensor> parents);
};

/// Allocates an op node over parents. The graph edge and backward function
/// are recorded only when grad mode is on and some parent requires grad.
Tensor make_op_tensor(std::vector<int> shape, const char* op, std::vector<Tensor> parents);

/// Trainable leaf with a registry name.
struct Parameter {
  std::string name;
  Tensor value;
};

/// While a guard is alive, new ops record no backward functions; forward
/// results are identical. Used for inference (MC-dropout sampling,
/// recursive unrolling).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

std::string shape_to_string(const std::vector<int>& shape);

// ---- operations -----------------------------------------------------------

/// Matrix product. Supports [m,k]x[k,n], [B,m,k]x[k,n] (shared right factor)
/// and [B,m,k]x[B,k,n]. Throws on inner-dimension mismatch, naming both
/// shapes.
Tensor matmul(const Tensor& a, const Tensor& b);

/// a . b^T on the last two dims: [m,k]x[n,k] -> [m,n], batched variants as
/// matmul. Used for the query-key score.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// Elementwise sum. b may also be rank 1 (bias broadcast over rows) or, for
/// rank-3 a, rank 2 (matrix broadcast over the batch).
Tensor add(const Tensor& a, const Tensor& b);

Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);

enum class DropoutMode { Train, Eval, Sample };  // Sample = MC dropout at inference

/// Zeroes entries with probability p and rescales survivors by 1/(1-p) in
/// Train and Sample modes; identity in Eval mode. p must lie in [0,1).
Tensor dropout(const Tensor& a, double p, DropoutMode mode, std::mt19937_64& rng);

/// Normalizes the last dimension to zero mean / unit variance (eps 1e-5),
/// then applies elementwise gain and bias (rank-1, length = last dim).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

/// Row-stochastic softmax over the last dimension, max-subtracted.
Tensor softmax_rows(const Tensor& x);

/// Concatenate along the last dimension; all parts must agree on the
/// leading dimensions.
Tensor concat_last(const std::vector<Tensor>& parts);

Tensor sum(const Tensor& a);                          // -> scalar
Tensor mse_loss(const Tensor& pred, const Tensor& target);  // -> scalar

}  // namespace geoformer
