#include "geoformer/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <utility>
#include <stdexcept>
#include <unordered_set>

namespace geoformer {

namespace {

std::atomic<std::uint64_t> g_seq{1};
thread_local bool g_grad_enabled = true;

Eigen::Index shape_size(const std::vector<int>& shape) {
  Eigen::Index n = 1;
  for (int d : shape) n *= d;
  return n;
}

void check_shape(const std::vector<int>& shape) {
  if (shape.size() > 3) throw std::invalid_argument("tensor rank > 3 unsupported");
  for (int d : shape)
    if (d <= 0) throw std::invalid_argument("tensor dims must be positive: " + shape_to_string(shape));
}

// rows/cols of the trailing matrix; rank-1 treated as a single row.
std::pair<Eigen::Index, Eigen::Index> trailing_dims(const std::vector<int>& shape) {
  const size_t r = shape.size();
  if (r == 0) return {1, 1};
  if (r == 1) return {1, shape[0]};
  return {shape[r - 2], shape[r - 1]};
}

Eigen::Index batch_count(const std::vector<int>& shape) {
  return shape.size() == 3 ? shape[0] : 1;
}

using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

CMap slice(const Eigen::VectorXd& v, Eigen::Index b, Eigen::Index r, Eigen::Index c) {
  return CMap(v.data() + b * r * c, r, c);
}
MMap slice(Eigen::VectorXd& v, Eigen::Index b, Eigen::Index r, Eigen::Index c) {
  return MMap(v.data() + b * r * c, r, c);
}

}  // namespace

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_op_tensor(std::vector<int> shape, const char* op, std::vector<Tensor> parents) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data.resize(shape_size(node->shape));
  node->seq = g_seq.fetch_add(1);
  node->op = op;
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  node->requires_grad = rg && g_grad_enabled;
  if (node->requires_grad)
    for (auto& p : parents) node->parents.push_back(p.node());
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  check_shape(shape);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = Eigen::VectorXd::Zero(shape_size(node->shape));
  node->requires_grad = requires_grad;
  node->is_leaf = true;
  node->seq = g_seq.fetch_add(1);
  return Tensor(std::move(node));
}

Tensor Tensor::constant(std::vector<int> shape, double value) {
  Tensor t = zeros(std::move(shape), false);
  t.node_->data.setConstant(value);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  Tensor t = zeros({}, requires_grad);
  t.node_->data.resize(1);
  t.node_->data[0] = value;
  return t;
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> values,
                           bool requires_grad) {
  check_shape(shape);
  if (static_cast<Eigen::Index>(values.size()) != shape_size(shape))
    throw std::invalid_argument("from_values: " + std::to_string(values.size()) +
                                " values for shape " + shape_to_string(shape));
  Tensor t = zeros(std::move(shape), requires_grad);
  for (Eigen::Index i = 0; i < t.node_->data.size(); ++i) t.node_->data[i] = values[i];
  return t;
}

Tensor Tensor::from_matrix(const Eigen::MatrixXd& m, bool requires_grad) {
  Tensor t = zeros({static_cast<int>(m.rows()), static_cast<int>(m.cols())}, requires_grad);
  MMap(t.node_->data.data(), m.rows(), m.cols()) = m;
  return t;
}

double Tensor::value() const {
  if (node_->size() != 1)
    throw std::invalid_argument("value() on non-scalar tensor " + shape_to_string(shape()));
  return node_->data[0];
}

const Eigen::VectorXd& Tensor::grad() const {
  if (node_->grad.size() != node_->data.size())
    throw std::runtime_error("grad accessed before backward populated it");
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad = Eigen::VectorXd::Zero(node_->data.size());
}

Eigen::Map<const RowMat> Tensor::matrix() const {
  auto [r, c] = trailing_dims(shape());
  if (rank() == 3)
    throw std::invalid_argument("matrix() on rank-3 tensor; use batch(b)");
  return CMap(node_->data.data(), r, c);
}

Eigen::Map<const RowMat> Tensor::batch(int b) const {
  if (rank() != 3) throw std::invalid_argument("batch() requires rank 3");
  auto [r, c] = trailing_dims(shape());
  return slice(std::as_const(node_->data), b, r, c);
}

double Tensor::at(std::initializer_list<int> idx) const {
  const auto& s = shape();
  if (idx.size() != s.size()) throw std::invalid_argument("at(): rank mismatch");
  Eigen::Index flat = 0;
  size_t k = 0;
  for (int i : idx) {
    flat = flat * s[k] + i;
    ++k;
  }
  return node_->data[flat];
}

Tensor Tensor::clone_detached() const {
  Tensor t = zeros(shape(), node_->requires_grad);
  t.node_->data = node_->data;
  return t;
}

void Tensor::backward() {
  if (node_->size() != 1)
    throw std::invalid_argument("backward() requires a scalar loss, got " +
                                shape_to_string(shape()));
  if (!node_->requires_grad)
    throw std::invalid_argument("backward() on a loss not connected to any parameter");
  if (node_->backward_done)
    throw std::runtime_error("backward() called twice on the same graph; rebuild the "
                             "forward pass (or zero_grad and rerun) first");
  node_->backward_done = true;

  // Collect the reachable subgraph. Creation order majorizes the topological
  // order (parents are always created before children), so running the
  // backward functions in decreasing seq guarantees every consumer has
  // deposited its contribution before a node fires.
  std::vector<detail::Node*> nodes;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (detail::Node* n : nodes) {
    if (n->backward_fn && n->grad.size() == n->data.size()) n->backward_fn(*n);
  }
}

// ---- op helpers ------------------------------------------------------------

namespace {

void accumulate(detail::Node& parent, const Eigen::VectorXd& g) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  parent.grad += g;
}

[[noreturn]] void shape_error(const char* op, const std::vector<int>& a,
                              const std::vector<int>& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_to_string(a) + " x " + shape_to_string(b));
}

}  // namespace

// ---- matmul ----------------------------------------------------------------

namespace {

// shared implementation for A.B and A.B^T
Tensor matmul_impl(const Tensor& a, const Tensor& b, bool transpose_b, const char* opname) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) shape_error(opname, sa, sb);
  auto [m, k] = trailing_dims(sa);
  auto [br, bc] = trailing_dims(sb);
  const Eigen::Index kb = transpose_b ? bc : br;
  const Eigen::Index n = transpose_b ? br : bc;
  if (k != kb) shape_error(opname, sa, sb);
  const Eigen::Index batches_a = batch_count(sa);
  const Eigen::Index batches_b = batch_count(sb);
  if (batches_b != 1 && batches_b != batches_a) shape_error(opname, sa, sb);

  std::vector<int> out_shape;
  if (sa.size() == 3) out_shape = {static_cast<int>(batches_a), static_cast<int>(m),
                                   static_cast<int>(n)};
  else out_shape = {static_cast<int>(m), static_cast<int>(n)};

  Tensor out = make_op_tensor(out_shape, opname, {a, b});
  auto& od = out.node()->data;
  const auto& ad = a.node()->data;
  const auto& bd = b.node()->data;
  if (batches_b == 1) {
    // shared right factor: one gemm over the flattened batch rows
    auto A = CMap(ad.data(), batches_a * m, k);
    auto O = MMap(od.data(), batches_a * m, n);
    if (transpose_b)
      O.noalias() = A * CMap(bd.data(), n, k).transpose();
    else
      O.noalias() = A * CMap(bd.data(), k, n);
  } else {
    for (Eigen::Index i = 0; i < batches_a; ++i) {
      auto A = slice(ad, i, m, k);
      auto O = slice(od, i, m, n);
      if (transpose_b)
        O.noalias() = A * slice(bd, i, n, k).transpose();
      else
        O.noalias() = A * slice(bd, i, k, n);
    }
  }

  if (out.requires_grad()) {
    const bool tb = transpose_b;
    out.node()->backward_fn = [m, k, n, batches_a, batches_b, tb](detail::Node& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) pa.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      if (batches_b == 1) {
        auto G = CMap(self.grad.data(), batches_a * m, n);
        auto A = CMap(pa.data.data(), batches_a * m, k);
        auto B = CMap(pb.data.data(), tb ? n : k, tb ? k : n);
        if (pa.requires_grad) {
          auto GA = MMap(pa.grad.data(), batches_a * m, k);
          if (tb) GA.noalias() += G * B;
          else GA.noalias() += G * B.transpose();
        }
        if (pb.requires_grad) {
          auto GB = MMap(pb.grad.data(), tb ? n : k, tb ? k : n);
          if (tb) GB.noalias() += G.transpose() * A;
          else GB.noalias() += A.transpose() * G;
        }
        return;
      }
      for (Eigen::Index i = 0; i < batches_a; ++i) {
        auto G = slice(self.grad, i, m, n);
        if (pa.requires_grad) {
          auto GA = slice(pa.grad, i, m, k);
          if (tb) GA.noalias() += G * slice(pb.data, i, n, k);
          else GA.noalias() += G * slice(pb.data, i, k, n).transpose();
        }
        if (pb.requires_grad) {
          auto A = slice(pa.data, i, m, k);
          if (tb) {
            auto GB = slice(pb.grad, i, n, k);
            GB.noalias() += G.transpose() * A;
          } else {
            auto GB = slice(pb.grad, i, k, n);
            GB.noalias() += A.transpose() * G;
          }
        }
      }
    };
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false, "matmul"); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, true, "matmul_nt"); }

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  enum class Mode { Same, RowBias, MatrixOverBatch } mode;
  if (sa == sb) mode = Mode::Same;
  else if (sb.size() == 1 && !sa.empty() && sa.back() == sb[0]) mode = Mode::RowBias;
  else if (sa.size() == 3 && sb.size() == 2 && sa[1] == sb[0] && sa[2] == sb[1])
    mode = Mode::MatrixOverBatch;
  else shape_error("add", sa, sb);

  Tensor out = make_op_tensor(sa, "add", {a, b});
  auto& od = out.node()->data;
  const auto& ad = a.node()->data;
  const auto& bd = b.node()->data;
  const Eigen::Index bsize = bd.size();
  switch (mode) {
    case Mode::Same: od = ad + bd; break;
    case Mode::RowBias:
    case Mode::MatrixOverBatch:
      for (Eigen::Index i = 0; i < ad.size(); ++i) od[i] = ad[i] + bd[i % bsize];
      break;
  }

  if (out.requires_grad()) {
    out.node()->backward_fn = [bsize](detail::Node& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) accumulate(pa, self.grad);
      if (pb.requires_grad) {
        pb.ensure_grad();
        if (pb.data.size() == self.data.size()) pb.grad += self.grad;
        else
          for (Eigen::Index i = 0; i < self.grad.size(); ++i)
            pb.grad[i % bsize] += self.grad[i];
      }
    };
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  Tensor out = make_op_tensor(a.shape(), "mul", {a, b});
  out.node()->data = a.node()->data.cwiseProduct(b.node()->data);
  if (out.requires_grad()) {
    out.node()->backward_fn = [](detail::Node& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) accumulate(pa, self.grad.cwiseProduct(pb.data));
      if (pb.requires_grad) accumulate(pb, self.grad.cwiseProduct(pa.data));
    };
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = make_op_tensor(a.shape(), "scale", {a});
  out.node()->data = c * a.node()->data;
  if (out.requires_grad()) {
    out.node()->backward_fn = [c](detail::Node& self) {
      accumulate(*self.parents[0], (c * self.grad).eval());
    };
  }
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = make_op_tensor(a.shape(), "relu", {a});
  out.node()->data = a.node()->data.cwiseMax(0.0);
  if (out.requires_grad()) {
    out.node()->backward_fn = [](detail::Node& self) {
      auto& pa = *self.parents[0];
      Eigen::VectorXd g = self.grad;
      for (Eigen::Index i = 0; i < g.size(); ++i)
        if (pa.data[i] <= 0.0) g[i] = 0.0;
      accumulate(pa, g);
    };
  }
  return out;
}

Tensor dropout(const Tensor& a, double p, DropoutMode mode, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0)
    throw std::domain_error("dropout probability must lie in [0,1), got " + std::to_string(p));
  if (mode == DropoutMode::Eval || p == 0.0) return a;

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  Eigen::VectorXd mask(a.size());
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    mask[i] = unif(rng) < p ? 0.0 : keep_scale;

  Tensor out = make_op_tensor(a.shape(), "dropout", {a});
  out.node()->data = a.node()->data.cwiseProduct(mask);
  if (out.requires_grad()) {
    out.node()->backward_fn = [mask = std::move(mask)](detail::Node& self) {
      accumulate(*self.parents[0], self.grad.cwiseProduct(mask));
    };
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  constexpr double kEps = 1e-5;
  const auto& s = x.shape();
  if (s.empty()) throw std::invalid_argument("layer_norm: scalar input");
  const Eigen::Index n = s.back();
  if (gain.shape() != std::vector<int>{static_cast<int>(n)} ||
      bias.shape() != std::vector<int>{static_cast<int>(n)})
    throw std::invalid_argument("layer_norm: gain/bias must be rank-1 of length " +
                                std::to_string(n));
  const Eigen::Index rows = x.size() / n;

  Tensor out = make_op_tensor(s, "layer_norm", {x, gain, bias});
  Eigen::VectorXd xhat(x.size());
  Eigen::VectorXd inv_std(rows);
  const auto& xd = x.node()->data;
  const auto& gd = gain.node()->data;
  const auto& bd = bias.node()->data;
  auto& od = out.node()->data;
  for (Eigen::Index r = 0; r < rows; ++r) {
    auto row = xd.segment(r * n, n);
    const double mu = row.mean();
    const double var = (row.array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + kEps);
    inv_std[r] = is;
    xhat.segment(r * n, n) = (row.array() - mu) * is;
    od.segment(r * n, n) =
        xhat.segment(r * n, n).cwiseProduct(gd) + bd;
  }

  if (out.requires_grad()) {
    out.node()->backward_fn = [n, rows, xhat = std::move(xhat),
                               inv_std = std::move(inv_std)](detail::Node& self) {
      auto& px = *self.parents[0];
      auto& pg = *self.parents[1];
      auto& pb = *self.parents[2];
      if (px.requires_grad) px.ensure_grad();
      if (pg.requires_grad) pg.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      for (Eigen::Index r = 0; r < rows; ++r) {
        auto g = self.grad.segment(r * n, n);
        auto xh = xhat.segment(r * n, n);
        if (pg.requires_grad) pg.grad += g.cwiseProduct(xh);
        if (pb.requires_grad) pb.grad += g;
        if (px.requires_grad) {
          Eigen::VectorXd dxhat = g.cwiseProduct(pg.data);
          const double m1 = dxhat.mean();
          const double m2 = dxhat.cwiseProduct(xh).mean();
          px.grad.segment(r * n, n) +=
              inv_std[r] * (dxhat.array() - m1 - xh.array() * m2).matrix();
        }
      }
    };
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  const auto& s = x.shape();
  if (s.empty()) throw std::invalid_argument("softmax_rows: scalar input");
  const Eigen::Index n = s.back();
  const Eigen::Index rows = x.size() / n;
  Tensor out = make_op_tensor(s, "softmax_rows", {x});
  const auto& xd = x.node()->data;
  auto& od = out.node()->data;
  for (Eigen::Index r = 0; r < rows; ++r) {
    auto row = xd.segment(r * n, n);
    const double mx = row.maxCoeff();
    Eigen::VectorXd e = (row.array() - mx).exp();
    od.segment(r * n, n) = e / e.sum();
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [n, rows](detail::Node& self) {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      px.ensure_grad();
      for (Eigen::Index r = 0; r < rows; ++r) {
        auto y = self.data.segment(r * n, n);
        auto g = self.grad.segment(r * n, n);
        const double dot = g.dot(y);
        px.grad.segment(r * n, n) += y.cwiseProduct((g.array() - dot).matrix());
      }
    };
  }
  return out;
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last: no parts");
  const auto& s0 = parts[0].shape();
  if (s0.empty()) throw std::invalid_argument("concat_last: scalar parts");
  std::vector<int> lead(s0.begin(), s0.end() - 1);
  int total = 0;
  std::vector<int> widths;
  for (const auto& p : parts) {
    const auto& sp = p.shape();
    if (std::vector<int>(sp.begin(), sp.end() - 1) != lead)
      throw std::invalid_argument("concat_last: leading dims disagree: " +
                                  shape_to_string(s0) + " vs " + shape_to_string(sp));
    widths.push_back(sp.back());
    total += sp.back();
  }
  std::vector<int> out_shape = lead;
  out_shape.push_back(total);
  std::vector<Tensor> tensor_parents(parts.begin(), parts.end());
  Tensor out = make_op_tensor(out_shape, "concat_last", tensor_parents);
  const Eigen::Index rows = out.size() / total;
  auto& od = out.node()->data;
  Eigen::Index col0 = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const Eigen::Index w = widths[k];
    const auto& pd = parts[k].node()->data;
    for (Eigen::Index r = 0; r < rows; ++r)
      od.segment(r * total + col0, w) = pd.segment(r * w, w);
    col0 += w;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [widths, total, rows](detail::Node& self) {
      Eigen::Index col0 = 0;
      for (size_t k = 0; k < self.parents.size(); ++k) {
        auto& p = *self.parents[k];
        const Eigen::Index w = widths[k];
        if (p.requires_grad) {
          p.ensure_grad();
          for (Eigen::Index r = 0; r < rows; ++r)
            p.grad.segment(r * w, w) += self.grad.segment(r * total + col0, w);
        }
        col0 += w;
      }
    };
  }
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = make_op_tensor({}, "sum", {a});
  out.node()->data.resize(1);
  out.node()->data[0] = a.node()->data.sum();
  if (out.requires_grad()) {
    out.node()->backward_fn = [](detail::Node& self) {
      auto& pa = *self.parents[0];
      if (!pa.requires_grad) return;
      pa.ensure_grad();
      pa.grad.array() += self.grad[0];
    };
  }
  return out;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    shape_error("mse_loss", pred.shape(), target.shape());
  if (pred.size() == 0) throw std::invalid_argument("mse_loss: empty input");
  Tensor out = make_op_tensor({}, "mse_loss", {pred, target});
  out.node()->data.resize(1);
  const Eigen::VectorXd diff = pred.node()->data - target.node()->data;
  out.node()->data[0] = diff.squaredNorm() / static_cast<double>(diff.size());
  if (out.requires_grad()) {
    out.node()->backward_fn = [](detail::Node& self) {
      auto& pp = *self.parents[0];
      auto& pt = *self.parents[1];
      const double n = static_cast<double>(pp.data.size());
      const Eigen::VectorXd d = (2.0 / n) * self.grad[0] * (pp.data - pt.data);
      if (pp.requires_grad) accumulate(pp, d);
      if (pt.requires_grad) accumulate(pt, (-d).eval());
    };
  }
  return out;
}

}  // namespace geoformer
