#include "dw0/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace dw0 {

namespace {

Shape matrix_shape(Eigen::Index rows, Eigen::Index cols) {
  return {static_cast<int>(rows), static_cast<int>(cols)};
}

template <typename Scalar>
void require_same_dims(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

}  // namespace

std::shared_ptr<const AttentionMask> causal_mask(int length) {
  auto mask = std::make_shared<AttentionMask>(length, length);
  for (int i = 0; i < length; ++i)
    for (int j = 0; j < length; ++j) (*mask)(i, j) = j <= i ? 1 : 0;
  return mask;
}

// ---- ParamSet -------------------------------------------------------------

template <typename Scalar>
Parameter<Scalar>& ParamSet<Scalar>::add(const std::string& name, const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("ParamSet::add: empty shape for " + name);
  for (int d : shape)
    if (d <= 0) throw std::invalid_argument("ParamSet::add: non-positive dim for " + name);
  if (params_.count(name)) throw std::invalid_argument("ParamSet::add: duplicate parameter " + name);
  const Eigen::Index cols = shape.back();
  const Eigen::Index rows = shape_numel(shape) / cols;
  Parameter<Scalar> p;
  p.name = name;
  p.shape = shape;
  p.value = Matrix<Scalar>::Zero(rows, cols);
  p.grad = Matrix<Scalar>::Zero(rows, cols);
  return params_.emplace(name, std::move(p)).first->second;
}

template <typename Scalar>
Parameter<Scalar>& ParamSet<Scalar>::add_normal(const std::string& name, const Shape& shape, double stddev,
                                                Rng& rng) {
  auto& p = add(name, shape);
  for (Eigen::Index i = 0; i < p.value.size(); ++i)
    p.value.data()[i] = static_cast<Scalar>(stddev * rng.normal());
  return p;
}

template <typename Scalar>
Parameter<Scalar>& ParamSet<Scalar>::add_constant(const std::string& name, const Shape& shape, Scalar value) {
  auto& p = add(name, shape);
  p.value.setConstant(value);
  return p;
}

template <typename Scalar>
Parameter<Scalar>& ParamSet<Scalar>::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

template <typename Scalar>
const Parameter<Scalar>& ParamSet<Scalar>::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

template <typename Scalar>
void ParamSet<Scalar>::zero_grad() {
  for (auto& [_, p] : params_) p.grad.setZero();
}

template <typename Scalar>
std::int64_t ParamSet<Scalar>::numel() const {
  std::int64_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

// ---- Tensor / Tape --------------------------------------------------------

template <typename Scalar>
const Matrix<Scalar>& Tensor<Scalar>::value() const {
  return tape_->value(id_);
}

template <typename Scalar>
const Matrix<Scalar>& Tensor<Scalar>::grad() const {
  return tape_->grad(id_);
}

template <typename Scalar>
const Shape& Tensor<Scalar>::shape() const {
  return tape_->shape(id_);
}

template <typename Scalar>
bool Tensor<Scalar>::requires_grad() const {
  return tape_->requires_grad(id_);
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  const auto& v = value();
  if (v.size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
  return v(0, 0);
}

template <typename Scalar>
const Matrix<Scalar>& Tape<Scalar>::value(int id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

template <typename Scalar>
Matrix<Scalar>& Tape<Scalar>::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) {
    const auto& v = value(id);
    n.grad = Matrix<Scalar>::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

template <typename Scalar>
Tensor<Scalar> Tape<Scalar>::push(Node node) {
  const auto& v = node.external ? *node.external : node.value;
  if (node.shape.empty()) node.shape = matrix_shape(v.rows(), v.cols());
  if (shape_numel(node.shape) != v.size()) {
    throw std::invalid_argument("tensor shape " + shape_str(node.shape) + " does not match " +
                                std::to_string(v.size()) + " values");
  }
  nodes_.push_back(std::move(node));
  return Tensor<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename Scalar>
Tensor<Scalar> Tape<Scalar>::constant(Matrix<Scalar> value, Shape shape) {
  Node n;
  n.value = std::move(value);
  n.shape = std::move(shape);
  return push(std::move(n));
}

template <typename Scalar>
Tensor<Scalar> Tape<Scalar>::variable(Matrix<Scalar> value, Shape shape) {
  Node n;
  n.value = std::move(value);
  n.shape = std::move(shape);
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

template <typename Scalar>
Tensor<Scalar> Tape<Scalar>::param(Parameter<Scalar>& p) {
  Node n;
  n.external = &p.value;
  n.shape = p.shape;
  n.requires_grad = grad_enabled_ && p.trainable;
  n.param = n.requires_grad ? &p : nullptr;
  return push(std::move(n));
}

template <typename Scalar>
Tensor<Scalar> Tape<Scalar>::record(Matrix<Scalar> value, Shape shape,
                                    std::initializer_list<Tensor<Scalar>> parents, Backward backward) {
  return record(std::move(value), std::move(shape), std::vector<Tensor<Scalar>>(parents), std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> Tape<Scalar>::record(Matrix<Scalar> value, Shape shape, const std::vector<Tensor<Scalar>>& parents,
                                    Backward backward) {
  bool needs = false;
  if (grad_enabled_)
    for (const auto& p : parents) needs = needs || p.requires_grad();
  Node n;
  n.value = std::move(value);
  n.shape = std::move(shape);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(backward);
  return push(std::move(n));
}

template <typename Scalar>
void Tape<Scalar>::backward(const Tensor<Scalar>& loss) {
  if (loss.value().size() != 1) throw std::invalid_argument("backward: loss must be a scalar");
  if (!loss.requires_grad()) return;
  grad_buffer(loss.node_id())(0, 0) += Scalar(1);
  for (int id = loss.node_id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param) n.param->grad += n.grad;
  }
}

// ---- elementwise ----------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_dims("add", a, b);
  const int ia = a.node_id(), ib = b.node_id();
  return a.tape().record(a.value() + b.value(), a.shape(), {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad_buffer(ia) += g;
    if (t.requires_grad(ib)) t.grad_buffer(ib) += g;
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_dims("sub", a, b);
  const int ia = a.node_id(), ib = b.node_id();
  return a.tape().record(a.value() - b.value(), a.shape(), {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad_buffer(ia) += g;
    if (t.requires_grad(ib)) t.grad_buffer(ib) -= g;
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_dims("mul", a, b);
  const int ia = a.node_id(), ib = b.node_id();
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(out), a.shape(), {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad_buffer(ia) += g.cwiseProduct(t.value(ib));
    if (t.requires_grad(ib)) t.grad_buffer(ib) += g.cwiseProduct(t.value(ia));
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  const int ia = a.node_id();
  return a.tape().record(a.value() * factor, a.shape(), {a}, [ia, factor](Tape<Scalar>& t, int self) {
    t.grad_buffer(ia) += t.grad(self) * factor;
  });
}

template <typename Scalar>
Tensor<Scalar> add_row(const Tensor<Scalar>& x, const Tensor<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw std::invalid_argument("add_row: row " + shape_str(row.shape()) + " incompatible with " +
                                shape_str(x.shape()));
  }
  const int ix = x.node_id(), ir = row.node_id();
  Matrix<Scalar> out = x.value().rowwise() + row.value().row(0);
  return x.tape().record(std::move(out), x.shape(), {x, row}, [ix, ir](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ix)) t.grad_buffer(ix) += g;
    if (t.requires_grad(ir)) t.grad_buffer(ir) += g.colwise().sum();
  });
}

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const int ia = a.node_id(), ib = b.node_id();
  Matrix<Scalar> out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return a.tape().record(std::move(out), {}, {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad_buffer(ia).noalias() += g * t.value(ib).transpose();
    if (t.requires_grad(ib)) t.grad_buffer(ib).noalias() += t.value(ia).transpose() * g;
  });
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
  return add_row(matmul(x, w), b);
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  // tanh approximation
  const Scalar c = static_cast<Scalar>(std::sqrt(2.0 / std::numbers::pi));
  const Scalar k = static_cast<Scalar>(0.044715);
  const auto xa = x.value().array();
  auto th = std::make_shared<Matrix<Scalar>>((c * (xa + k * xa.cube())).tanh().matrix());
  Matrix<Scalar> out = (Scalar(0.5) * xa * (Scalar(1) + th->array())).matrix();
  const int ix = x.node_id();
  return x.tape().record(std::move(out), x.shape(), {x}, [ix, c, k, th](Tape<Scalar>& t, int self) {
    const auto g = t.grad(self).array();
    const auto z = t.value(ix).array();
    const auto h = th->array();
    const auto dth = (Scalar(1) - h.square()) * c * (Scalar(1) + Scalar(3) * k * z.square());
    t.grad_buffer(ix).array() += g * (Scalar(0.5) * (Scalar(1) + h) + Scalar(0.5) * z * dth);
  });
}

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x) {
  const auto& xv = x.value();
  if (xv.cols() < 1) throw std::invalid_argument("softmax_rows: empty trailing dimension");
  if (!xv.allFinite()) throw NumericError("softmax_rows: non-finite input");
  Matrix<Scalar> out(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const Scalar m = xv.row(r).maxCoeff();
    out.row(r) = (xv.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  const int ix = x.node_id();
  const int out_id = static_cast<int>(x.tape().size());
  return x.tape().record(std::move(out), x.shape(), {x}, [ix, out_id](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(out_id);
    auto& gx = t.grad_buffer(ix);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const Scalar dot = g.row(r).dot(y.row(r));
      gx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& bias,
                          Scalar eps) {
  if (!(eps > Scalar(0))) throw std::invalid_argument("layer_norm: eps must be positive");
  const Eigen::Index n = x.cols();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw std::invalid_argument("layer_norm: gain/bias must match feature dimension " + std::to_string(n));
  }
  const auto& xv = x.value();
  Matrix<Scalar> xhat(xv.rows(), n);
  std::vector<Scalar> inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const Scalar mu = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mu).square().mean();
    inv_std[r] = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std[r];
  }
  const auto g_row = Eigen::Map<const RowVector<Scalar>>(gain.value().data(), n);
  const auto b_row = Eigen::Map<const RowVector<Scalar>>(bias.value().data(), n);
  Matrix<Scalar> out = (xhat.array().rowwise() * g_row.array()).rowwise() + b_row.array();
  const int ix = x.node_id(), ig = gain.node_id(), ib = bias.node_id();
  auto saved = std::make_shared<std::pair<Matrix<Scalar>, std::vector<Scalar>>>(std::move(xhat), std::move(inv_std));
  return x.tape().record(std::move(out), x.shape(), {x, gain, bias}, [ix, ig, ib, saved, n](Tape<Scalar>& t,
                                                                                          int self) {
    const auto& g = t.grad(self);
    const auto& xhat = saved->first;
    const auto& inv_std = saved->second;
    if (t.requires_grad(ig)) {
      RowVector<Scalar> dg = g.cwiseProduct(xhat).colwise().sum();
      auto& buf = t.grad_buffer(ig);
      Eigen::Map<RowVector<Scalar>>(buf.data(), n) += dg;
    }
    if (t.requires_grad(ib)) {
      RowVector<Scalar> db = g.colwise().sum();
      auto& buf = t.grad_buffer(ib);
      Eigen::Map<RowVector<Scalar>>(buf.data(), n) += db;
    }
    if (t.requires_grad(ix)) {
      const auto& gv = t.value(ig);
      const auto g_row = Eigen::Map<const RowVector<Scalar>>(gv.data(), n);
      auto& gx = t.grad_buffer(ix);
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        RowVector<Scalar> dxhat = g.row(r).cwiseProduct(g_row);
        const Scalar m1 = dxhat.mean();
        const Scalar m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
        gx.row(r).array() += inv_std[r] * (dxhat.array() - m1 - xhat.row(r).array() * m2);
      }
    }
  });
}

// ---- indexing -------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> embedding_lookup(const Tensor<Scalar>& table, std::span<const int> ids) {
  const auto vocab = table.rows();
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(vocab));
    }
  }
  return gather_rows(table, ids);
}

template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::span<const int> index) {
  const auto& xv = x.value();
  Matrix<Scalar> out(static_cast<Eigen::Index>(index.size()), xv.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= xv.rows()) throw std::out_of_range("gather_rows: row index out of range");
    out.row(static_cast<Eigen::Index>(i)) = xv.row(index[i]);
  }
  const int ix = x.node_id();
  auto idx = std::make_shared<std::vector<int>>(index.begin(), index.end());
  return x.tape().record(std::move(out), {}, {x}, [ix, idx](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < idx->size(); ++i) gx.row((*idx)[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

template <typename Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const auto cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  Eigen::Index r = 0;
  std::vector<std::pair<int, Eigen::Index>> spans;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.node_id(), r);
    r += p.rows();
  }
  return parts.front().tape().record(std::move(out), {}, parts, [spans](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    for (const auto& [id, start] : spans)
      if (t.requires_grad(id)) t.grad_buffer(id) += g.middleRows(start, t.value(id).rows());
  });
}

template <typename Scalar>
Tensor<Scalar> concat_cols(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const auto rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix<Scalar> out(rows, cols);
  Eigen::Index c = 0;
  std::vector<std::pair<int, Eigen::Index>> spans;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    spans.emplace_back(p.node_id(), c);
    c += p.cols();
  }
  return parts.front().tape().record(std::move(out), {}, parts, [spans](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    for (const auto& [id, start] : spans)
      if (t.requires_grad(id)) t.grad_buffer(id) += g.middleCols(start, t.value(id).cols());
  });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, const Shape& shape) {
  if (shape.empty() || shape_numel(shape) != x.value().size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const Eigen::Index cols = shape.back();
  const Eigen::Index rows = x.value().size() / cols;
  Matrix<Scalar> out = Eigen::Map<const Matrix<Scalar>>(x.value().data(), rows, cols);
  const int ix = x.node_id();
  return x.tape().record(std::move(out), shape, {x}, [ix](Tape<Scalar>& t, int self) {
    auto& gx = t.grad_buffer(ix);
    const auto& g = t.grad(self);
    Eigen::Map<Matrix<Scalar>>(gx.data(), g.rows(), g.cols()) += g;
  });
}

// ---- reductions and losses ------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  const int ix = x.node_id();
  return x.tape().record(std::move(out), {1}, {x}, [ix](Tape<Scalar>& t, int self) {
    t.grad_buffer(ix).array() += t.grad(self)(0, 0);
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.value().size()));
}

template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const int> targets,
                             std::span<const std::uint8_t> mask) {
  const auto& lv = logits.value();
  const auto T = lv.rows(), V = lv.cols();
  if (static_cast<Eigen::Index>(targets.size()) != T || static_cast<Eigen::Index>(mask.size()) != T) {
    throw std::invalid_argument("cross_entropy: targets/mask length must equal logits rows");
  }
  std::vector<Eigen::Index> rows;
  for (Eigen::Index r = 0; r < T; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || targets[r] >= V) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                              std::to_string(V) + ")");
    }
    rows.push_back(r);
  }
  if (rows.empty()) throw std::invalid_argument("cross_entropy: empty mask");
  auto probs = std::make_shared<Matrix<Scalar>>(static_cast<Eigen::Index>(rows.size()), V);
  Scalar total = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = rows[i];
    const Scalar m = lv.row(r).maxCoeff();
    auto e = (lv.row(r).array() - m).exp();
    const Scalar z = e.sum();
    probs->row(static_cast<Eigen::Index>(i)) = e / z;
    total += std::log(z) + m - lv(r, targets[r]);
  }
  const Scalar count = static_cast<Scalar>(rows.size());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total / count;
  const int il = logits.node_id();
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  return logits.tape().record(std::move(out), {1}, {logits}, [il, rows, probs, tgt, count](Tape<Scalar>& t,
                                                                                          int self) {
    const Scalar g = t.grad(self)(0, 0) / count;
    auto& gl = t.grad_buffer(il);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto r = rows[i];
      gl.row(r) += g * probs->row(static_cast<Eigen::Index>(i));
      gl(r, (*tgt)[r]) -= g;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_dims("mse", a, b);
  const auto d = sub(a, b);
  return mean(mul(d, d));
}

template <typename Scalar>
Tensor<Scalar> l1(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_dims("l1", a, b);
  const Matrix<Scalar> diff = a.value() - b.value();
  const Scalar n = static_cast<Scalar>(diff.size());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = diff.cwiseAbs().sum() / n;
  const int ia = a.node_id(), ib = b.node_id();
  auto sign = std::make_shared<Matrix<Scalar>>(diff.unaryExpr([](Scalar v) {
    return v > Scalar(0) ? Scalar(1) : (v < Scalar(0) ? Scalar(-1) : Scalar(0));
  }));
  return a.tape().record(std::move(out), {1}, {a, b}, [ia, ib, sign, n](Tape<Scalar>& t, int self) {
    const Scalar g = t.grad(self)(0, 0) / n;
    if (t.requires_grad(ia)) t.grad_buffer(ia) += g * *sign;
    if (t.requires_grad(ib)) t.grad_buffer(ib) -= g * *sign;
  });
}

// ---- attention ------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> masked_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                int heads, int batch, std::shared_ptr<const AttentionMask> mask) {
  require_same_dims("masked_attention(k,v)", k, v);
  if (q.cols() != k.cols()) throw std::invalid_argument("masked_attention: q and k widths differ");
  if (heads <= 0 || q.cols() % heads != 0) throw std::invalid_argument("masked_attention: bad head count");
  if (batch <= 0 || q.rows() % batch != 0 || k.rows() % batch != 0)
    throw std::invalid_argument("masked_attention: bad batch size");
  const Eigen::Index Tq = q.rows() / batch;
  const Eigen::Index Tk = k.rows() / batch;
  const Eigen::Index dh = q.cols() / heads;
  if (!mask || mask->rows() != Tq || mask->cols() != Tk) {
    throw std::invalid_argument("masked_attention: mask must be " + std::to_string(Tq) + "x" + std::to_string(Tk));
  }
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& Vv = v.value();
  Matrix<Scalar> out(q.rows(), q.cols());
  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>(static_cast<std::size_t>(batch) * heads);
  Matrix<Scalar> scores(Tq, Tk);
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto Qb = Q.block(b * Tq, h * dh, Tq, dh);
      const auto Kb = K.block(b * Tk, h * dh, Tk, dh);
      scores.noalias() = Qb * Kb.transpose();
      Matrix<Scalar>& P = (*probs)[static_cast<std::size_t>(b) * heads + h];
      P.resize(Tq, Tk);
      for (Eigen::Index i = 0; i < Tq; ++i) {
        P.row(i) = (mask->row(i).array() != 0).select(scores.row(i).array() * inv_sqrt, neg_inf).matrix();
        const Scalar m = P.row(i).maxCoeff();
        if (!std::isfinite(m)) throw NumericError("masked_attention: row with no attendable key or non-finite score");
        P.row(i) = (P.row(i).array() - m).exp().matrix();
        P.row(i) /= P.row(i).sum();
      }
      out.block(b * Tq, h * dh, Tq, dh).noalias() = P * Vv.block(b * Tk, h * dh, Tk, dh);
    }
  }
  const int iq = q.node_id(), ik = k.node_id(), iv = v.node_id();
  return q.tape().record(
      std::move(out), {}, {q, k, v}, [iq, ik, iv, probs, heads, batch, Tq, Tk, dh, inv_sqrt](Tape<Scalar>& t, int self) {
        const auto& G = t.grad(self);
        const auto& Q = t.value(iq);
        const auto& K = t.value(ik);
        const auto& Vv = t.value(iv);
        const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
        Matrix<Scalar> dP(Tq, Tk);
        for (int b = 0; b < batch; ++b) {
          for (int h = 0; h < heads; ++h) {
            const Matrix<Scalar>& P = (*probs)[static_cast<std::size_t>(b) * heads + h];
            const auto Gb = G.block(b * Tq, h * dh, Tq, dh);
            if (gv) t.grad_buffer(iv).block(b * Tk, h * dh, Tk, dh).noalias() += P.transpose() * Gb;
            if (!gq && !gk) continue;
            dP.noalias() = Gb * Vv.block(b * Tk, h * dh, Tk, dh).transpose();
            // dS = P o (dP - rowsum(dP o P)), pre-scaled by 1/sqrt(dh)
            for (Eigen::Index i = 0; i < Tq; ++i) {
              const Scalar dot = dP.row(i).dot(P.row(i));
              dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot) * inv_sqrt).matrix();
            }
            if (gq) t.grad_buffer(iq).block(b * Tq, h * dh, Tq, dh).noalias() += dP * K.block(b * Tk, h * dh, Tk, dh);
            if (gk)
              t.grad_buffer(ik).block(b * Tk, h * dh, Tk, dh).noalias() +=
                  dP.transpose() * Q.block(b * Tq, h * dh, Tq, dh);
          }
        }
      });
}

// ---- explicit instantiations ---------------------------------------------

#define DW0_INSTANTIATE_TENSOR(S)                                                                           \
  template struct Parameter<S>;                                                                             \
  template class ParamSet<S>;                                                                               \
  template class Tensor<S>;                                                                                 \
  template class Tape<S>;                                                                                   \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                               \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                               \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                               \
  template Tensor<S> scale(const Tensor<S>&, S);                                                            \
  template Tensor<S> add_row(const Tensor<S>&, const Tensor<S>&);                                           \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                            \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                          \
  template Tensor<S> gelu(const Tensor<S>&);                                                                \
  template Tensor<S> softmax_rows(const Tensor<S>&);                                                        \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);                   \
  template Tensor<S> embedding_lookup(const Tensor<S>&, std::span<const int>);                              \
  template Tensor<S> gather_rows(const Tensor<S>&, std::span<const int>);                                   \
  template Tensor<S> concat_rows(const std::vector<Tensor<S>>&);                                            \
  template Tensor<S> concat_cols(const std::vector<Tensor<S>>&);                                            \
  template Tensor<S> reshape(const Tensor<S>&, const Shape&);                                               \
  template Tensor<S> sum(const Tensor<S>&);                                                                 \
  template Tensor<S> mean(const Tensor<S>&);                                                                \
  template Tensor<S> cross_entropy(const Tensor<S>&, std::span<const int>, std::span<const std::uint8_t>);  \
  template Tensor<S> mse(const Tensor<S>&, const Tensor<S>&);                                               \
  template Tensor<S> l1(const Tensor<S>&, const Tensor<S>&);                                                \
  template Tensor<S> masked_attention(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int,      \
                                      std::shared_ptr<const AttentionMask>);

DW0_INSTANTIATE_TENSOR(float)
DW0_INSTANTIATE_TENSOR(double)

}  // namespace dw0
