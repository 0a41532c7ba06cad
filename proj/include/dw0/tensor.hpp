#pragma once

// Tape-based reverse-mode differentiation over dense row-major Eigen
// matrices. Every tensor is stored as a (rows x cols) matrix where cols is
// the trailing dimension and rows the product of the leading ones; the
// logical shape is kept alongside.

#include "dw0/common.hpp"

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dw0 {

template <typename Scalar>
class Tape;

/// A named trainable array. Gradients accumulate across backward passes
/// until zero_grad().
template <typename Scalar>
struct Parameter {
  std::string name;
  Shape shape;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool trainable = true;
};

/// Ordered name -> Parameter store. Iteration order is lexicographic by name,
/// which keeps optimizer updates and checkpoints deterministic.
template <typename Scalar>
class ParamSet {
 public:
  Parameter<Scalar>& add(const std::string& name, const Shape& shape);
  Parameter<Scalar>& add_normal(const std::string& name, const Shape& shape, double stddev, Rng& rng);
  Parameter<Scalar>& add_constant(const std::string& name, const Shape& shape, Scalar value);

  Parameter<Scalar>& at(const std::string& name);
  const Parameter<Scalar>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad();
  std::int64_t numel() const;
  std::size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter<Scalar>> params_;
};

/// Lightweight handle to a node on a Tape.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const;
  /// Empty matrix when no gradient reached this node.
  const Matrix<Scalar>& grad() const;
  const Shape& shape() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  Scalar item() const;

  int node_id() const { return id_; }
  Tape<Scalar>& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor<Scalar> constant(Matrix<Scalar> value, Shape shape = {});
  Tensor<Scalar> variable(Matrix<Scalar> value, Shape shape = {});
  /// Leaf bound to a parameter; its value is referenced, not copied, and
  /// backward() accumulates into param.grad.
  Tensor<Scalar> param(Parameter<Scalar>& p);

  /// Records an op result. The backward closure is dropped when no parent
  /// requires a gradient or gradients are disabled.
  Tensor<Scalar> record(Matrix<Scalar> value, Shape shape, std::initializer_list<Tensor<Scalar>> parents,
                        Backward backward);
  Tensor<Scalar> record(Matrix<Scalar> value, Shape shape, const std::vector<Tensor<Scalar>>& parents,
                        Backward backward);

  /// Reverse sweep from a scalar. Nodes are replayed in reverse creation
  /// order, which is a topological order of the graph.
  void backward(const Tensor<Scalar>& loss);

  const Matrix<Scalar>& value(int id) const;
  const Matrix<Scalar>& grad(int id) const { return nodes_[id].grad; }
  /// Gradient buffer of node id, zero-allocated on first use.
  Matrix<Scalar>& grad_buffer(int id);
  const Shape& shape(int id) const { return nodes_[id].shape; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<Scalar> value;
    const Matrix<Scalar>* external = nullptr;
    Matrix<Scalar> grad;
    Shape shape;
    bool requires_grad = false;
    Parameter<Scalar>* param = nullptr;
    Backward backward;
  };

  Tensor<Scalar> push(Node node);

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

/// allowed(i, j) != 0 iff query position i may attend key position j.
using AttentionMask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::shared_ptr<const AttentionMask> causal_mask(int length);

// ---- differentiable ops -------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor);
/// x[r, :] + row[0, :] for every r.
template <typename Scalar>
Tensor<Scalar> add_row(const Tensor<Scalar>& x, const Tensor<Scalar>& row);

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
/// x * w + b, with b broadcast over rows.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& bias,
                          Scalar eps);

template <typename Scalar>
Tensor<Scalar> embedding_lookup(const Tensor<Scalar>& table, std::span<const int> ids);
/// out[i, :] = x[index[i], :]; backward scatter-adds.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::span<const int> index);
template <typename Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts);
template <typename Scalar>
Tensor<Scalar> concat_cols(const std::vector<Tensor<Scalar>>& parts);
/// Reinterprets the row-major storage under a new shape of equal size.
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, const Shape& shape);

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x);

/// Mean of -log softmax(logits)[target] over rows with mask != 0.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const int> targets,
                             std::span<const std::uint8_t> mask);
template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> l1(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// Multi-head scaled dot-product attention over `batch` stacked sequences.
/// q is (batch*Tq) x (heads*head_dim), k and v are (batch*Tk) x the same
/// width; one Tq x Tk mask applies to every sequence and head.
template <typename Scalar>
Tensor<Scalar> masked_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                int heads, int batch, std::shared_ptr<const AttentionMask> mask);

}  // namespace dw0
