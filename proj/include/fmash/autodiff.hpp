/**
 * Reverse-mode automatic differentiation over dense double matrices.
 *
 * Every value is a 2-D Eigen matrix. Operations record their inputs and a
 * backward closure only when at least one input requires a gradient, so
 * inference on frozen parameters builds no graph.
 */
#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fmash {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

namespace ad {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
  template <typename Expr>
  void accumulate_expr(const Expr& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

/// Shared handle to a graph node. Copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  static Var constant(Matrix value) { return Var(std::move(value), false); }
  static Var parameter(Matrix value) { return Var(std::move(value), true); }

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  /// Direct access for optimizers and checkpoint loading.
  Matrix& mutable_value() { return node_->value; }
  /// Empty matrix when nothing has been accumulated yet.
  const Matrix& grad() const { return node_->grad; }
  Matrix grad_or_zero() const;
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using NamedParams = std::vector<std::pair<std::string, Var>>;

/// Runs the backward pass from a 1x1 loss, accumulating into every reachable
/// node that requires a gradient.
void backward(const Var& loss);

/// Builds a result node; `fn` is attached only if some input needs a gradient.
Var make_result(Matrix value, std::initializer_list<Var> inputs,
                std::function<void(Node&)> fn);
Var make_result(Matrix value, const std::vector<Var>& inputs,
                std::function<void(Node&)> fn);

// Linear algebra
Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var spmm(std::shared_ptr<const SparseMatrix> s, const Var& x);
Var transpose(const Var& a);

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// Adds a 1 x c row to every row of a.
Var add_row(const Var& a, const Var& row);
/// Multiplies every row of a by a 1 x c row.
Var mul_row(const Var& a, const Var& row);
/// Multiplies every column of a by an r x 1 column.
Var mul_col(const Var& a, const Var& col);

Var sigmoid(const Var& a);
Var relu(const Var& a);
Var silu(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var softplus(const Var& a);
Var square(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// Reductions
Var sum(const Var& a);
Var mean(const Var& a);
/// r x c -> r x 1
Var row_sum(const Var& a);
/// r x c -> 1 x c
Var col_sum(const Var& a);

// Shape
Var hcat(const std::vector<Var>& parts);
Var vcat(const std::vector<Var>& parts);
Var slice_rows(const Var& a, Index begin, Index count);
Var slice_cols(const Var& a, Index begin, Index count);
/// Row i of the result is row idx[i] of a; indices may repeat.
Var gather_rows(const Var& a, std::span<const Index> idx);

// Normalizations and probabilities
Var softmax_rows(const Var& a);
/// Softmax of an m x 1 column within each contiguous segment.
/// offsets has n+1 entries; segment s spans [offsets[s], offsets[s+1]).
Var segment_softmax(const Var& a, std::span<const Index> offsets);
Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);

// Losses (1x1 results)
/// Mean binary cross-entropy between sigmoid(logits) and targets.
Var bce_with_logits(const Var& logits, const Matrix& targets);
/// Mean cross-entropy over rows whose target differs from ignore_index.
Var cross_entropy(const Var& logits, std::span<const int> targets, int ignore_index);
/// Mean of squared differences over all entries.
Var mse(const Var& a, const Matrix& target);

/// Attention restricted to blocks of rows: queries [q_begin, q_begin+q_len)
/// attend keys [k_begin, k_begin+k_len).
struct AttentionSegment {
  Index q_begin = 0;
  Index q_len = 0;
  Index k_begin = 0;
  Index k_len = 0;
};

/// Multi-head scaled dot-product attention on already-projected Q, K, V.
/// With causal set, query i of a segment sees keys j <= i + (k_len - q_len).
Var attention(const Var& q, const Var& k, const Var& v,
              std::span<const AttentionSegment> segments, int heads, bool causal);

/// Throws NumericError naming `what` if any entry is NaN or infinite.
void check_finite(const Matrix& m, const std::string& what);

}  // namespace ad
}  // namespace fmash
