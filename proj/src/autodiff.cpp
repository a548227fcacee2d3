#include "fmash/autodiff.hpp"

#include "fmash/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace fmash::ad {

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Matrix Var::grad_or_zero() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw Error("item() on a non-scalar value");
  return node_->value(0, 0);
}

Var make_result(Matrix value, const std::vector<Var>& inputs,
                std::function<void(Node&)> fn) {
  Var out(std::move(value), false);
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Var& v) { return v.requires_grad(); });
  if (any) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.parents.reserve(inputs.size());
    for (const auto& in : inputs) node.parents.push_back(in.node());
    node.backward = std::move(fn);
  }
  return out;
}

Var make_result(Matrix value, std::initializer_list<Var> inputs,
                std::function<void(Node&)> fn) {
  return make_result(std::move(value), std::vector<Var>(inputs), std::move(fn));
}

void backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw Error("backward() needs a scalar loss");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; the reverse of the post-order is a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
}

namespace {

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                std::to_string(b.cols()));
  }
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  Matrix out = a.value().unaryExpr(fwd);
  return make_result(out, {a}, [deriv](Node& n) {
    Node& in = parent(n, 0);
    if (!in.requires_grad) return;
    Matrix d = in.value.binaryExpr(n.value, deriv);
    in.accumulate_expr(n.grad.cwiseProduct(d));
  });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw Error("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                std::to_string(b.rows()) + ")");
  }
  Matrix out = a.value() * b.value();
  return make_result(std::move(out), {a, b}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& y = parent(n, 1);
    if (x.requires_grad) x.accumulate_expr(n.grad * y.value.transpose());
    if (y.requires_grad) y.accumulate_expr(x.value.transpose() * n.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw Error("matmul_nt: column counts differ");
  Matrix out = a.value() * b.value().transpose();
  return make_result(std::move(out), {a, b}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& y = parent(n, 1);
    if (x.requires_grad) x.accumulate_expr(n.grad * y.value);
    if (y.requires_grad) y.accumulate_expr(n.grad.transpose() * x.value);
  });
}

Var spmm(std::shared_ptr<const SparseMatrix> s, const Var& x) {
  if (s->cols() != x.rows()) throw Error("spmm: dimension mismatch");
  Matrix out = (*s) * x.value();
  return make_result(std::move(out), {x}, [s](Node& n) {
    Node& in = parent(n, 0);
    if (in.requires_grad) in.accumulate_expr(s->transpose() * n.grad);
  });
}

Var transpose(const Var& a) {
  Matrix out = a.value().transpose();
  return make_result(std::move(out), {a}, [](Node& n) {
    Node& in = parent(n, 0);
    if (in.requires_grad) in.accumulate_expr(n.grad.transpose());
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& n) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (parent(n, i).requires_grad) parent(n, i).accumulate(n.grad);
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate_expr(-n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& y = parent(n, 1);
    if (x.requires_grad) x.accumulate_expr(n.grad.cwiseProduct(y.value));
    if (y.requires_grad) y.accumulate_expr(n.grad.cwiseProduct(x.value));
  });
}

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate_expr(n.grad * s);
  });
}

Var add_scalar(const Var& a, double s) {
  Matrix out = a.value().array() + s;
  return make_result(std::move(out), {a}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw Error("add_row: row shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make_result(std::move(out), {a, row}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate_expr(n.grad.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw Error("mul_row: row shape mismatch");
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return make_result(std::move(out), {a, row}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& r = parent(n, 1);
    if (x.requires_grad) {
      x.accumulate_expr((n.grad.array().rowwise() * r.value.row(0).array()).matrix());
    }
    if (r.requires_grad) r.accumulate_expr(n.grad.cwiseProduct(x.value).colwise().sum());
  });
}

Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw Error("mul_col: column shape mismatch");
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return make_result(std::move(out), {a, col}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& c = parent(n, 1);
    if (x.requires_grad) {
      x.accumulate_expr((n.grad.array().colwise() * c.value.col(0).array()).matrix());
    }
    if (c.requires_grad) c.accumulate_expr(n.grad.cwiseProduct(x.value).rowwise().sum());
  });
}

Var sigmoid(const Var& a) {
  return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x, double) {
        double s = sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var tanh(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(const Var& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var softplus(const Var& a) {
  return unary(a, softplus_scalar, [](double x, double) { return sigmoid_scalar(x); });
}

Var square(const Var& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_result(std::move(out), {a}, [](Node& n) {
    Node& in = parent(n, 0);
    if (in.requires_grad) {
      in.accumulate_expr(Matrix::Constant(in.value.rows(), in.value.cols(), n.grad(0, 0)));
    }
  });
}

Var mean(const Var& a) {
  double count = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / count);
}

Var row_sum(const Var& a) {
  Matrix out = a.value().rowwise().sum();
  return make_result(std::move(out), {a}, [](Node& n) {
    Node& in = parent(n, 0);
    if (in.requires_grad) in.accumulate_expr(n.grad.replicate(1, in.value.cols()));
  });
}

Var col_sum(const Var& a) {
  Matrix out = a.value().colwise().sum();
  return make_result(std::move(out), {a}, [](Node& n) {
    Node& in = parent(n, 0);
    if (in.requires_grad) in.accumulate_expr(n.grad.replicate(in.value.rows(), 1));
  });
}

Var hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("hcat: no inputs");
  Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw Error("hcat: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return make_result(std::move(out), parts, [](Node& n) {
    Index c = 0;
    for (auto& p : n.parents) {
      Index w = p->value.cols();
      if (p->requires_grad) p->accumulate_expr(n.grad.middleCols(c, w));
      c += w;
    }
  });
}

Var vcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("vcat: no inputs");
  Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw Error("vcat: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return make_result(std::move(out), parts, [](Node& n) {
    Index r = 0;
    for (auto& p : n.parents) {
      Index h = p->value.rows();
      if (p->requires_grad) p->accumulate_expr(n.grad.middleRows(r, h));
      r += h;
    }
  });
}

Var slice_rows(const Var& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw Error("slice_rows: out of range");
  Matrix out = a.value().middleRows(begin, count);
  return make_result(std::move(out), {a}, [begin, count](Node& n) {
    Node& in = parent(n, 0);
    if (!in.requires_grad) return;
    if (in.grad.size() == 0) in.grad = Matrix::Zero(in.value.rows(), in.value.cols());
    in.grad.middleRows(begin, count) += n.grad;
  });
}

Var slice_cols(const Var& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) throw Error("slice_cols: out of range");
  Matrix out = a.value().middleCols(begin, count);
  return make_result(std::move(out), {a}, [begin, count](Node& n) {
    Node& in = parent(n, 0);
    if (!in.requires_grad) return;
    if (in.grad.size() == 0) in.grad = Matrix::Zero(in.value.rows(), in.value.cols());
    in.grad.middleCols(begin, count) += n.grad;
  });
}

Var gather_rows(const Var& a, std::span<const Index> idx) {
  Matrix out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows()) throw Error("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(idx[i]);
  }
  std::vector<Index> copy(idx.begin(), idx.end());
  return make_result(std::move(out), {a}, [copy = std::move(copy)](Node& n) {
    Node& in = parent(n, 0);
    if (!in.requires_grad) return;
    if (in.grad.size() == 0) in.grad = Matrix::Zero(in.value.rows(), in.value.cols());
    for (std::size_t i = 0; i < copy.size(); ++i) {
      in.grad.row(copy[i]) += n.grad.row(static_cast<Index>(i));
    }
  });
}

namespace {

void softmax_inplace(Eigen::Ref<RowVector> row) {
  double mx = row.maxCoeff();
  row = (row.array() - mx).exp();
  row /= row.sum();
}

}  // namespace

Var softmax_rows(const Var& a) {
  Matrix out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    RowVector row = out.row(r);
    softmax_inplace(row);
    out.row(r) = row;
  }
  return make_result(std::move(out), {a}, [](Node& n) {
    Node& in = parent(n, 0);
    if (!in.requires_grad) return;
    Matrix gy = n.grad.cwiseProduct(n.value);
    Vector dots = gy.rowwise().sum();
    Matrix g = gy - (n.value.array().colwise() * dots.array()).matrix();
    in.accumulate(g);
  });
}

Var segment_softmax(const Var& a, std::span<const Index> offsets) {
  if (a.cols() != 1) throw Error("segment_softmax: expects a column");
  if (offsets.empty() || offsets.back() != a.rows()) throw Error("segment_softmax: bad offsets");
  Matrix out = a.value();
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    Index b = offsets[s];
    Index len = offsets[s + 1] - b;
    if (len <= 0) throw Error("segment_softmax: empty segment");
    auto seg = out.col(0).segment(b, len);
    double mx = seg.maxCoeff();
    seg = (seg.array() - mx).exp();
    seg /= seg.sum();
  }
  std::vector<Index> offs(offsets.begin(), offsets.end());
  return make_result(std::move(out), {a}, [offs = std::move(offs)](Node& n) {
    Node& in = parent(n, 0);
    if (!in.requires_grad) return;
    Matrix g(n.value.rows(), 1);
    for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
      Index b = offs[s];
      Index len = offs[s + 1] - b;
      auto y = n.value.col(0).segment(b, len);
      auto gy = n.grad.col(0).segment(b, len);
      double dot = y.dot(gy);
      g.col(0).segment(b, len) = (y.array() * (gy.array() - dot)).matrix();
    }
    in.accumulate(g);
  });
}

Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps) {
  Index cols = a.cols();
  if (gamma.rows() != 1 || gamma.cols() != cols || beta.rows() != 1 || beta.cols() != cols) {
    throw Error("layer_norm: parameter shape mismatch");
  }
  Matrix xhat(a.rows(), cols);
  Vector inv_std(a.rows());
  for (Index r = 0; r < a.rows(); ++r) {
    double mu = a.value().row(r).mean();
    RowVector centered = a.value().row(r).array() - mu;
    double var = centered.squaredNorm() / static_cast<double>(cols);
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  return make_result(std::move(out), {a, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                       Node& x = parent(n, 0);
                       Node& g = parent(n, 1);
                       Node& b = parent(n, 2);
                       if (g.requires_grad) {
                         g.accumulate_expr(n.grad.cwiseProduct(xhat).colwise().sum());
                       }
                       if (b.requires_grad) b.accumulate_expr(n.grad.colwise().sum());
                       if (!x.requires_grad) return;
                       double c = static_cast<double>(xhat.cols());
                       Matrix gx_hat = n.grad.array().rowwise() * g.value.row(0).array();
                       Matrix gx(xhat.rows(), xhat.cols());
                       for (Index r = 0; r < xhat.rows(); ++r) {
                         double m1 = gx_hat.row(r).sum() / c;
                         double m2 = gx_hat.row(r).dot(xhat.row(r)) / c;
                         gx.row(r) = inv_std(r) *
                                     (gx_hat.row(r).array() - m1 - xhat.row(r).array() * m2).matrix();
                       }
                       x.accumulate(gx);
                     });
}

Var bce_with_logits(const Var& logits, const Matrix& targets) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw Error("bce_with_logits: target shape mismatch");
  }
  const Matrix& x = logits.value();
  double total = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    double v = x.data()[i];
    total += std::max(v, 0.0) - v * targets.data()[i] + std::log1p(std::exp(-std::abs(v)));
  }
  double count = static_cast<double>(x.size());
  Matrix out(1, 1);
  out(0, 0) = total / count;
  return make_result(std::move(out), {logits}, [targets, count](Node& n) {
    Node& in = parent(n, 0);
    if (!in.requires_grad) return;
    Matrix g = in.value.unaryExpr([](double v) { return sigmoid_scalar(v); }) - targets;
    in.accumulate_expr(g * (n.grad(0, 0) / count));
  });
}

Var cross_entropy(const Var& logits, std::span<const int> targets, int ignore_index) {
  if (static_cast<Index>(targets.size()) != logits.rows()) {
    throw Error("cross_entropy: one target per row required");
  }
  Matrix probs = logits.value();
  double total = 0.0;
  int count = 0;
  for (Index r = 0; r < probs.rows(); ++r) {
    RowVector row = probs.row(r);
    double mx = row.maxCoeff();
    double lse = mx + std::log((row.array() - mx).exp().sum());
    int t = targets[static_cast<std::size_t>(r)];
    if (t != ignore_index) {
      if (t < 0 || t >= probs.cols()) throw Error("cross_entropy: target out of range");
      total += lse - row(t);
      ++count;
    }
    probs.row(r) = (row.array() - lse).exp();
  }
  Matrix out(1, 1);
  out(0, 0) = count > 0 ? total / count : 0.0;
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result(std::move(out), {logits},
                     [probs = std::move(probs), tg = std::move(tg), ignore_index, count](Node& n) {
                       Node& in = parent(n, 0);
                       if (!in.requires_grad || count == 0) return;
                       Matrix g = Matrix::Zero(probs.rows(), probs.cols());
                       double w = n.grad(0, 0) / count;
                       for (Index r = 0; r < probs.rows(); ++r) {
                         int t = tg[static_cast<std::size_t>(r)];
                         if (t == ignore_index) continue;
                         g.row(r) = probs.row(r) * w;
                         g(r, t) -= w;
                       }
                       in.accumulate(g);
                     });
}

Var mse(const Var& a, const Matrix& target) {
  if (target.rows() != a.rows() || target.cols() != a.cols()) {
    throw Error("mse: target shape mismatch");
  }
  Matrix diff = a.value() - target;
  double count = static_cast<double>(diff.size());
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / count;
  return make_result(std::move(out), {a}, [diff = std::move(diff), count](Node& n) {
    Node& in = parent(n, 0);
    if (in.requires_grad) in.accumulate_expr(diff * (2.0 * n.grad(0, 0) / count));
  });
}

Var attention(const Var& q, const Var& k, const Var& v, std::span<const AttentionSegment> segments,
              int heads, bool causal) {
  Index dim = q.cols();
  if (k.cols() != dim || v.cols() != dim || k.rows() != v.rows()) {
    throw Error("attention: Q/K/V shapes disagree");
  }
  if (heads < 1 || dim % heads != 0) throw Error("attention: width not divisible by heads");
  Index hd = dim / heads;
  double scl = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<AttentionSegment> segs(segments.begin(), segments.end());
  // Attention probabilities per (segment, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<Matrix>>();
  probs->reserve(segs.size() * static_cast<std::size_t>(heads));

  Matrix out = Matrix::Zero(q.rows(), dim);
  for (const auto& s : segs) {
    if (s.q_begin < 0 || s.q_begin + s.q_len > q.rows() || s.k_begin < 0 ||
        s.k_begin + s.k_len > k.rows() || s.k_len <= 0) {
      throw Error("attention: segment out of range");
    }
    Index shift = s.k_len - s.q_len;
    for (int h = 0; h < heads; ++h) {
      auto qh = q.value().block(s.q_begin, h * hd, s.q_len, hd);
      auto kh = k.value().block(s.k_begin, h * hd, s.k_len, hd);
      auto vh = v.value().block(s.k_begin, h * hd, s.k_len, hd);
      Matrix scores = (qh * kh.transpose()) * scl;
      for (Index i = 0; i < s.q_len; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Index j = 0; j < s.k_len; ++j) {
          if (causal && j > i + shift) {
            scores(i, j) = -std::numeric_limits<double>::infinity();
          } else {
            mx = std::max(mx, scores(i, j));
          }
        }
        double total = 0.0;
        for (Index j = 0; j < s.k_len; ++j) {
          double e = std::isinf(scores(i, j)) ? 0.0 : std::exp(scores(i, j) - mx);
          scores(i, j) = e;
          total += e;
        }
        scores.row(i) /= total;
      }
      out.block(s.q_begin, h * hd, s.q_len, hd) = scores * vh;
      probs->push_back(std::move(scores));
    }
  }

  return make_result(std::move(out), {q, k, v}, [segs = std::move(segs), probs, heads, hd, scl](Node& n) {
    Node& qn = parent(n, 0);
    Node& kn = parent(n, 1);
    Node& vn = parent(n, 2);
    Matrix gq = Matrix::Zero(qn.value.rows(), qn.value.cols());
    Matrix gk = Matrix::Zero(kn.value.rows(), kn.value.cols());
    Matrix gv = Matrix::Zero(vn.value.rows(), vn.value.cols());
    std::size_t p = 0;
    for (const auto& s : segs) {
      for (int h = 0; h < heads; ++h, ++p) {
        const Matrix& pr = (*probs)[p];
        auto qh = qn.value.block(s.q_begin, h * hd, s.q_len, hd);
        auto kh = kn.value.block(s.k_begin, h * hd, s.k_len, hd);
        auto vh = vn.value.block(s.k_begin, h * hd, s.k_len, hd);
        auto go = n.grad.block(s.q_begin, h * hd, s.q_len, hd);
        gv.block(s.k_begin, h * hd, s.k_len, hd) += pr.transpose() * go;
        Matrix gp = go * vh.transpose();
        Vector dots = gp.cwiseProduct(pr).rowwise().sum();
        Matrix gs = pr.cwiseProduct((gp.colwise() - dots));
        gs *= scl;
        gq.block(s.q_begin, h * hd, s.q_len, hd) += gs * kh;
        gk.block(s.k_begin, h * hd, s.k_len, hd) += gs.transpose() * qh;
      }
    }
    if (qn.requires_grad) qn.accumulate(gq);
    if (kn.requires_grad) kn.accumulate(gk);
    if (vn.requires_grad) vn.accumulate(gv);
  });
}

void check_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) throw NumericError("non-finite values in " + what);
}

}  // namespace fmash::ad
