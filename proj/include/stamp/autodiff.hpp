#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value is a 2-D matrix; a row vector is 1×n and a scalar is 1×1.
// Graphs are built eagerly: each op computes its value immediately and, if any
// input requires a gradient, records a closure that pushes the output gradient
// back into its inputs. `backward(root)` runs the closures in reverse
// topological order.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace stamp::ad {

using Real = double;
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

struct Node {
  Matrix value;
  Matrix grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Matrix& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  Real item() const;
  bool defined() const { return static_cast<bool>(node_); }

  void zero_grad() { node_->grad.resize(0, 0); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Leaf holding a constant (no gradient).
Var constant(Matrix value);
/// Leaf that accumulates a gradient; used for learnable parameters.
Var leaf(Matrix value);

/// Seeds d(root)/d(root) with `seed` (ones for a scalar when omitted) and
/// propagates gradients to every reachable leaf.
void backward(const Var& root);
void backward(const Var& root, const Matrix& seed);

/// Disables graph recording on this thread while alive.
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

// ---- elementwise / linear algebra ----
Var matmul(const Var& a, const Var& b);
/// x·w + b with w stored (in × out) and b a 1×out row.
Var linear(const Var& x, const Var& w, const Var& b);
Var add(const Var& a, const Var& b);
/// Adds a 1×n row to every row of `a`.
Var add_row(const Var& a, const Var& row);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, Real s);
Var square(const Var& a);
Var log(const Var& a);
Var gelu(const Var& a);
Var silu(const Var& a);
Var detach(const Var& a);
/// Value is `hard`; the gradient passes to `soft` unchanged. Equivalent to
/// hard + soft − detach(soft) without the rounding of the sum.
Var straight_through(const Matrix& hard, const Var& soft);
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);
Var transpose(const Var& a);

/// Row-wise layer normalization with learnable 1×n gain and bias.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, Real eps = 1e-6);

/// Row-wise softmax.
Var softmax_rows(const Var& x);

/// Row-wise softmax mixed with a uniform floor: (1-mix)·softmax + mix/cols.
Var mixed_softmax_rows(const Var& logits, Real mix);

// ---- row routing ----
struct RowRef {
  std::size_t source;
  Eigen::Index row;
};
/// Builds a matrix whose i-th row is `sources[refs[i].source].row(refs[i].row)`.
/// Gradients scatter-add back into the sources.
Var assemble_rows(std::span<const Var> sources, std::span<const RowRef> refs);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(const Var& a, const Var& b);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& a, std::span<const Eigen::Index> rows);

// ---- attention ----
/// Scaled dot-product attention applied independently to `groups` equal
/// row-blocks of q and of k/v. Within a group, per head h:
/// softmax(Q_h K_hᵀ / sqrt(d_head)) V_h; heads are concatenated column-wise.
/// When `weights_out` is non-null it receives one (q_rows × k_rows) matrix per
/// (group, head) in group-major order.
Var attention(const Var& q, const Var& k, const Var& v, int heads, int groups = 1,
              std::vector<Matrix>* weights_out = nullptr);

}  // namespace stamp::ad
