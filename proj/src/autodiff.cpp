#include "stamp/autodiff.hpp"

#include "stamp/errors.hpp"

#include <cmath>
#include <numbers>
#include <unordered_set>

namespace stamp::ad {

namespace {

thread_local bool g_grad_enabled = true;

void require(bool ok, const char* what) {
  if (!ok) fail(ErrorKind::Shape, what);
}

void accumulate(Node& node, const Matrix& g) {
  if (!node.requires_grad) return;
  Matrix& buf = node.grad_buffer();
  buf += g;
}

template <class Backward>
Var make_node(Matrix value, std::initializer_list<Var> inputs, Backward&& fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const Var& in : inputs) {
      if (in.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    node->parents.reserve(inputs.size());
    for (const Var& in : inputs) node->parents.push_back(in.node());
    node->backward = std::forward<Backward>(fn);
  }
  return Var(std::move(node));
}

template <class Backward>
Var make_node_n(Matrix value, std::span<const Var> inputs, Backward&& fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const Var& in : inputs) {
      if (in.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    node->parents.reserve(inputs.size());
    for (const Var& in : inputs) node->parents.push_back(in.node());
    node->backward = std::forward<Backward>(fn);
  }
  return Var(std::move(node));
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

Matrix& Node::grad_buffer() {
  if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
  return grad;
}

Real Var::item() const {
  require(value().size() == 1, "item() on a non-scalar");
  return value()(0, 0);
}

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var leaf(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& root) {
  require(root.value().size() == 1, "backward() without seed needs a scalar root");
  backward(root, Matrix::Ones(1, 1));
}

void backward(const Var& root, const Matrix& seed) {
  if (!root.requires_grad()) return;
  require(seed.rows() == root.rows() && seed.cols() == root.cols(), "seed shape mismatch");

  // Iterative post-order DFS over nodes that carry a backward closure.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && p->backward && !visited.contains(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer() += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.size() == 0 || !n->backward) continue;
    n->backward(*n);
  }
}

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Matrix out = a.value() * b.value();
  return make_node(std::move(out), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) pa.grad_buffer().noalias() += n.grad * pb.value.transpose();
    if (pb.requires_grad) pb.grad_buffer().noalias() += pa.value.transpose() * n.grad;
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require(x.cols() == w.rows(), "linear: input width mismatch");
  require(b.rows() == 1 && b.cols() == w.cols(), "linear: bias shape mismatch");
  Matrix out(x.rows(), w.cols());
  out.noalias() = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return make_node(std::move(out), {x, w, b}, [](Node& n) {
    Node& px = parent(n, 0);
    Node& pw = parent(n, 1);
    Node& pb = parent(n, 2);
    if (px.requires_grad) px.grad_buffer().noalias() += n.grad * pw.value.transpose();
    if (pw.requires_grad) pw.grad_buffer().noalias() += px.value.transpose() * n.grad;
    if (pb.requires_grad) pb.grad_buffer() += n.grad.colwise().sum();
  });
}

Var add(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  return make_node(a.value() + b.value(), {a, b}, [](Node& n) {
    accumulate(parent(n, 0), n.grad);
    accumulate(parent(n, 1), n.grad);
  });
}

Var add_row(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: shape mismatch");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make_node(std::move(out), {a, row}, [](Node& n) {
    accumulate(parent(n, 0), n.grad);
    Node& pr = parent(n, 1);
    if (pr.requires_grad) pr.grad_buffer() += n.grad.colwise().sum();
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  return make_node(a.value() - b.value(), {a, b}, [](Node& n) {
    accumulate(parent(n, 0), n.grad);
    Node& pb = parent(n, 1);
    if (pb.requires_grad) pb.grad_buffer() -= n.grad;
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  Matrix out = a.value().cwiseProduct(b.value());
  return make_node(std::move(out), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) pa.grad_buffer() += n.grad.cwiseProduct(pb.value);
    if (pb.requires_grad) pb.grad_buffer() += n.grad.cwiseProduct(pa.value);
  });
}

Var scale(const Var& a, Real s) {
  return make_node(a.value() * s, {a}, [s](Node& n) {
    Node& pa = parent(n, 0);
    if (pa.requires_grad) pa.grad_buffer() += n.grad * s;
  });
}

Var square(const Var& a) {
  return make_node(a.value().array().square().matrix(), {a}, [](Node& n) {
    Node& pa = parent(n, 0);
    if (pa.requires_grad) pa.grad_buffer() += (2.0 * n.grad.array() * pa.value.array()).matrix();
  });
}

Var log(const Var& a) {
  return make_node(a.value().array().log().matrix(), {a}, [](Node& n) {
    Node& pa = parent(n, 0);
    if (pa.requires_grad) pa.grad_buffer() += (n.grad.array() / pa.value.array()).matrix();
  });
}

Var gelu(const Var& a) {
  constexpr Real inv_sqrt2 = 0.70710678118654752440;
  Matrix out = a.value().unaryExpr([](Real x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
  return make_node(std::move(out), {a}, [](Node& n) {
    Node& pa = parent(n, 0);
    if (!pa.requires_grad) return;
    constexpr Real inv_sqrt_2pi = 0.39894228040143267794;
    Matrix d = pa.value.unaryExpr([](Real x) {
      return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
    });
    pa.grad_buffer() += n.grad.cwiseProduct(d);
  });
}

Var silu(const Var& a) {
  Matrix out = a.value().unaryExpr([](Real x) { return x / (1.0 + std::exp(-x)); });
  return make_node(std::move(out), {a}, [](Node& n) {
    Node& pa = parent(n, 0);
    if (!pa.requires_grad) return;
    Matrix d = pa.value.unaryExpr([](Real x) {
      const Real s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 + x * (1.0 - s));
    });
    pa.grad_buffer() += n.grad.cwiseProduct(d);
  });
}

Var detach(const Var& a) { return constant(a.value()); }

Var straight_through(const Matrix& hard, const Var& soft) {
  require(hard.rows() == soft.rows() && hard.cols() == soft.cols(), "straight_through: shape mismatch");
  return make_node(hard, {soft}, [](Node& n) { accumulate(parent(n, 0), n.grad); });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_node(std::move(out), {a}, [](Node& n) {
    Node& pa = parent(n, 0);
    if (pa.requires_grad) pa.grad_buffer().array() += n.grad(0, 0);
  });
}

Var mean(const Var& a) {
  const Real count = static_cast<Real>(a.value().size());
  require(count > 0, "mean of an empty matrix");
  return scale(sum(a), 1.0 / count);
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  require(rows * cols == a.value().size(), "reshape: element count mismatch");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return make_node(std::move(out), {a}, [](Node& n) {
    Node& pa = parent(n, 0);
    if (!pa.requires_grad) return;
    pa.grad_buffer() += Eigen::Map<const Matrix>(n.grad.data(), pa.value.rows(), pa.value.cols());
  });
}

Var transpose(const Var& a) {
  Matrix out = a.value().transpose();
  return make_node(std::move(out), {a}, [](Node& n) {
    Node& pa = parent(n, 0);
    if (pa.requires_grad) pa.grad_buffer() += n.grad.transpose();
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, Real eps) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  require(gain.rows() == 1 && gain.cols() == cols && bias.rows() == 1 && bias.cols() == cols,
          "layer_norm: parameter shape mismatch");
  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Real mu = x.value().row(r).mean();
    const Real var = (x.value().row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
  }
  Matrix out = xhat;
  out.array().rowwise() *= gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return make_node(std::move(out), {x, gain, bias},
                   [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                     Node& px = parent(n, 0);
                     Node& pg = parent(n, 1);
                     Node& pb = parent(n, 2);
                     if (pg.requires_grad) pg.grad_buffer() += n.grad.cwiseProduct(xhat).colwise().sum();
                     if (pb.requires_grad) pb.grad_buffer() += n.grad.colwise().sum();
                     if (!px.requires_grad) return;
                     Matrix dxhat = n.grad;
                     dxhat.array().rowwise() *= pg.value.row(0).array();
                     Matrix& gx = px.grad_buffer();
                     for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                       const Real m1 = dxhat.row(r).mean();
                       const Real m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                       gx.row(r).array() +=
                           inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                     }
                   });
}

namespace {

Matrix softmax_value(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real mx = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

// dx = s ∘ (dy − rowsum(dy ∘ s))
Matrix softmax_backward(const Matrix& s, const Matrix& dy) {
  Eigen::VectorXd dot = dy.cwiseProduct(s).rowwise().sum();
  Matrix dx = dy;
  dx.colwise() -= dot;
  return dx.cwiseProduct(s);
}

}  // namespace

Var softmax_rows(const Var& x) {
  Matrix s = softmax_value(x.value());
  Matrix keep = s;
  return make_node(std::move(s), {x}, [keep = std::move(keep)](Node& n) {
    Node& px = parent(n, 0);
    if (px.requires_grad) px.grad_buffer() += softmax_backward(keep, n.grad);
  });
}

Var mixed_softmax_rows(const Var& logits, Real mix) {
  require(mix >= 0.0 && mix < 1.0, "mixed_softmax_rows: mix outside [0,1)");
  Matrix s = softmax_value(logits.value());
  Matrix out = (1.0 - mix) * s;
  out.array() += mix / static_cast<Real>(logits.cols());
  return make_node(std::move(out), {logits}, [s = std::move(s), mix](Node& n) {
    Node& px = parent(n, 0);
    if (px.requires_grad) px.grad_buffer() += (1.0 - mix) * softmax_backward(s, n.grad);
  });
}

Var assemble_rows(std::span<const Var> sources, std::span<const RowRef> refs) {
  require(!sources.empty(), "assemble_rows: no sources");
  const Eigen::Index cols = sources[0].cols();
  for (const Var& s : sources) require(s.cols() == cols, "assemble_rows: column mismatch");
  Matrix out(static_cast<Eigen::Index>(refs.size()), cols);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const RowRef& ref = refs[i];
    require(ref.source < sources.size() && ref.row >= 0 && ref.row < sources[ref.source].rows(),
            "assemble_rows: row reference out of range");
    out.row(static_cast<Eigen::Index>(i)) = sources[ref.source].value().row(ref.row);
  }
  std::vector<RowRef> keep(refs.begin(), refs.end());
  return make_node_n(std::move(out), sources, [keep = std::move(keep)](Node& n) {
    for (std::size_t i = 0; i < keep.size(); ++i) {
      Node& src = parent(n, keep[i].source);
      if (src.requires_grad) src.grad_buffer().row(keep[i].row) += n.grad.row(static_cast<Eigen::Index>(i));
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  std::vector<RowRef> refs;
  for (std::size_t s = 0; s < parts.size(); ++s)
    for (Eigen::Index r = 0; r < parts[s].rows(); ++r) refs.push_back({s, r});
  return assemble_rows(parts, refs);
}

Var concat_cols(const Var& a, const Var& b) {
  require(a.rows() == b.rows(), "concat_cols: row mismatch");
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Eigen::Index split = a.cols();
  return make_node(std::move(out), {a, b}, [split](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) pa.grad_buffer() += n.grad.leftCols(split);
    if (pb.requires_grad) pb.grad_buffer() += n.grad.rightCols(n.grad.cols() - split);
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  Matrix out = a.value().middleRows(start, count);
  return make_node(std::move(out), {a}, [start, count](Node& n) {
    Node& pa = parent(n, 0);
    if (pa.requires_grad) pa.grad_buffer().middleRows(start, count) += n.grad;
  });
}

Var gather_rows(const Var& a, std::span<const Eigen::Index> rows) {
  std::vector<RowRef> refs;
  refs.reserve(rows.size());
  for (Eigen::Index r : rows) refs.push_back({0, r});
  const Var src[] = {a};
  return assemble_rows(src, refs);
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, int groups,
              std::vector<Matrix>* weights_out) {
  const Eigen::Index dim = q.cols();
  require(heads > 0 && dim % heads == 0, "attention: width not divisible by heads");
  require(k.cols() == dim && v.cols() == dim, "attention: q/k/v width mismatch");
  require(k.rows() == v.rows(), "attention: key/value length mismatch");
  require(groups > 0 && q.rows() % groups == 0 && k.rows() % groups == 0,
          "attention: rows not divisible into groups");
  const Eigen::Index dh = dim / heads;
  const Eigen::Index nq = q.rows() / groups;
  const Eigen::Index nk = k.rows() / groups;
  const Real s = 1.0 / std::sqrt(static_cast<Real>(dh));

  Matrix out(q.rows(), dim);
  std::vector<Matrix> probs;
  probs.reserve(static_cast<std::size_t>(groups * heads));
  for (int g = 0; g < groups; ++g) {
    for (int h = 0; h < heads; ++h) {
      auto qh = q.value().block(g * nq, h * dh, nq, dh);
      auto kh = k.value().block(g * nk, h * dh, nk, dh);
      auto vh = v.value().block(g * nk, h * dh, nk, dh);
      Matrix logits(nq, nk);
      logits.noalias() = qh * kh.transpose();
      logits *= s;
      Matrix p = softmax_value(logits);
      out.block(g * nq, h * dh, nq, dh).noalias() = p * vh;
      probs.push_back(std::move(p));
    }
  }
  if (weights_out) *weights_out = probs;
  return make_node(std::move(out), {q, k, v},
                   [probs = std::move(probs), heads, groups, dh, nq, nk, s](Node& n) {
                     Node& pq = parent(n, 0);
                     Node& pk = parent(n, 1);
                     Node& pv = parent(n, 2);
                     for (int g = 0; g < groups; ++g) {
                       for (int h = 0; h < heads; ++h) {
                         const Matrix& p = probs[static_cast<std::size_t>(g * heads + h)];
                         auto dout = n.grad.block(g * nq, h * dh, nq, dh);
                         auto vh = pv.value.block(g * nk, h * dh, nk, dh);
                         if (pv.requires_grad)
                           pv.grad_buffer().block(g * nk, h * dh, nk, dh).noalias() += p.transpose() * dout;
                         if (!pq.requires_grad && !pk.requires_grad) continue;
                         Matrix dp(nq, nk);
                         dp.noalias() = dout * vh.transpose();
                         Matrix dlogits = softmax_backward(p, dp) * s;
                         if (pq.requires_grad)
                           pq.grad_buffer().block(g * nq, h * dh, nq, dh).noalias() +=
                               dlogits * pk.value.block(g * nk, h * dh, nk, dh);
                         if (pk.requires_grad)
                           pk.grad_buffer().block(g * nk, h * dh, nk, dh).noalias() +=
                               dlogits.transpose() * pq.value.block(g * nq, h * dh, nq, dh);
                       }
                     }
                   });
}

}  // namespace stamp::ad
