#include "doctest.h"
#include "support.hpp"

#include "stamp/autodiff.hpp"

using namespace stamp;
using namespace stamp::testing;

TEST_CASE("elementwise and linear ops match finite differences") {
  std::mt19937_64 rng(1);
  Var a = ad::leaf(random_matrix(3, 4, rng));
  Var b = ad::leaf(random_matrix(4, 2, rng));
  Var bias = ad::leaf(random_matrix(1, 2, rng));
  Matrix w = random_matrix(3, 2, rng);
  auto loss = [&] {
    Var y = ad::linear(ad::gelu(a), b, bias);
    y = ad::add(ad::silu(y), ad::square(ad::scale(y, 0.5)));
    return weighted_sum(y, w);
  };
  CHECK(gradient_error(loss, {a, b, bias}) < 1e-6);
}

TEST_CASE("layer norm and softmax gradients") {
  std::mt19937_64 rng(2);
  Var x = ad::leaf(random_matrix(4, 6, rng));
  Var g = ad::leaf(random_matrix(1, 6, rng));
  Var b = ad::leaf(random_matrix(1, 6, rng));
  Matrix w = random_matrix(4, 6, rng);
  auto loss = [&] {
    Var y = ad::layer_norm(x, g, b);
    return ad::add(weighted_sum(ad::softmax_rows(y), w), ad::sum(ad::log(ad::mixed_softmax_rows(y, 0.01))));
  };
  CHECK(gradient_error(loss, {x, g, b}) < 1e-6);
}

TEST_CASE("grouped attention gradient and per-group independence") {
  std::mt19937_64 rng(3);
  Var q = ad::leaf(random_matrix(6, 8, rng));
  Var k = ad::leaf(random_matrix(10, 8, rng));
  Var v = ad::leaf(random_matrix(10, 8, rng));
  Matrix w = random_matrix(6, 8, rng);
  auto loss = [&] { return weighted_sum(ad::attention(q, k, v, 2, 2), w); };
  CHECK(gradient_error(loss, {q, k, v}) < 1e-6);

  // Group 0 of the fused call equals a standalone call on its rows.
  Matrix fused = ad::attention(q, k, v, 2, 2).value();
  Matrix alone = ad::attention(ad::constant(q.value().topRows(3)), ad::constant(k.value().topRows(5)),
                               ad::constant(v.value().topRows(5)), 2)
                     .value();
  CHECK((fused.topRows(3) - alone).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("two keys with logits 0 and ln 3 weigh 0.25 and 0.75") {
  // One head of width 1: q·k / sqrt(1) gives the raw logit.
  Matrix q(1, 1), k(2, 1), v(2, 1);
  q << 1.0;
  k << 0.0, std::log(3.0);
  v << 0.0, 1.0;
  std::vector<Matrix> weights;
  Var out = ad::attention(ad::constant(q), ad::constant(k), ad::constant(v), 1, 1, &weights);
  REQUIRE(weights.size() == 1);
  CHECK(weights[0](0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(weights[0](0, 1) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(out.item() == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("attention is invariant to joint key/value permutation") {
  std::mt19937_64 rng(4);
  Matrix q = random_matrix(3, 4, rng), k = random_matrix(5, 4, rng), v = random_matrix(5, 4, rng);
  Matrix kp = k, vp = v;
  kp.row(0).swap(kp.row(3));
  vp.row(0).swap(vp.row(3));
  Matrix a = ad::attention(ad::constant(q), ad::constant(k), ad::constant(v), 2).value();
  Matrix b = ad::attention(ad::constant(q), ad::constant(kp), ad::constant(vp), 2).value();
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("row routing ops scatter gradients back") {
  std::mt19937_64 rng(5);
  Var a = ad::leaf(random_matrix(3, 2, rng));
  Var b = ad::leaf(random_matrix(2, 2, rng));
  Matrix w = random_matrix(4, 4, rng);
  auto loss = [&] {
    const Var srcs[] = {a, b};
    const ad::RowRef refs[] = {{1, 0}, {0, 2}, {0, 2}, {1, 1}};
    Var r = ad::assemble_rows(srcs, refs);
    Var c = ad::concat_cols(r, ad::reshape(ad::transpose(r), 4, 2));
    const Var parts[] = {ad::slice_rows(a, 1, 2), ad::gather_rows(b, std::vector<Eigen::Index>{1, 0})};
    Var s = ad::concat_rows(parts);
    return ad::add(weighted_sum(c, w), ad::sum(ad::matmul(s, ad::transpose(s))));
  };
  CHECK(gradient_error(loss, {a, b}) < 1e-6);
}

TEST_CASE("straight-through carries the hard value and the soft gradient") {
  Var soft = ad::leaf(Matrix::Constant(1, 3, 0.3));
  Matrix hard = Matrix::Zero(1, 3);
  hard(0, 1) = 1.0;
  Var y = ad::straight_through(hard, soft);
  CHECK(y.value() == hard);
  Matrix w(1, 3);
  w << 1.0, 2.0, 3.0;
  ad::backward(weighted_sum(y, w));
  CHECK(soft.grad() == w);
}

TEST_CASE("no-grad guard records nothing") {
  Var a = ad::leaf(Matrix::Ones(2, 2));
  ad::NoGradGuard guard;
  Var y = ad::sum(ad::square(a));
  CHECK_FALSE(y.requires_grad());
  CHECK(y.item() == 4.0);
}
