#include "doctest.h"
#include "support.hpp"

#include "stamp/errors.hpp"
#include "stamp/latentvar.hpp"

#include <cmath>

using namespace stamp;
using namespace stamp::testing;
using namespace stamp::latentvar;

namespace {

constexpr double kMix = 0.01;

// d(w·p)/d logits for p = (1-m)·softmax + m/B, one row at a time.
Matrix softmax_path_gradient(const Matrix& logits, const Matrix& w) {
  Matrix g(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::ArrayXd e = (logits.row(r).array() - logits.row(r).maxCoeff()).exp();
    Eigen::ArrayXd s = e / e.sum();
    const double ws = (w.row(r).array().transpose() * s).sum();
    g.row(r) = ((1.0 - kMix) * s * (w.row(r).array().transpose() - ws)).transpose();
  }
  return g;
}

double plain_kl(const Matrix& ql, const Matrix& pl) {
  const auto q = make_categorical(ad::constant(ql), static_cast<int>(ql.cols() / 32), 32, kMix);
  const auto p = make_categorical(ad::constant(pl), static_cast<int>(pl.cols() / 32), 32, kMix);
  return kl_divergence(q, p).item();
}

}  // namespace

TEST_CASE("zero logits give uniform probabilities") {
  const auto lat = make_categorical(ad::constant(Matrix::Zero(3, 64)), 2, 32, kMix);
  CHECK(lat.probs.value().isApprox(Matrix::Constant(6, 32, 1.0 / 32.0), 1e-15));
}

TEST_CASE("group probabilities sum to one") {
  std::mt19937_64 rng(1);
  const auto lat = make_categorical(ad::constant(random_matrix(4, 64, rng, 3.0)), 2, 32, kMix);
  for (Eigen::Index r = 0; r < lat.probs.rows(); ++r) CHECK(std::abs(lat.probs.value().row(r).sum() - 1.0) < 1e-6);
}

TEST_CASE("posterior inputs are ordered") {
  nn::ParameterSet params;
  std::mt19937_64 rng(2);
  const LatentHeads heads = LatentHeads::create(params, {2, 32, 16, kMix}, 64, rng);
  const Var a = ad::constant(random_matrix(1, 64, rng)), b = ad::constant(random_matrix(1, 64, rng));
  const Matrix ab = posterior_logits(heads, a, b).probs.value();
  CHECK(ab == posterior_logits(heads, a, b).probs.value());
  CHECK((ab - posterior_logits(heads, b, a).probs.value()).norm() > 1e-9);
}

TEST_CASE("straight-through samples are one-hot with the softmax-path gradient") {
  std::mt19937_64 rng(3);
  Var logits = ad::leaf(random_matrix(1, 64, rng));
  const Matrix w = random_matrix(1, 64, rng);
  const auto lat = make_categorical(logits, 2, 32, kMix);
  const Var z = st_sample(lat, rng);
  for (int g = 0; g < 2; ++g) {
    const auto block = z.value().block(0, 32 * g, 1, 32);
    CHECK(block.sum() == 1.0);
    CHECK(block.maxCoeff() == 1.0);
    CHECK((block.array() == 0.0).count() == 31);
  }
  ad::backward(weighted_sum(z, w));
  const Matrix expected = softmax_path_gradient(ad::reshape(ad::constant(logits.value()), 2, 32).value(),
                                                Eigen::Map<const Matrix>(w.data(), 2, 32));
  CHECK((logits.grad() - Eigen::Map<const Matrix>(expected.data(), 1, 64)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("uniform draws hit each of four bins about a quarter of the time") {
  std::mt19937_64 rng(4);
  const auto lat = make_categorical(ad::constant(Matrix::Zero(1, 4)), 1, 4, kMix);
  Eigen::RowVector4d counts = Eigen::RowVector4d::Zero();
  for (int i = 0; i < 10000; ++i) counts += st_sample(lat, rng).value().row(0);
  for (int b = 0; b < 4; ++b) CHECK(std::abs(counts(b) / 10000.0 - 0.25) <= 0.02);
}

TEST_CASE("closed-form KL example") {
  // Probabilities (0.75, 0.25) and (0.25, 0.75) without the mixing floor.
  Matrix q(1, 2), p(1, 2);
  q << std::log(3.0), 0.0;
  p << 0.0, std::log(3.0);
  const auto cq = make_categorical(ad::constant(q), 1, 2, 0.0);
  const auto cp = make_categorical(ad::constant(p), 1, 2, 0.0);
  CHECK(kl_weighted(cq, cp).item() == doctest::Approx(0.5 * std::log(3.0)).epsilon(1e-12));
  CHECK(kl_weighted(cq, cq).item() == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("weighted KL splits the gradient 0.2 / 0.8") {
  std::mt19937_64 rng(5);
  Var ql = ad::leaf(random_matrix(3, 64, rng));
  Var pl = ad::leaf(random_matrix(3, 64, rng));
  const auto q = make_categorical(ql, 2, 32, kMix);
  const auto p = make_categorical(pl, 2, 32, kMix);
  const Var kl = kl_weighted(q, p);
  CHECK(std::abs(kl.item() - kl_divergence(q, p).item()) < 1e-9);
  CHECK(kl.item() >= 0.0);
  ad::backward(kl);

  const double h = 1e-6;
  Matrix fq(3, 64), fp(3, 64);
  for (Eigen::Index i = 0; i < 3 * 64; ++i) {
    Matrix a = ql.value(), b = ql.value();
    a.data()[i] += h;
    b.data()[i] -= h;
    fq.data()[i] = (plain_kl(a, pl.value()) - plain_kl(b, pl.value())) / (2 * h);
    a = pl.value();
    b = pl.value();
    a.data()[i] += h;
    b.data()[i] -= h;
    fp.data()[i] = (plain_kl(ql.value(), a) - plain_kl(ql.value(), b)) / (2 * h);
  }
  CHECK((ql.grad() - kPosteriorWeight * fq).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((pl.grad() - kPriorWeight * fp).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("KL is non-negative and rejects mismatched shapes") {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 50; ++i) {
    const auto q = make_categorical(ad::constant(random_matrix(2, 64, rng, 2.0)), 2, 32, kMix);
    const auto p = make_categorical(ad::constant(random_matrix(2, 64, rng, 2.0)), 2, 32, kMix);
    REQUIRE(kl_divergence(q, p).item() >= 0.0);
  }
  const auto a = make_categorical(ad::constant(Matrix::Zero(1, 64)), 2, 32, kMix);
  const auto b = make_categorical(ad::constant(Matrix::Zero(1, 64)), 1, 64, kMix);
  CHECK_THROWS_AS(kl_weighted(a, b), Error);
}

TEST_CASE("latent width must match the embedding") {
  LatentConfig cfg;
  CHECK_NOTHROW(cfg.validate(64));
  CHECK_THROWS_AS(cfg.validate(48), Error);
}
