#pragma once

#include "stamp/autodiff.hpp"
#include "stamp/trainer.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace stamp::testing {

using ad::Matrix;
using ad::Var;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Largest norm-relative error between backprop and central differences over
/// the given leaves. Norms below 1e-3 are compared absolutely (the key bias of
/// attention has an exactly zero gradient). `loss` rebuilds the graph from the current leaf values.
inline double gradient_error(const std::function<Var()>& loss, std::vector<Var> leaves, double h = 1e-6) {
  for (auto& l : leaves) l.zero_grad();
  ad::backward(loss());
  double worst = 0.0;
  for (auto& l : leaves) {
    Matrix analytic = l.has_grad() ? l.grad() : Matrix::Zero(l.rows(), l.cols());
    Matrix numeric(l.rows(), l.cols());
    for (Eigen::Index i = 0; i < l.value().size(); ++i) {
      double& x = l.mutable_value().data()[i];
      const double saved = x;
      x = saved + h;
      const double up = loss().item();
      x = saved - h;
      const double down = loss().item();
      x = saved;
      numeric.data()[i] = (up - down) / (2.0 * h);
    }
    const double scale = std::max({analytic.norm(), numeric.norm(), 1e-3});
    worst = std::max(worst, (analytic - numeric).norm() / scale);
  }
  return worst;
}

/// Scalar probe of a matrix-valued output: Σ w ⊙ y with a fixed random w.
inline Var weighted_sum(const Var& y, const Matrix& w) { return ad::sum(ad::mul(y, ad::constant(w))); }

/// Smallest useful model: one block each side, width 8, 8 tokens of a 4×8×8 volume.
inline trainer::TrainConfig tiny_config(trainer::Mode mode) {
  trainer::TrainConfig cfg;
  cfg.encoder.depth = 1;
  cfg.encoder.embed_dim = 8;
  cfg.encoder.heads = 2;
  cfg.encoder.mlp_ratio = 2;
  cfg.encoder.volume = {4, 8, 8};
  cfg.encoder.patch = {2, 4, 4};
  cfg.decoder.depth = 1;
  cfg.decoder.embed_dim = 8;
  cfg.decoder.heads = 2;
  cfg.decoder.mlp_ratio = 2;
  cfg.latent = {2, 4, 8, 0.01};
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  return trainer::with_mode(cfg, mode);
}

}  // namespace stamp::testing
