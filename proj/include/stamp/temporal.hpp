#pragma once

// Learnable encoding of the inter-visit interval: a 1-D sin-cos featurization
// of Δt fed through a two-layer SiLU MLP.

#include "stamp/nn.hpp"

#include <random>
#include <span>
#include <string>

namespace stamp::temporal {

using ad::Matrix;
using ad::Var;

constexpr double kFrequencyBase = 200.0;

/// ω_i = exp(-ln(200)·i/H) for i < H = dim/2.
double frequency(int i, int dim);

/// [cos(Δt·ω_0..ω_{H-1}), sin(Δt·ω_0..ω_{H-1})] as a 1×dim row.
Matrix te_features(double delta_t, int dim);

class TemporalEncoder {
 public:
  static TemporalEncoder create(nn::ParameterSet& params, const std::string& name, int dim, std::mt19937_64& rng);

  /// One row per interval.
  Var operator()(std::span<const double> delta_t) const;
  Var operator()(double delta_t) const;
  int dim() const { return dim_; }
  const nn::Mlp2& mlp() const { return mlp_; }

 private:
  nn::Mlp2 mlp_;
  int dim_ = 0;
};

}  // namespace stamp::temporal
