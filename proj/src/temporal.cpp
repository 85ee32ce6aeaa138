#include "stamp/temporal.hpp"

#include "stamp/errors.hpp"

#include <cmath>

namespace stamp::temporal {

double frequency(int i, int dim) {
  const int half = dim / 2;
  return std::exp(-std::log(kFrequencyBase) * static_cast<double>(i) / static_cast<double>(half));
}

Matrix te_features(double delta_t, int dim) {
  check(dim > 0 && dim % 2 == 0, ErrorKind::Config,
        "temporal encoding width " + std::to_string(dim) + " must be positive and even");
  const int half = dim / 2;
  Matrix out(1, dim);
  for (int i = 0; i < half; ++i) {
    const double phase = delta_t * frequency(i, dim);
    out(0, i) = std::cos(phase);
    out(0, half + i) = std::sin(phase);
  }
  return out;
}

TemporalEncoder TemporalEncoder::create(nn::ParameterSet& params, const std::string& name, int dim,
                                        std::mt19937_64& rng) {
  check(dim > 0 && dim % 2 == 0, ErrorKind::Config,
        "temporal encoding width " + std::to_string(dim) + " must be positive and even");
  TemporalEncoder te;
  te.mlp_ = nn::Mlp2::create(params, name, dim, dim, dim, nn::Activation::Silu, rng);
  te.dim_ = dim;
  return te;
}

Var TemporalEncoder::operator()(std::span<const double> delta_t) const {
  Matrix features(static_cast<Eigen::Index>(delta_t.size()), dim_);
  for (std::size_t i = 0; i < delta_t.size(); ++i)
    features.row(static_cast<Eigen::Index>(i)) = te_features(delta_t[i], dim_);
  return mlp_(ad::constant(std::move(features)));
}

Var TemporalEncoder::operator()(double delta_t) const {
  const double one[] = {delta_t};
  return (*this)(std::span<const double>(one));
}

}  // namespace stamp::temporal
