#pragma once

// Named learnable parameters and the handful of layers the models are built from.

#include "stamp/autodiff.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace stamp::nn {

using ad::Matrix;
using ad::Var;

struct Parameter {
  std::string name;
  Var var;
  bool decay = true;  // decoupled weight decay applies
};

/// Ordered registry of parameters. Order is the creation order and defines
/// the checkpoint layout. Values are kept representable in 32-bit floats so
/// that checkpoints round-trip exactly.
class ParameterSet {
 public:
  Var add(std::string name, Matrix value, bool decay);
  const Parameter* find(std::string_view name) const;
  Parameter* find(std::string_view name);
  bool has_prefix(std::string_view prefix) const;

  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  /// FNV-1a over names, shapes and float32 values of the parameters whose
  /// names start with `prefix` (all when empty).
  std::uint64_t digest(std::string_view prefix = {}) const;

 private:
  std::vector<Parameter> items_;
};

Matrix round_to_float(Matrix m);

/// Draws from N(0, sigma²) truncated to [-2σ, 2σ].
Matrix truncated_normal(Eigen::Index rows, Eigen::Index cols, double sigma, std::mt19937_64& rng);

struct Linear {
  Var weight;  // in × out
  Var bias;    // 1 × out

  static Linear create(ParameterSet& params, const std::string& name, int in, int out,
                       std::mt19937_64& rng);
  Var operator()(const Var& x) const { return ad::linear(x, weight, bias); }
  int in_features() const { return static_cast<int>(weight.rows()); }
  int out_features() const { return static_cast<int>(weight.cols()); }
};

struct LayerNorm {
  Var gain;
  Var bias;

  static LayerNorm create(ParameterSet& params, const std::string& name, int dim);
  Var operator()(const Var& x) const { return ad::layer_norm(x, gain, bias); }
};

enum class Activation { Gelu, Silu };

/// Two linear layers with an activation in between and none after.
struct Mlp2 {
  Linear fc1;
  Linear fc2;
  Activation act = Activation::Gelu;

  static Mlp2 create(ParameterSet& params, const std::string& name, int in, int hidden, int out,
                     Activation act, std::mt19937_64& rng);
  Var operator()(const Var& x) const;
};

/// Multi-head attention with separate q/k/v/out projections. Query and
/// key/value inputs may differ (cross-attention).
struct MultiHeadAttention {
  Linear q, k, v, out;
  int heads = 1;

  static MultiHeadAttention create(ParameterSet& params, const std::string& name, int dim,
                                   int heads, std::mt19937_64& rng);
  Var operator()(const Var& queries, const Var& keys_values, int groups = 1,
                 std::vector<Matrix>* weights = nullptr) const;
};

}  // namespace stamp::nn
