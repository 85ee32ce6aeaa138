#pragma once

// Time-conditioned stochastic token: grouped one-hot categorical prior and
// posterior heads, straight-through sampling and the stop-gradient KL.

#include "stamp/nn.hpp"

#include <random>

namespace stamp::latentvar {

using ad::Matrix;
using ad::Var;

struct LatentConfig {
  int groups = 2;
  int bins = 32;
  int hidden = 128;
  double uniform_mix = 0.01;

  int width() const { return groups * bins; }
  void validate(int embed_dim) const;
};

/// Grouped categorical distribution for a batch. `logits` and `probs` are
/// (batch·groups) × bins; row b·groups+g is group g of sample b.
struct CategoricalLatent {
  Var logits;
  Var probs;
  int batch = 0;
  int groups = 0;
  int bins = 0;
};

/// Reshapes batch × (groups·bins) logits and applies the mixed softmax.
CategoricalLatent make_categorical(const Var& flat_logits, int groups, int bins, double uniform_mix);

struct LatentHeads {
  nn::Mlp2 prior;      // CLS_t (+TE) -> logits
  nn::Mlp2 posterior;  // [CLS_t, CLS_future] -> logits
  LatentConfig cfg;

  static LatentHeads create(nn::ParameterSet& params, const LatentConfig& cfg, int embed_dim, std::mt19937_64& rng);
};

CategoricalLatent prior_logits(const LatentHeads& heads, const Var& cls_t);
CategoricalLatent posterior_logits(const LatentHeads& heads, const Var& cls_t, const Var& cls_future);

/// One-hot draw per group; forward value is exactly the one-hot sample and the
/// gradient flows through the probabilities. Returns batch × (groups·bins).
Var st_sample(const CategoricalLatent& lat, std::mt19937_64& rng);

/// Probability vector as a batch × (groups·bins) row set (deterministic latent).
Var expected_latent(const CategoricalLatent& lat);

/// Σ_groups KL(q‖p), averaged over the batch.
Var kl_divergence(const CategoricalLatent& q, const CategoricalLatent& p);

/// 0.2·KL(q‖sg(p)) + 0.8·KL(sg(q)‖p): equal in value to KL(q‖p), with the
/// posterior receiving 0.2 and the prior 0.8 of the gradient.
Var kl_weighted(const CategoricalLatent& q, const CategoricalLatent& p);

inline constexpr double kPosteriorWeight = 0.2;
inline constexpr double kPriorWeight = 0.8;

}  // namespace stamp::latentvar
