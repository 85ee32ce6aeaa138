#include "stamp/latentvar.hpp"

#include "stamp/errors.hpp"

namespace stamp::latentvar {

namespace {

Var kl_rows(const Var& q, const Var& p, int batch) {
  return ad::scale(ad::sum(ad::mul(q, ad::sub(ad::log(q), ad::log(p)))), 1.0 / batch);
}

void check_pair(const CategoricalLatent& q, const CategoricalLatent& p) {
  check(q.batch == p.batch && q.groups == p.groups && q.bins == p.bins, ErrorKind::Shape,
        "KL between categoricals of different shapes");
}

}  // namespace

void LatentConfig::validate(int embed_dim) const {
  check(groups > 0 && bins > 1 && hidden > 0, ErrorKind::Config, "latent groups, bins and hidden must be positive");
  check(width() == embed_dim, ErrorKind::Config,
        "latent groups·bins (" + std::to_string(width()) + ") must equal embed_dim (" + std::to_string(embed_dim) + ")");
  check(uniform_mix >= 0.0 && uniform_mix < 1.0, ErrorKind::Config, "uniform_mix outside [0,1)");
}

CategoricalLatent make_categorical(const Var& flat_logits, int groups, int bins, double uniform_mix) {
  check(flat_logits.cols() == groups * bins, ErrorKind::Shape, "latent logits width != groups·bins");
  CategoricalLatent lat;
  lat.batch = static_cast<int>(flat_logits.rows());
  lat.groups = groups;
  lat.bins = bins;
  lat.logits = ad::reshape(flat_logits, flat_logits.rows() * groups, bins);
  lat.probs = ad::mixed_softmax_rows(lat.logits, uniform_mix);
  return lat;
}

LatentHeads LatentHeads::create(nn::ParameterSet& params, const LatentConfig& cfg, int embed_dim,
                                std::mt19937_64& rng) {
  cfg.validate(embed_dim);
  LatentHeads h;
  h.cfg = cfg;
  h.prior = nn::Mlp2::create(params, "latent.prior", embed_dim, cfg.hidden, cfg.width(), nn::Activation::Silu, rng);
  h.posterior =
      nn::Mlp2::create(params, "latent.posterior", 2 * embed_dim, cfg.hidden, cfg.width(), nn::Activation::Silu, rng);
  return h;
}

CategoricalLatent prior_logits(const LatentHeads& heads, const Var& cls_t) {
  return make_categorical(heads.prior(cls_t), heads.cfg.groups, heads.cfg.bins, heads.cfg.uniform_mix);
}

CategoricalLatent posterior_logits(const LatentHeads& heads, const Var& cls_t, const Var& cls_future) {
  check(cls_t.rows() == cls_future.rows(), ErrorKind::Shape, "posterior inputs differ in batch size");
  return make_categorical(heads.posterior(ad::concat_cols(cls_t, cls_future)), heads.cfg.groups, heads.cfg.bins,
                          heads.cfg.uniform_mix);
}

Var st_sample(const CategoricalLatent& lat, std::mt19937_64& rng) {
  const Matrix& p = lat.probs.value();
  Matrix hard = Matrix::Zero(p.rows(), p.cols());
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double u = u01(rng);
    double acc = 0.0;
    Eigen::Index pick = p.cols() - 1;
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      acc += p(r, c);
      if (u < acc) {
        pick = c;
        break;
      }
    }
    hard(r, pick) = 1.0;
  }
  Var z = ad::straight_through(hard, lat.probs);
  return ad::reshape(z, lat.batch, static_cast<Eigen::Index>(lat.groups) * lat.bins);
}

Var expected_latent(const CategoricalLatent& lat) {
  return ad::reshape(lat.probs, lat.batch, static_cast<Eigen::Index>(lat.groups) * lat.bins);
}

Var kl_divergence(const CategoricalLatent& q, const CategoricalLatent& p) {
  check_pair(q, p);
  return kl_rows(q.probs, p.probs, q.batch);
}

Var kl_weighted(const CategoricalLatent& q, const CategoricalLatent& p) {
  check_pair(q, p);
  Var to_posterior = kl_rows(q.probs, ad::detach(p.probs), q.batch);
  Var to_prior = kl_rows(ad::detach(q.probs), p.probs, q.batch);
  return ad::add(ad::scale(to_posterior, kPosteriorWeight), ad::scale(to_prior, kPriorWeight));
}

}  // namespace stamp::latentvar
