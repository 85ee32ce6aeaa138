#include "doctest.h"
#include "support.hpp"

#include "stamp/config.hpp"
#include "stamp/errors.hpp"
#include "stamp/trainer.hpp"

#include <filesystem>
#include <limits>

using namespace stamp;
using namespace stamp::trainer;

namespace {

TrainConfig tiny(Mode mode) { return testing::tiny_config(mode); }

synthvol::DatasetConfig tiny_data() {
  synthvol::DatasetConfig d;
  d.dims = {4, 8, 8};
  return d;
}

std::vector<PairSample> pairs(int count, std::uint64_t seed, synthvol::Dims3 dims = {4, 8, 8}) {
  synthvol::DatasetConfig d = tiny_data();
  d.dims = dims;
  const synthvol::RenderedCohort cohort(d, seed, static_cast<std::size_t>(count));
  std::mt19937_64 rng(seed);
  TrainConfig cfg;
  return sample_epoch_pairs(cohort, cfg, rng);
}

bool has_prefix(const Model& m, const std::string& prefix) { return m.params.has_prefix(prefix); }

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "stamp_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("mode invariants are enforced") {
  TrainConfig cfg = tiny(Mode::SiamMae);
  CHECK_NOTHROW(cfg.validate());
  cfg.use_se = true;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny(Mode::Mae);
  cfg.use_te = true;
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK(parse_mode("siammae") == Mode::SiamMae);
  CHECK_THROWS_AS(parse_mode("rsp"), Error);
}

TEST_CASE("checkpoint schema follows the mode") {
  std::mt19937_64 rng(0);
  const auto stamp = Model::create(tiny(Mode::Stamp), rng);
  for (const char* p : {"te_encoder.", "te_decoder.", "latent.prior.", "latent.posterior.", "decoder.block0.cross."})
    CHECK(has_prefix(*stamp, p));
  const auto siam = Model::create(tiny(Mode::SiamMae), rng);
  CHECK_FALSE(has_prefix(*siam, "latent."));
  CHECK(has_prefix(*siam, "decoder.block0.cross."));
  const auto mae = Model::create(tiny(Mode::Mae), rng);
  for (const char* p : {"te_", "latent.", "decoder.block0.cross."}) CHECK_FALSE(has_prefix(*mae, p));
}

TEST_CASE("total is recon plus beta times KL") {
  TrainConfig cfg = tiny(Mode::Stamp);
  cfg.beta = 0.37;
  std::mt19937_64 init(1), mask(2), latent(3);
  const auto m = Model::create(cfg, init);
  const auto batch = pairs(4, 5);
  const auto r = forward(*m, batch, mask, latent);
  CHECK(r.total.item() == r.recon.item() + 0.37 * r.kl.item());
  CHECK(r.kl.item() >= 0.0);
}

TEST_CASE("gradient reachability") {
  const auto batch = pairs(4, 6);
  for (double beta : {0.0, 1.0}) {
    TrainConfig cfg = tiny(Mode::Stamp);
    cfg.beta = beta;
    std::mt19937_64 init(1), mask(2), latent(3);
    const auto m = Model::create(cfg, init);
    ad::backward(forward(*m, batch, mask, latent).total);
    double prior = 0.0;
    for (const auto& p : m->params.items()) {
      const double g = p.var.has_grad() ? p.var.grad().norm() : 0.0;
      if (p.name.rfind("latent.prior.", 0) == 0) {
        prior += g;
      } else if (p.name.find(".k.bias") == std::string::npos && p.name != "decoder.mask_token") {
        // Everything else on the graph receives gradient from the reconstruction.
        INFO(p.name);
        CHECK(g > 0.0);
      }
    }
    if (beta == 0.0)
      CHECK(prior == 0.0);
    else
      CHECK(prior > 0.0);
  }
}

TEST_CASE("siamese mode reports no KL") {
  std::mt19937_64 init(1);
  auto m = Model::create(tiny(Mode::SiamMae), init);
  AdamW opt(m->params, 1e-3, 1e-2, 0.9, 0.95, 1e-8);
  RngStreams rng(0);
  const auto l = training_step(*m, opt, pairs(4, 7), rng);
  CHECK(l.kl == 0.0);
  CHECK(l.total == l.recon);
}

TEST_CASE("mae mode trains on single volumes") {
  std::mt19937_64 init(1);
  auto m = Model::create(tiny(Mode::Mae), init);
  AdamW opt(m->params, 1e-3, 1e-2, 0.9, 0.95, 1e-8);
  RngStreams rng(0);
  const auto l = training_step(*m, opt, pairs(4, 8), rng);
  CHECK(std::isfinite(l.recon));
  CHECK(opt.steps() == 1);
}

TEST_CASE("one step lowers the loss on the same batch") {
  // Desk architecture at lr 1e-4, same masks and latent draws before and after.
  const auto desk = config::profile_defaults("desk");
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig cfg = desk.train;
    cfg.lr = 1e-4;
    cfg.seed = seed;
    std::mt19937_64 init(seed);
    auto m = Model::create(cfg, init);
    AdamW opt(m->params, cfg.lr, cfg.weight_decay, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    const auto batch = pairs(4, 100 + seed, cfg.encoder.volume);
    RngStreams rng(seed);
    RngStreams replay = rng;
    const auto before = training_step(*m, opt, batch, rng);
    const double after = forward(*m, batch, replay.mask, replay.latent).total.item();
    improved += after < before.total;
  }
  CHECK(improved >= 3);
}

TEST_CASE("non-finite parameters abort the step untouched") {
  std::mt19937_64 init(1);
  auto m = Model::create(tiny(Mode::Stamp), init);
  AdamW opt(m->params, 1e-3, 1e-2, 0.9, 0.95, 1e-8);
  m->params.items()[0].var.mutable_value()(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const std::uint64_t digest = m->params.digest("decoder.");
  RngStreams rng(0);
  try {
    (void)training_step(*m, opt, pairs(4, 9), rng);
    FAIL("expected a numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
  CHECK(m->params.digest("decoder.") == digest);
  CHECK(opt.steps() == 0);
}

TEST_CASE("augmentation contracts") {
  PairSample p = pairs(1, 10)[0];
  std::mt19937_64 rng(1);
  AugmentFlags off{false, false, false};
  const PairSample same = augment(p, off, rng);
  CHECK(same.past == p.past);
  CHECK(same.future == p.future);

  ForcedAugment flip{true, true};
  const PairSample once = augment(p, off, rng, flip);
  const PairSample twice = augment(once, off, rng, flip);
  CHECK(twice.past == p.past);
  CHECK_FALSE(once.past == p.past);

  Volume small = Volume::zeros({2, 2, 2});
  for (std::size_t i = 0; i < 8; ++i) small.voxels[i] = static_cast<float>(i);
  const Volume f = flip_w(small);
  for (int d = 0; d < 2; ++d)
    for (int h = 0; h < 2; ++h)
      for (int w = 0; w < 2; ++w) CHECK(f.at(d, h, w) == small.at(d, h, 1 - w));

  std::mt19937_64 a(3), b(3);
  const AugmentFlags all;
  const PairSample x = augment(p, all, a), y = augment(p, all, b);
  CHECK(x.past == y.past);
  CHECK(x.future == y.future);
  for (float v : x.past.voxels) REQUIRE((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("epoch pairs cover every patient within the interval range") {
  const synthvol::RenderedCohort cohort(tiny_data(), 2, 7);
  TrainConfig cfg = tiny(Mode::Stamp);
  cfg.pairs_per_patient = 2;
  std::mt19937_64 rng(0);
  const auto ps = sample_epoch_pairs(cohort, cfg, rng);
  CHECK(ps.size() == 14);
  for (const auto& s : ps) {
    CHECK(s.delta_t >= cfg.dt_min);
    CHECK(s.delta_t <= cfg.dt_max);
  }
}

TEST_CASE("checkpoints round-trip and restore exact forwards") {
  TrainConfig cfg = tiny(Mode::Stamp);
  const synthvol::RenderedCohort cohort(tiny_data(), 3, 8);
  const auto res = run_pretrain(cfg, cohort);
  const auto bytes = encode_checkpoint(res.checkpoint);
  CHECK(encode_checkpoint(decode_checkpoint(bytes)) == bytes);

  const auto path = scratch("tiny.ckpt");
  save_checkpoint(path, res.checkpoint);
  const Restored r = restore(load_checkpoint(path));
  CHECK(r.model->params.digest() == res.model->params.digest());
  CHECK(r.optimizer.steps() == res.optimizer.steps());
  CHECK(r.rng.serialize() == res.rng.serialize());

  const auto batch = pairs(4, 11);
  std::mt19937_64 m1(4), l1(5), m2(4), l2(5);
  CHECK(forward(*res.model, batch, m1, l1).prediction.value() == forward(*r.model, batch, m2, l2).prediction.value());

  auto corrupt = bytes;
  corrupt[corrupt.size() / 2] ^= 0x40;
  auto bad_version = bytes;
  bad_version[4] = 9;
  for (const auto& b : {corrupt, bad_version}) {
    try {
      (void)decode_checkpoint(b);
      FAIL("expected a checkpoint error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Checkpoint);
    }
  }
  CHECK_THROWS_AS(load_checkpoint(scratch("missing.ckpt")), Error);
}

TEST_CASE("identical seeds give identical runs") {
  TrainConfig cfg = tiny(Mode::Stamp);
  cfg.seed = 42;
  const synthvol::RenderedCohort cohort(tiny_data(), 4, 8);
  const auto a = run_pretrain(cfg, cohort), b = run_pretrain(cfg, cohort);
  CHECK(encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint));
  REQUIRE(a.metrics.size() == 2);
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(a.metrics[i].recon == b.metrics[i].recon);
    CHECK(a.metrics[i].kl == b.metrics[i].kl);
  }
  cfg.seed = 43;
  CHECK(encode_checkpoint(run_pretrain(cfg, cohort).checkpoint) != encode_checkpoint(a.checkpoint));
}

TEST_CASE("metrics csv and smoothing") {
  const EpochMetrics m[] = {{1, 0.5, 0.25, 0.75, 10.0}};
  const std::string header[] = {"tool"};
  CHECK(metrics_csv(m, header) == "# tool\nepoch,recon,kl,total,wall_ms\n1,0.5,0.25,0.75,10.0\n");
  const double v[] = {1, 2, 3, 4, 5, 6};
  const auto s = smooth(v, 3);
  CHECK(s[0] == 1.0);
  CHECK(s[1] == 1.5);
  CHECK(s[2] == 2.0);
  CHECK(s[5] == 5.0);
}
