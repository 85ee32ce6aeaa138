#include "doctest.h"
#include "support.hpp"

#include "stamp/errors.hpp"
#include "stamp/eval.hpp"

#include <algorithm>
#include <set>

using namespace stamp;
using namespace stamp::testing;
using namespace stamp::eval;

namespace {

double brute_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double hits = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        hits += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return hits / pairs;
}

// Step-wise area: one operating point per distinct score, highest first.
double brute_prauc(const std::vector<double>& s, const std::vector<int>& y) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  double total = 0.0;
  for (int l : y) total += l;
  double area = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0.0, called = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) {
        called += 1.0;
        tp += y[i];
      }
    area += (tp / total - prev_recall) * (tp / called);
    prev_recall = tp / total;
  }
  return area;
}

double brute_bacc(const std::vector<int>& p, const std::vector<int>& y) {
  double recall[2] = {0, 0}, count[2] = {0, 0};
  for (std::size_t i = 0; i < y.size(); ++i) {
    count[y[i]] += 1.0;
    recall[y[i]] += p[i] == y[i] ? 1.0 : 0.0;
  }
  return 0.5 * (recall[0] / count[0] + recall[1] / count[1]);
}

std::vector<int> bits(unsigned mask, std::size_t n) {
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (mask >> i) & 1u;
  return out;
}

// Samples whose first feature is shifted by the label on every token, 4 visits per patient.
std::vector<ProbeSample> separable_samples(std::size_t patients, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::vector<ProbeSample> out;
  for (std::size_t p = 0; p < patients; ++p)
    for (int v = 0; v < 4; ++v) {
      ProbeSample s;
      s.patient_id = static_cast<std::int64_t>(p) + 100;
      s.t = 3.0 * v;
      s.label = coin(rng) ? 1 : 0;
      s.tokens = random_matrix(3, 8, rng);
      s.tokens.col(0).array() += s.label ? 1.5 : -1.5;
      out.push_back(std::move(s));
    }
  return out;
}

ProbeConfig fast_probe() {
  ProbeConfig cfg;
  cfg.epochs = 60;
  cfg.lr_grid = {1e-2, 3e-2};
  return cfg;
}

}  // namespace

TEST_CASE("metric examples") {
  const double s1[] = {0.1, 0.4, 0.35, 0.8};
  const int y1[] = {0, 0, 1, 1};
  CHECK(auroc(s1, y1) == doctest::Approx(0.75).epsilon(1e-12));
  const double s2[] = {0.9, 0.8, 0.7};
  const int y2[] = {1, 0, 1};
  CHECK(prauc(s2, y2) == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  const int p3[] = {1, 1, 0, 1};
  const int y3[] = {1, 1, 0, 0};
  CHECK(bacc(p3, y3) == doctest::Approx(0.75));

  const double sep[] = {0.1, 0.2, 0.8, 0.9};
  CHECK(auroc(sep, y1) == 1.0);
  CHECK(prauc(sep, y1) == 1.0);
  const double flat[] = {0.3, 0.3, 0.3, 0.3};
  CHECK(auroc(flat, y1) == 0.5);
  const int all_pos[] = {1, 1, 1, 1};
  CHECK(bacc(all_pos, y1) == 0.5);
  CHECK(bacc(y1, y1) == 1.0);
}

TEST_CASE("metrics match brute force on every labelling of up to eight items") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> level(0, 4);  // coarse scores force ties
  for (std::size_t n = 2; n <= 8; ++n) {
    std::vector<double> scores(n);
    for (auto& s : scores) s = 0.25 * level(rng);
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
      const auto y = bits(mask, n);
      const int pos = std::count(y.begin(), y.end(), 1);
      if (pos > 0) REQUIRE(prauc(scores, y) == doctest::Approx(brute_prauc(scores, y)).epsilon(1e-12));
      if (pos == 0 || pos == static_cast<int>(n)) continue;
      REQUIRE(auroc(scores, y) == doctest::Approx(brute_auroc(scores, y)).epsilon(1e-12));
      for (unsigned pm = 0; pm < (1u << n); pm += (n > 6 ? 7 : 1)) {
        const auto p = bits(pm, n);
        REQUIRE(bacc(p, y) == doctest::Approx(brute_bacc(p, y)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("best threshold maximizes balanced accuracy") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(8);
    for (auto& x : s) x = u(rng);
    auto y = bits(static_cast<unsigned>(trial * 37 + 5) % 254 + 1, 8);
    const double thr = best_threshold(s, y);
    auto at = [&](double t) {
      std::vector<int> p(8);
      for (int i = 0; i < 8; ++i) p[i] = s[i] >= t ? 1 : 0;
      return bacc(p, y);
    };
    for (double t : s) CHECK(at(thr) >= at(t));
  }
}

TEST_CASE("random scores give precision-recall area near the positive ratio") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> s(10000);
  std::vector<int> y(10000, 0);
  for (std::size_t i = 0; i < 1000; ++i) y[i] = 1;
  std::shuffle(y.begin(), y.end(), rng);
  for (auto& x : s) x = u(rng);
  const double a = prauc(s, y);
  CHECK(a >= 0.08);
  CHECK(a <= 0.13);
}

TEST_CASE("single-class inputs are metric errors") {
  const double s[] = {0.2, 0.7};
  const int neg[] = {0, 0};
  const int pos[] = {1, 1};
  CHECK_THROWS_AS(auroc(s, neg), Error);
  CHECK_THROWS_AS(auroc(s, pos), Error);
  CHECK_THROWS_AS(prauc(s, neg), Error);
  CHECK_NOTHROW(prauc(s, pos));
  CHECK_THROWS_AS(bacc(pos, pos), Error);
  try {
    auroc(s, neg);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Metric);
  }
}

TEST_CASE("attention pool matches finite differences on three tokens") {
  nn::ParameterSet params;
  std::mt19937_64 rng(6);
  AttentionPool pool = AttentionPool::create(params, 8, rng);
  for (auto& p : params.items()) p.var.mutable_value() = random_matrix(p.var.rows(), p.var.cols(), rng, 0.5);
  Var x = ad::leaf(random_matrix(3, 8, rng));
  const Matrix w = random_matrix(1, 8, rng);
  std::vector<Var> leaves{x};
  for (auto& p : params.items()) leaves.push_back(p.var);
  CHECK(gradient_error([&] { return weighted_sum(pool(x, 1), w); }, leaves) < 1e-4);
}

TEST_CASE("attention pool over one token returns its value projection") {
  nn::ParameterSet params;
  std::mt19937_64 rng(7);
  AttentionPool pool = AttentionPool::create(params, 8, rng);
  const Matrix x = random_matrix(1, 8, rng);
  const Matrix single = pool(ad::constant(x), 1).value();
  const Matrix expected = pool.attn.out(pool.attn.v(ad::constant(x))).value();
  CHECK((single - expected).norm() < 1e-12);

  Matrix same(4, 8);
  for (int i = 0; i < 4; ++i) same.row(i) = x.row(0);
  CHECK((pool(ad::constant(same), 1).value() - single).norm() < 1e-12);

  Matrix two_sets(2, 8);
  two_sets.row(0) = x.row(0);
  two_sets.row(1) = random_matrix(1, 8, rng).row(0);
  const Matrix both = pool(ad::constant(two_sets), 2).value();
  CHECK((both.row(0) - single.row(0)).norm() < 1e-12);
}

TEST_CASE("inference token counts follow the flags") {
  std::mt19937_64 init(8);
  const auto stamp = trainer::Model::create(tiny_config(trainer::Mode::Stamp), init);
  const auto mae = trainer::Model::create(tiny_config(trainer::Mode::Mae), init);
  synthvol::DatasetConfig d;
  d.dims = {4, 8, 8};
  const auto vol = synthvol::render_volume(synthvol::gen_patient(1, d), 3.0, d.dims);

  ProbeConfig cfg;
  cfg.use_te = false;
  cfg.use_se = false;
  CHECK(infer_features(*stamp, vol, 6.0, cfg).rows() == 9);
  CHECK(infer_features(*mae, vol, 6.0, cfg).rows() == 9);
  cfg.use_se = true;
  CHECK(infer_features(*stamp, vol, 6.0, cfg).rows() == 10);
  CHECK_THROWS_AS(infer_features(*mae, vol, 6.0, cfg), Error);
  cfg.use_se = false;
  cfg.use_te = true;
  CHECK_THROWS_AS(check_compatible(*mae, cfg), Error);
  try {
    cfg.use_se = true;
    check_compatible(*mae, cfg);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
  }

  cfg.use_te = true;
  cfg.use_se = true;
  const Matrix a = infer_features(*stamp, vol, 3.0, cfg);
  const Matrix b = infer_features(*stamp, vol, 15.0, cfg);
  CHECK((a - b).norm() > 0.0);
  CHECK(infer_features(*stamp, vol, 3.0, cfg) == a);
}

TEST_CASE("patient folds rotate roles without leakage") {
  std::vector<std::int64_t> ids;
  for (int i = 0; i < 22; ++i) ids.push_back(i * 3);
  ids.push_back(0);  // duplicates collapse
  const auto folds = patient_folds(ids, 4, 9);
  REQUIRE(folds.size() == 4);
  std::set<std::int64_t> tested;
  for (const auto& f : folds) {
    CHECK_NOTHROW(check_no_leakage(f));
    CHECK(f.train.size() + f.validation.size() + f.test.size() == 22);
    tested.insert(f.test.begin(), f.test.end());
  }
  CHECK(tested.size() == 22);
  CHECK(folds[0].validation == folds[1].test);

  FoldSplit leaky = folds[0];
  leaky.train.push_back(leaky.test.front());
  CHECK_THROWS_AS(check_no_leakage(leaky), Error);
  CHECK_THROWS_AS(patient_folds({1, 2}, 4, 0), Error);
}

TEST_CASE("probing trains heads only and reports every fold") {
  std::mt19937_64 init(10);
  const auto model = trainer::Model::create(tiny_config(trainer::Mode::Stamp), init);
  const std::uint64_t before = model->params.digest();
  const auto samples = separable_samples(60, 11);
  const auto report = run_probe(*model, samples, fast_probe());
  CHECK(model->params.digest() == before);
  REQUIRE(report.folds.size() == 4);
  CHECK(report.auroc_mean > 0.85);
  for (const auto& f : report.folds) {
    CHECK(f.prauc >= 0.0);
    CHECK(f.bacc <= 1.0);
  }
  const std::string csv[] = {"mode=stamp"};
  const std::string text = report_csv(report, csv);
  CHECK(text.rfind("# mode=stamp\n", 0) == 0);
  CHECK(text.find("fold,auroc,prauc,bacc\n0,") != std::string::npos);
  CHECK(text.find("\nmean,") != std::string::npos);
  CHECK(std::count(text.begin(), text.end(), '\n') == 9);
}

TEST_CASE("shuffled labels bring the probe to chance") {
  std::mt19937_64 init(12);
  const auto model = trainer::Model::create(tiny_config(trainer::Mode::Stamp), init);
  auto samples = separable_samples(500, 13);
  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  std::mt19937_64 rng(14);
  std::shuffle(labels.begin(), labels.end(), rng);
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i].label = labels[i];
  const auto report = run_probe(*model, samples, fast_probe());
  CHECK(report.auroc_mean >= 0.45);
  CHECK(report.auroc_mean <= 0.55);
}

TEST_CASE("probe config validation") {
  ProbeConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.folds = 2;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.lr_grid.clear();
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK(parse_pool("mean_linear") == Pool::MeanLinear);
  CHECK_THROWS_AS(parse_pool("max"), Error);
}
