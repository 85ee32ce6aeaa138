#include "stamp/eval.hpp"

#include "stamp/errors.hpp"
#include "stamp/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace stamp::eval {

const char* to_string(Pool pool) { return pool == Pool::Attention ? "attention" : "mean_linear"; }

Pool parse_pool(const std::string& text) {
  if (text == "attention") return Pool::Attention;
  if (text == "mean_linear") return Pool::MeanLinear;
  fail(ErrorKind::Config, "unknown pool '" + text + "' (expected attention or mean_linear)");
}

void ProbeConfig::validate() const {
  check(prompt_dt >= 0.0 && window > 0.0 && visit_stride > 0.0, ErrorKind::Config,
        "probe prompt_dt must be non-negative, window and visit_stride positive");
  check(epochs > 0, ErrorKind::Config, "probe epochs must be positive");
  check(!lr_grid.empty(), ErrorKind::Config, "probe lr_grid must not be empty");
  for (double lr : lr_grid) check(lr > 0.0, ErrorKind::Config, "probe learning rates must be positive");
  check(folds >= 3, ErrorKind::Config, "probe needs at least 3 folds (train, validation, test)");
  check(latent_samples >= 0, ErrorKind::Config, "latent_samples must be non-negative");
}

void check_compatible(const trainer::Model& model, const ProbeConfig& cfg) {
  check(!cfg.use_se || model.latent.has_value(), ErrorKind::Config,
        std::string("SE at inference needs a checkpoint with latent heads (this one is ") +
            trainer::to_string(model.cfg.mode) + (model.cfg.use_se ? "" : " without SE") + ")");
  check(!cfg.use_te || model.te_encoder.has_value(), ErrorKind::Config,
        std::string("TE at inference needs a checkpoint with a temporal encoder (this one is ") +
            trainer::to_string(model.cfg.mode) + (model.cfg.use_te ? "" : " without TE") + ")");
}

std::vector<Matrix> infer_features(const trainer::Model& model, std::span<const synthvol::Volume> volumes,
                                   double delta_t, const ProbeConfig& cfg, std::mt19937_64* latent_rng) {
  check_compatible(model, cfg);
  ad::NoGradGuard no_grad;
  std::vector<Matrix> out;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < volumes.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, volumes.size() - start);
    std::vector<tokenizer::TokenGrid> grids;
    for (std::size_t i = 0; i < len; ++i)
      grids.push_back(tokenizer::patchify(volumes[start + i], model.cfg.encoder.patch));
    std::optional<Var> te;
    if (cfg.use_te) {
      std::vector<double> dts(len, delta_t);
      te = (*model.te_encoder)(dts);
    }
    auto h = model.encoder.encode(grids, backbone::EmbeddingSource::PastFull, {}, te ? &*te : nullptr);
    Matrix z;
    if (cfg.use_se) {
      auto prior = latentvar::prior_logits(*model.latent, h.cls());
      if (cfg.latent_samples == 0) {
        z = latentvar::expected_latent(prior).value();
      } else {
        check(latent_rng != nullptr, ErrorKind::Usage, "stochastic latent features need a latent rng");
        z = Matrix::Zero(static_cast<Eigen::Index>(len), model.cfg.encoder.embed_dim);
        for (int k = 0; k < cfg.latent_samples; ++k) z += latentvar::st_sample(prior, *latent_rng).value();
        z /= static_cast<double>(cfg.latent_samples);
      }
    }
    const Matrix& tokens = h.tokens.value();
    for (std::size_t i = 0; i < len; ++i) {
      const Matrix block = tokens.middleRows(static_cast<Eigen::Index>(i) * h.length, h.length);
      if (!cfg.use_se) {
        out.push_back(block);
        continue;
      }
      Matrix f(h.length + 1, tokens.cols());
      f.row(0) = z.row(static_cast<Eigen::Index>(i));
      f.bottomRows(h.length) = block;
      out.push_back(std::move(f));
    }
  }
  return out;
}

Matrix infer_features(const trainer::Model& model, const synthvol::Volume& volume, double delta_t,
                      const ProbeConfig& cfg) {
  const synthvol::Volume v[] = {volume};
  return infer_features(model, v, delta_t, cfg).front();
}

AttentionPool AttentionPool::create(nn::ParameterSet& params, int dim, std::mt19937_64& rng) {
  AttentionPool p;
  p.query = params.add("pool.query", nn::truncated_normal(1, dim, 0.02, rng), false);
  p.attn = nn::MultiHeadAttention::create(params, "pool.attn", dim, 1, rng);
  return p;
}

Var AttentionPool::operator()(const Var& tokens, int groups) const {
  // With one head and one query, q·(xW_k + b_k)ᵀ = (qW_kᵀ)·xᵀ + const, and the
  // constant cancels in the softmax; likewise Σα(xW_v + b_v) = (Σαx)W_v + b_v
  // because the weights sum to one. Attending over raw tokens with the folded
  // query is therefore exact and avoids projecting every token.
  Var folded = ad::matmul(attn.q(query), ad::transpose(attn.k.weight));
  std::vector<ad::RowRef> refs(static_cast<std::size_t>(groups), ad::RowRef{0, 0});
  const Var src[] = {folded};
  Var queries = ad::assemble_rows(src, refs);
  Var pooled = ad::attention(queries, tokens, tokens, 1, groups);
  return attn.out(attn.v(pooled));
}

ProbeHead ProbeHead::create(Pool pool, int dim, std::mt19937_64& rng) {
  ProbeHead h;
  h.pool = pool;
  if (pool == Pool::Attention) h.attention = AttentionPool::create(h.params, dim, rng);
  h.classifier = nn::Linear::create(h.params, "probe.classifier", dim, 2, rng);
  return h;
}

Var ProbeHead::logits(const Var& tokens, int groups) const {
  check(groups > 0 && tokens.rows() % groups == 0, ErrorKind::Shape, "probe: token rows not divisible into groups");
  if (pool == Pool::Attention) return classifier(attention(tokens, groups));
  const Eigen::Index len = tokens.rows() / groups;
  // Mean over each set as a fixed linear map.
  Matrix avg = Matrix::Zero(groups, tokens.rows());
  for (int g = 0; g < groups; ++g) avg.block(g, static_cast<Eigen::Index>(g) * len, 1, len).setConstant(1.0 / len);
  return classifier(ad::matmul(ad::constant(std::move(avg)), tokens));
}

std::vector<double> predict(const ProbeHead& head, const Matrix& stacked_tokens, int groups) {
  ad::NoGradGuard no_grad;
  const Matrix p = ad::softmax_rows(head.logits(ad::constant(stacked_tokens), groups)).value();
  std::vector<double> out(static_cast<std::size_t>(groups));
  for (int g = 0; g < groups; ++g) out[static_cast<std::size_t>(g)] = p(g, 1);
  return out;
}

// ---- metrics ----

namespace {

void check_labels(std::span<const int> labels, std::size_t n, bool need_negative, const char* what) {
  check(labels.size() == n, ErrorKind::Metric, std::string(what) + ": scores and labels differ in length");
  std::size_t pos = 0;
  for (int l : labels) {
    check(l == 0 || l == 1, ErrorKind::Metric, std::string(what) + ": labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  check(pos > 0, ErrorKind::Metric, std::string(what) + ": no positive labels");
  if (need_negative) check(pos < labels.size(), ErrorKind::Metric, std::string(what) + ": no negative labels");
}

std::vector<std::size_t> order_by_score(std::span<const double> scores, bool descending) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return descending ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  return idx;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_labels(labels, scores.size(), true, "auroc");
  const auto idx = order_by_score(scores, false);
  double negatives_below = 0.0, concordant = 0.0, positives = 0.0, negatives = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    double pos = 0.0, neg = 0.0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? pos : neg) += 1.0;
      ++j;
    }
    concordant += pos * (negatives_below + 0.5 * neg);
    negatives_below += neg;
    positives += pos;
    negatives += neg;
    i = j;
  }
  return concordant / (positives * negatives);
}

double prauc(std::span<const double> scores, std::span<const int> labels) {
  check_labels(labels, scores.size(), false, "prauc");
  const auto idx = order_by_score(scores, true);
  const double total_pos = std::accumulate(labels.begin(), labels.end(), 0.0);
  double tp = 0.0, fp = 0.0, recall = 0.0, area = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? tp : fp) += 1.0;
      ++j;
    }
    const double r = tp / total_pos;
    area += (r - recall) * tp / (tp + fp);
    recall = r;
    i = j;
  }
  return area;
}

double bacc(std::span<const int> predictions, std::span<const int> labels) {
  check_labels(labels, predictions.size(), true, "bacc");
  double tp = 0.0, tn = 0.0, pos = 0.0, neg = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      pos += 1.0;
      tp += predictions[i] ? 1.0 : 0.0;
    } else {
      neg += 1.0;
      tn += predictions[i] ? 0.0 : 1.0;
    }
  }
  return 0.5 * (tp / pos + tn / neg);
}

double best_threshold(std::span<const double> scores, std::span<const int> labels) {
  check_labels(labels, scores.size(), true, "best_threshold");
  std::vector<double> candidates(scores.begin(), scores.end());
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  double best = candidates.front(), best_bacc = -1.0;
  std::vector<int> pred(scores.size());
  for (double thr : candidates) {
    for (std::size_t i = 0; i < scores.size(); ++i) pred[i] = scores[i] >= thr ? 1 : 0;
    const double b = bacc(pred, labels);
    if (b > best_bacc) {
      best_bacc = b;
      best = thr;
    }
  }
  return best;
}

// ---- probing ----

std::vector<ProbeSample> build_probe_set(const trainer::Model& model, const synthvol::VisitSource& source,
                                         const ProbeConfig& cfg) {
  cfg.validate();
  check_compatible(model, cfg);
  std::mt19937_64 latent_rng(derive_seed(cfg.seed, "probe-latent"));
  std::vector<ProbeSample> out;
  for (std::size_t p = 0; p < source.patient_count(); ++p) {
    const auto visits = source.visits(p);
    const double tau = source.conversion_time(p);
    std::vector<synthvol::Volume> volumes;
    std::vector<double> times;
    for (std::size_t v = 0; v < visits.size(); ++v) {
      const double t = visits[v];
      const double k = t / cfg.visit_stride;
      if (std::abs(k - std::round(k)) > 1e-9 || t >= tau) continue;
      volumes.push_back(source.volume(p, v));
      times.push_back(t);
    }
    if (volumes.empty()) continue;
    auto feats = infer_features(model, volumes, cfg.prompt_dt, cfg, &latent_rng);
    for (std::size_t i = 0; i < feats.size(); ++i) {
      ProbeSample s;
      s.patient_id = source.patient_id(p);
      s.t = times[i];
      s.label = synthvol::conversion_label(tau, times[i], cfg.window) ? 1 : 0;
      s.tokens = std::move(feats[i]);
      out.push_back(std::move(s));
    }
  }
  check(!out.empty(), ErrorKind::Data, "probe set is empty (no pre-conversion visits on the stride grid)");
  return out;
}

std::vector<FoldSplit> patient_folds(std::vector<std::int64_t> patients, int folds, std::uint64_t seed) {
  check(folds >= 3, ErrorKind::Config, "patient_folds needs at least 3 folds");
  std::sort(patients.begin(), patients.end());
  patients.erase(std::unique(patients.begin(), patients.end()), patients.end());
  check(patients.size() >= static_cast<std::size_t>(folds), ErrorKind::Split, "fewer patients than folds");
  std::mt19937_64 rng(derive_seed(seed, "folds"));
  std::shuffle(patients.begin(), patients.end(), rng);
  std::vector<std::vector<std::int64_t>> groups(static_cast<std::size_t>(folds));
  for (std::size_t i = 0; i < patients.size(); ++i) groups[i % static_cast<std::size_t>(folds)].push_back(patients[i]);
  std::vector<FoldSplit> out;
  for (int k = 0; k < folds; ++k) {
    FoldSplit s;
    s.test = groups[static_cast<std::size_t>(k)];
    s.validation = groups[static_cast<std::size_t>((k + 1) % folds)];
    for (int g = 0; g < folds; ++g)
      if (g != k && g != (k + 1) % folds)
        s.train.insert(s.train.end(), groups[static_cast<std::size_t>(g)].begin(),
                       groups[static_cast<std::size_t>(g)].end());
    out.push_back(std::move(s));
  }
  return out;
}

void check_no_leakage(const FoldSplit& split) {
  std::set<std::int64_t> seen;
  for (const auto* part : {&split.train, &split.validation, &split.test})
    for (std::int64_t id : *part)
      check(seen.insert(id).second, ErrorKind::Split,
            "patient " + std::to_string(id) + " appears in more than one split role");
}

namespace {

struct Stacked {
  Matrix tokens;
  std::vector<int> labels;
  int groups = 0;
};

Stacked stack(std::span<const ProbeSample> samples, const std::vector<std::int64_t>& ids) {
  const std::set<std::int64_t> wanted(ids.begin(), ids.end());
  std::vector<const ProbeSample*> picked;
  for (const auto& s : samples)
    if (wanted.count(s.patient_id)) picked.push_back(&s);
  Stacked out;
  out.groups = static_cast<int>(picked.size());
  if (picked.empty()) return out;
  const Eigen::Index len = picked[0]->tokens.rows();
  out.tokens.resize(len * out.groups, picked[0]->tokens.cols());
  for (int g = 0; g < out.groups; ++g) {
    check(picked[static_cast<std::size_t>(g)]->tokens.rows() == len, ErrorKind::Shape,
          "probe samples differ in token count");
    out.tokens.middleRows(static_cast<Eigen::Index>(g) * len, len) = picked[static_cast<std::size_t>(g)]->tokens;
    out.labels.push_back(picked[static_cast<std::size_t>(g)]->label);
  }
  return out;
}

ProbeHead train_head(const Stacked& train, Pool pool, double lr, int epochs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ProbeHead head = ProbeHead::create(pool, static_cast<int>(train.tokens.cols()), rng);
  trainer::AdamW opt(head.params, lr, 0.0, 0.9, 0.999, 1e-8);
  Matrix onehot = Matrix::Zero(train.groups, 2);
  for (int g = 0; g < train.groups; ++g) onehot(g, train.labels[static_cast<std::size_t>(g)]) = 1.0;
  const Var targets = ad::constant(onehot);
  const Var tokens = ad::constant(train.tokens);
  for (int e = 0; e < epochs; ++e) {
    head.params.zero_grad();
    Var logp = ad::log(ad::softmax_rows(head.logits(tokens, train.groups)));
    Var loss = ad::scale(ad::sum(ad::mul(targets, logp)), -1.0 / train.groups);
    check(std::isfinite(loss.item()), ErrorKind::Numeric, "probe loss is not finite");
    ad::backward(loss);
    opt.step(head.params);
  }
  return head;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }
double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

EvalReport run_probe(const trainer::Model& model, std::span<const ProbeSample> samples, const ProbeConfig& cfg) {
  cfg.validate();
  const std::uint64_t before = model.params.digest();
  std::vector<std::int64_t> ids;
  for (const auto& s : samples) ids.push_back(s.patient_id);
  const auto splits = patient_folds(ids, cfg.folds, cfg.seed);

  EvalReport report;
  double positives = 0.0;
  for (const auto& s : samples) positives += s.label;
  report.positive_ratio = positives / static_cast<double>(samples.size());

  for (std::size_t k = 0; k < splits.size(); ++k) {
    check_no_leakage(splits[k]);
    const Stacked train = stack(samples, splits[k].train);
    const Stacked val = stack(samples, splits[k].validation);
    const Stacked test = stack(samples, splits[k].test);
    check(train.groups > 0 && val.groups > 0 && test.groups > 0, ErrorKind::Split,
          "fold " + std::to_string(k) + " has an empty split");

    double best_auc = -1.0;
    std::optional<ProbeHead> best;
    FoldResult fr;
    fr.fold = static_cast<int>(k);
    for (std::size_t i = 0; i < cfg.lr_grid.size(); ++i) {
      ProbeHead head = train_head(train, cfg.pool, cfg.lr_grid[i], cfg.epochs,
                                  derive_seed(cfg.seed, "probe-init", k * 1000 + i));
      const auto scores = predict(head, val.tokens, val.groups);
      const double a = auroc(scores, val.labels);
      if (a > best_auc) {
        best_auc = a;
        fr.lr = cfg.lr_grid[i];
        fr.threshold = best_threshold(scores, val.labels);
        best = std::move(head);
      }
    }
    const auto scores = predict(*best, test.tokens, test.groups);
    std::vector<int> pred(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) pred[i] = scores[i] >= fr.threshold ? 1 : 0;
    fr.auroc = auroc(scores, test.labels);
    fr.prauc = prauc(scores, test.labels);
    fr.bacc = bacc(pred, test.labels);
    fr.test_size = test.labels.size();
    fr.positive_ratio = std::accumulate(test.labels.begin(), test.labels.end(), 0.0) / test.labels.size();
    report.folds.push_back(fr);
  }
  check(model.params.digest() == before, ErrorKind::Usage, "backbone parameters changed during probing");

  std::vector<double> a, p, b;
  for (const auto& f : report.folds) {
    a.push_back(f.auroc);
    p.push_back(f.prauc);
    b.push_back(f.bacc);
  }
  report.auroc_mean = mean_of(a);
  report.auroc_sd = sd_of(a);
  report.prauc_mean = mean_of(p);
  report.prauc_sd = sd_of(p);
  report.bacc_mean = mean_of(b);
  report.bacc_sd = sd_of(b);
  return report;
}

EvalReport run_probe(const trainer::Model& model, const synthvol::VisitSource& source, const ProbeConfig& cfg) {
  const auto samples = build_probe_set(model, source, cfg);
  return run_probe(model, samples, cfg);
}

std::string report_csv(const EvalReport& report, std::span<const std::string> header_lines) {
  std::ostringstream out;
  for (const auto& line : header_lines) out << "# " << line << '\n';
  char buf[200];
  std::snprintf(buf, sizeof buf, "# positive_ratio=%.6f\n# sd auroc=%.6f prauc=%.6f bacc=%.6f\n",
                report.positive_ratio, report.auroc_sd, report.prauc_sd, report.bacc_sd);
  out << buf << "fold,auroc,prauc,bacc\n";
  for (const auto& f : report.folds) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f\n", f.fold, f.auroc, f.prauc, f.bacc);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "mean,%.6f,%.6f,%.6f\n", report.auroc_mean, report.prauc_mean, report.bacc_mean);
  out << buf;
  return out.str();
}

}  // namespace stamp::eval
