#include "stamp/analysis.hpp"

#include "stamp/config.hpp"
#include "stamp/errors.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace stamp::analysis {

Pca2 pca2(const Matrix& vectors) {
  const Eigen::Index n = vectors.rows();
  const Eigen::Index d = vectors.cols();
  check(n >= 3, ErrorKind::Usage, "pca2 needs at least 3 vectors");
  check(d >= 1, ErrorKind::Usage, "pca2 needs non-empty vectors");
  Pca2 out;
  out.mean = vectors.colwise().mean();
  const Matrix centred = vectors.rowwise() - out.mean;
  const Matrix cov = centred.transpose() * centred / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  check(solver.info() == Eigen::Success, ErrorKind::Numeric, "pca2: eigendecomposition failed");
  const auto& values = solver.eigenvalues();  // ascending
  const double total = values.cwiseMax(0.0).sum();
  check(total > 0.0 && std::isfinite(total), ErrorKind::Data, "pca2: degenerate input (all vectors equal)");
  out.axes = Matrix::Zero(d, 2);
  for (int c = 0; c < 2 && c < d; ++c) {
    Eigen::VectorXd axis = solver.eigenvectors().col(d - 1 - c);
    Eigen::Index arg = 0;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0.0) axis = -axis;
    out.axes.col(c) = axis;
    out.explained[c] = std::max(values(d - 1 - c), 0.0) / total;
  }
  out.projections = centred * out.axes;
  return out;
}

namespace {

std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && x[idx[j]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j - 1) + 1.0;
    for (std::size_t k = i; k < j; ++k) r[idx[k]] = avg;
    i = j;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  check(x.size() == y.size() && x.size() >= 2, ErrorKind::Usage, "spearman needs two equal-length series (n >= 2)");
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  check(sxx > 0.0 && syy > 0.0, ErrorKind::Metric, "spearman undefined for a constant series");
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> Sweep::delta_ts() const {
  std::vector<double> out;
  for (const auto& r : rows)
    if (out.empty() || out.back() != r.delta_t) out.push_back(r.delta_t);
  return out;
}

std::vector<double> Sweep::mean_pc1() const {
  std::vector<double> out;
  std::size_t i = 0;
  while (i < rows.size()) {
    std::size_t j = i;
    double acc = 0.0;
    while (j < rows.size() && rows[j].delta_t == rows[i].delta_t) acc += rows[j++].pc1;
    out.push_back(acc / static_cast<double>(j - i));
    i = j;
  }
  return out;
}

std::vector<double> Sweep::dispersion() const {
  std::vector<double> out;
  std::size_t i = 0;
  while (i < rows.size()) {
    std::size_t j = i;
    while (j < rows.size() && rows[j].delta_t == rows[i].delta_t) ++j;
    RowVector mean = RowVector::Zero(rows[i].latent.cols());
    for (std::size_t k = i; k < j; ++k) mean += rows[k].latent;
    mean /= static_cast<double>(j - i);
    double var = 0.0;
    for (std::size_t k = i; k < j; ++k) var += (rows[k].latent - mean).squaredNorm();
    out.push_back(j - i > 1 ? var / static_cast<double>(j - i - 1) : 0.0);
    i = j;
  }
  return out;
}

Sweep sample_prior_sweep(const trainer::Model& model, const synthvol::Volume& volume,
                         std::span<const double> delta_ts, int k, std::mt19937_64& rng) {
  check(model.latent.has_value(), ErrorKind::Config,
        std::string("prior sweep needs a checkpoint with latent heads (this one is ") +
            trainer::to_string(model.cfg.mode) + ")");
  check(k > 0 && !delta_ts.empty(), ErrorKind::Usage, "prior sweep needs k > 0 and at least one delta-t");
  ad::NoGradGuard no_grad;
  const tokenizer::TokenGrid grids[] = {tokenizer::patchify(volume, model.cfg.encoder.patch)};
  // Sample s reuses the same uniforms at every Δt, so differences between Δt
  // come from the prior rather than from independent sampling noise.
  std::vector<std::uint64_t> draw_seeds(static_cast<std::size_t>(k));
  for (auto& seed : draw_seeds) seed = rng();
  Sweep sweep;
  for (double dt : delta_ts) {
    std::optional<ad::Var> te;
    if (model.te_encoder) te = (*model.te_encoder)(dt);
    const auto h = model.encoder.encode(grids, backbone::EmbeddingSource::PastFull, {}, te ? &*te : nullptr);
    const auto prior = latentvar::prior_logits(*model.latent, h.cls());
    for (int s = 0; s < k; ++s) {
      SweepRow row;
      row.delta_t = dt;
      row.sample = s;
      std::mt19937_64 draw(draw_seeds[static_cast<std::size_t>(s)]);
      row.latent = latentvar::st_sample(prior, draw).value();
      sweep.rows.push_back(std::move(row));
    }
  }
  Matrix all(static_cast<Eigen::Index>(sweep.rows.size()), sweep.rows[0].latent.cols());
  for (std::size_t i = 0; i < sweep.rows.size(); ++i) all.row(static_cast<Eigen::Index>(i)) = sweep.rows[i].latent;
  if (sweep.rows.size() >= 3 && (all.rowwise() - all.row(0)).cwiseAbs().maxCoeff() > 0.0) {
    sweep.pca = pca2(all);
    for (std::size_t i = 0; i < sweep.rows.size(); ++i) {
      sweep.rows[i].pc1 = sweep.pca.projections(static_cast<Eigen::Index>(i), 0);
      sweep.rows[i].pc2 = sweep.pca.projections(static_cast<Eigen::Index>(i), 1);
    }
  }
  return sweep;
}

std::string sweep_csv(const Sweep& sweep, std::span<const std::string> header_lines) {
  std::ostringstream out;
  for (const auto& line : header_lines) out << "# " << line << '\n';
  char buf[160];
  std::snprintf(buf, sizeof buf, "# explained_variance=%.6f,%.6f\n", sweep.pca.explained[0], sweep.pca.explained[1]);
  out << buf << "delta_t,sample_idx,pc1,pc2\n";
  for (const auto& r : sweep.rows) {
    std::snprintf(buf, sizeof buf, "%.6g,%d,%.9g,%.9g\n", r.delta_t, r.sample, r.pc1, r.pc2);
    out << buf;
  }
  return out.str();
}

// ---- cost model ----

namespace {

std::int64_t linear_params(std::int64_t in, std::int64_t out) { return in * out + out; }
std::int64_t norm_params(std::int64_t d) { return 2 * d; }
std::int64_t mlp2_params(std::int64_t in, std::int64_t hidden, std::int64_t out) {
  return linear_params(in, hidden) + linear_params(hidden, out);
}
std::int64_t attn_params(std::int64_t d) { return 4 * linear_params(d, d); }

// Multiply-accumulates of a dense layer applied to `rows` tokens.
double macs(double rows, double in, double out) { return rows * in * out; }

double encoder_macs(double tokens, double d, double r, double depth) {
  const double proj = macs(tokens, d, 4 * d) + macs(tokens, d, 2 * r * d);
  const double scores = 2.0 * tokens * tokens * d;  // QKᵀ and AV
  return depth * (proj + scores);
}

}  // namespace

Cost count_cost(const trainer::TrainConfig& cfg) {
  try {
    cfg.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Config, std::string("cost model: incomplete or invalid architecture: ") + e.what());
  }
  const auto& enc = cfg.encoder;
  const auto& dec = cfg.decoder;
  const std::int64_t d = enc.embed_dim;
  const std::int64_t dd = dec.embed_dim;
  const std::int64_t p = static_cast<std::int64_t>(enc.patch.voxel_count());
  const std::int64_t n = enc.token_count();
  const std::int64_t k = tokenizer::mask_count(static_cast<int>(n), cfg.mask_ratio);
  const std::int64_t v = n - k;
  const std::int64_t h = cfg.latent.hidden;
  const std::int64_t width = cfg.latent.width();

  Cost c;
  // Encoder.
  c.params += linear_params(p, d) + d;  // patch projection, CLS
  c.params += enc.depth * (2 * norm_params(d) + attn_params(d) + mlp2_params(d, enc.mlp_ratio * d, d));
  if (enc.final_norm) c.params += norm_params(d);
  if (cfg.use_te) c.params += 2 * mlp2_params(d, d, d);
  if (cfg.use_se) c.params += mlp2_params(d, h, width) + mlp2_params(2 * d, h, width);
  // Decoder.
  c.params += linear_params(d, dd) + dd;  // input projection, MASK token
  std::int64_t block = norm_params(dd) + attn_params(dd) + norm_params(dd) + mlp2_params(dd, dec.mlp_ratio * dd, dd);
  if (dec.cross_attention) block += 2 * norm_params(dd) + attn_params(dd);
  c.params += dec.depth * block + norm_params(dd) + linear_params(dd, p);

  const double D = static_cast<double>(d), DD = static_cast<double>(dd), P = static_cast<double>(p);
  const double N = static_cast<double>(n), V = static_cast<double>(v);
  double m = 0.0;
  // Future (or single) branch: visible tokens plus CLS.
  m += macs(V, P, D) + encoder_macs(V + 1, D, enc.mlp_ratio, enc.depth);
  const double queries = N;
  const double decoder_in = V;
  double memory = 0.0;
  if (cfg.mode != trainer::Mode::Mae) {
    m += macs(N, P, D) + encoder_macs(N + 1, D, enc.mlp_ratio, enc.depth);
    memory = N + 1 + (cfg.use_se ? 1 : 0);
    if (cfg.use_te) m += 2 * (macs(1, D, D) + macs(1, D, D));
    if (cfg.use_se) m += macs(1, D, h) + macs(1, h, width) + macs(1, 2 * D, h) + macs(1, h, width);
  }
  m += macs(decoder_in + memory, D, DD);
  for (int b = 0; b < dec.depth; ++b) {
    if (dec.cross_attention) {
      m += macs(queries, DD, 2 * DD) + macs(memory, DD, 2 * DD);  // q, out / k, v
      m += 2.0 * queries * memory * DD;
    }
    m += macs(queries, DD, 4 * DD) + 2.0 * queries * queries * DD;
    m += macs(queries, DD, 2.0 * dec.mlp_ratio * DD);
  }
  m += macs(queries, DD, P);
  c.flops = 2.0 * m;
  return c;
}

std::vector<std::string> arch_names() {
  return {"mae-paper", "siammae-paper", "stamp-paper", "mae-desk", "siammae-desk", "stamp-desk"};
}

trainer::TrainConfig arch_preset(std::string_view name) {
  const auto dash = name.find('-');
  check(dash != std::string_view::npos, ErrorKind::Config, "unknown architecture '" + std::string(name) + "'");
  const std::string mode(name.substr(0, dash));
  const std::string scale(name.substr(dash + 1));
  check((mode == "mae" || mode == "siammae" || mode == "stamp") && (scale == "paper" || scale == "desk"),
        ErrorKind::Config,
        "unknown architecture '" + std::string(name) + "' (expected {mae,siammae,stamp}-{paper,desk})");
  auto cfg = config::profile_defaults(scale).train;
  cfg = trainer::with_mode(cfg, trainer::parse_mode(mode));
  if (mode == "stamp") cfg.use_te = cfg.use_se = true;
  // The single-volume baseline keeps the standard 8-block self-attention decoder.
  if (mode == "mae" && scale == "paper") cfg.decoder.depth = 8;
  return cfg;
}

std::string cost_report(std::span<const std::string> names) {
  std::ostringstream out;
  out << "# forward FLOPs of one pretraining iteration at batch 1 (2 FLOPs per multiply-accumulate)\n";
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-16s %12s %18s\n", "Model", "GFLOP", "# of Params (M)");
  out << buf;
  for (const auto& name : names) {
    const Cost c = count_cost(arch_preset(name));
    std::snprintf(buf, sizeof buf, "%-16s %12.3f %18.3f\n", name.c_str(), c.flops / 1e9,
                  static_cast<double>(c.params) / 1e6);
    out << buf;
  }
  return out.str();
}

}  // namespace stamp::analysis
