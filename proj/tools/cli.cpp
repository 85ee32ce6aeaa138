#include "stamp/cli.hpp"

#include "stamp/analysis.hpp"
#include "stamp/config.hpp"
#include "stamp/eval.hpp"
#include "stamp/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace stamp::cli {

namespace fs = std::filesystem;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Parse:
    case ErrorKind::Usage:
      return kConfig;
    case ErrorKind::Data:
    case ErrorKind::Format:
    case ErrorKind::Shape:
    case ErrorKind::Sampling:
    case ErrorKind::Split:
    case ErrorKind::Metric:
      return kData;
    case ErrorKind::Checkpoint:
      return kCheckpoint;
    case ErrorKind::Numeric:
      return kNumeric;
  }
  return kInternal;
}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  check(static_cast<bool>(in), ErrorKind::Data, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  check(static_cast<bool>(out), ErrorKind::Data, "cannot write " + path.string());
  out << text;
  check(static_cast<bool>(out), ErrorKind::Data, "failed writing " + path.string());
}

config::RunConfig load_config(const std::string& path) {
  if (path.empty()) return config::profile_defaults("desk");
  try {
    return config::parse_config(read_text(path));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Data) throw;
    throw Error(e.kind(), path + ": " + e.what());
  }
}

std::vector<std::string> header(const config::RunConfig& cfg) {
  std::vector<std::string> lines = {kToolVersion};
  char digest[64];
  std::snprintf(digest, sizeof digest, "config_digest=%016llx",
                static_cast<unsigned long long>(config::config_digest(cfg)));
  lines.emplace_back(digest);
  std::istringstream echo(config::emit_config(cfg));
  std::string line;
  while (std::getline(echo, line))
    if (!line.empty()) lines.push_back("config " + line);
  return lines;
}

fs::path manifest_in(const fs::path& dir, const char* split) {
  const fs::path nested = dir / split / "manifest.csv";
  if (fs::exists(nested)) return nested;
  const fs::path flat = dir / "manifest.csv";
  check(fs::exists(flat), ErrorKind::Data, "no manifest found under " + dir.string() + " (looked for " +
                                               nested.string() + " and " + flat.string() + ")");
  return flat;
}

trainer::Restored open_checkpoint(const std::string& path) {
  return trainer::restore(trainer::load_checkpoint(path));
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      check(used == item.size(), ErrorKind::Usage, "");
    } catch (const std::exception&) {
      fail(ErrorKind::Usage, "--dts: '" + item + "' is not a number");
    }
  }
  check(!out.empty(), ErrorKind::Usage, "--dts: empty list");
  return out;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Siamese masked autoencoding with a time-conditioned stochastic latent"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::string config_path, out_path, data_dir, ckpt_path, volume_path, dts_text, arch, metrics_path;
  std::optional<std::uint64_t> seed;
  double dt = 6.0;
  int k = 20;
  bool use_te = false, use_se = false;

  auto* gen = app.add_subcommand("synth-gen", "Generate a synthetic longitudinal cohort");
  gen->add_option("--config", config_path, "Run configuration");
  gen->add_option("--out", out_path, "Output directory")->required();
  gen->add_option("--seed", seed, "Data seed (overrides the config)");

  auto* pre = app.add_subcommand("pretrain", "Pretrain the encoder");
  pre->add_option("--config", config_path, "Run configuration");
  pre->add_option("--data", data_dir, "Cohort directory")->required();
  pre->add_option("--out", out_path, "Checkpoint path")->required();
  pre->add_option("--metrics", metrics_path, "Metrics CSV (default: <out>.metrics.csv)");
  pre->add_option("--seed", seed, "Training seed (overrides the config)");

  auto* probe = app.add_subcommand("probe", "Frozen-backbone conversion probe");
  probe->add_option("--config", config_path, "Run configuration (probe section)");
  probe->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  probe->add_option("--data", data_dir, "Cohort directory")->required();
  probe->add_option("--dt", dt, "Prompt interval in months")->required();
  probe->add_flag("--use-te", use_te, "Add the temporal encoding at inference");
  probe->add_flag("--use-se", use_se, "Prepend the prior latent at inference");
  probe->add_option("--out", out_path, "Report CSV")->required();
  probe->add_option("--seed", seed, "Probe seed (overrides the config)");

  auto* prior = app.add_subcommand("sample-prior", "Prior samples across intervals, projected with PCA");
  prior->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  prior->add_option("--volume", volume_path, "SVOL volume")->required();
  prior->add_option("--dts", dts_text, "Comma-separated intervals in months")->required();
  prior->add_option("--k", k, "Samples per interval")->check(CLI::PositiveNumber);
  prior->add_option("--out", out_path, "Sweep CSV")->required();
  prior->add_option("--seed", seed, "Sampling seed");

  auto* attn = app.add_subcommand("attn-map", "CLS attention of the last encoder block as a volume");
  attn->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  attn->add_option("--volume", volume_path, "SVOL volume")->required();
  attn->add_option("--dt", dt, "Prompt interval in months")->required();
  attn->add_option("--out", out_path, "Output SVOL")->required();

  auto* cost = app.add_subcommand("count-cost", "Parameter and FLOP table");
  cost->add_option("--arch", arch, "Architecture name or 'all'")->required();
  cost->add_option("--out", out_path, "Report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (gen->parsed()) {
      auto cfg = load_config(config_path);
      if (seed) cfg.data_seed = *seed;
      const fs::path dir = out_path;
      synthvol::RenderedCohort pretrain(cfg.data, cfg.data_seed, static_cast<std::size_t>(cfg.pretrain_patients), 0);
      synthvol::write_cohort(pretrain, dir / "pretrain");
      if (cfg.probe_patients > 0) {
        synthvol::RenderedCohort held_out(cfg.data, cfg.data_seed, static_cast<std::size_t>(cfg.probe_patients),
                                          cfg.pretrain_patients);
        synthvol::write_cohort(held_out, dir / "probe");
      }
      write_text(dir / "config.txt", config::emit_config(cfg));
      out << "wrote " << cfg.pretrain_patients << " pretraining and " << cfg.probe_patients
          << " held-out patients to " << dir.string() << '\n';
    } else if (pre->parsed()) {
      auto cfg = load_config(config_path);
      if (seed) cfg.train.seed = *seed;
      synthvol::ManifestCohort cohort(manifest_in(data_dir, "pretrain"));
      check(cohort.dims() == cfg.train.encoder.volume, ErrorKind::Data,
            "cohort volumes do not match the configured volume shape");
      trainer::PretrainOptions opts;
      opts.checkpoint_path = out_path;
      opts.metrics_path = metrics_path.empty() ? out_path + ".metrics.csv" : metrics_path;
      opts.header_lines = header(cfg);
      opts.on_epoch = [&](const trainer::EpochMetrics& m) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "epoch %d recon %.6g kl %.6g total %.6g (%.0f ms)\n", m.epoch, m.recon, m.kl,
                      m.total, m.wall_ms);
        out << buf << std::flush;
      };
      if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
      write_text(out_path + ".config.txt", config::emit_config(cfg));
      trainer::run_pretrain(cfg.train, cohort, opts);
      out << "checkpoint written to " << out_path << '\n';
    } else if (probe->parsed()) {
      auto cfg = load_config(config_path);
      if (seed) cfg.probe.seed = *seed;
      auto restored = open_checkpoint(ckpt_path);
      cfg.train = restored.model->cfg;
      cfg.data.dims = cfg.train.encoder.volume;
      cfg.probe.prompt_dt = dt;
      cfg.probe.use_te = use_te;
      cfg.probe.use_se = use_se;
      cfg.probe.validate();
      eval::check_compatible(*restored.model, cfg.probe);
      synthvol::ManifestCohort cohort(manifest_in(data_dir, "probe"));
      const auto report = eval::run_probe(*restored.model, cohort, cfg.probe);
      write_text(out_path, eval::report_csv(report, header(cfg)));
      char buf[200];
      std::snprintf(buf, sizeof buf, "auroc %.4f ± %.4f  prauc %.4f ± %.4f  bacc %.4f ± %.4f (positives %.3f)\n",
                    report.auroc_mean, report.auroc_sd, report.prauc_mean, report.prauc_sd, report.bacc_mean,
                    report.bacc_sd, report.positive_ratio);
      out << buf;
    } else if (prior->parsed()) {
      auto restored = open_checkpoint(ckpt_path);
      const auto volume = synthvol::read_volume(volume_path);
      const auto dts = parse_list(dts_text);
      std::mt19937_64 rng(derive_seed(seed.value_or(0), "sweep"));
      const auto sweep = analysis::sample_prior_sweep(*restored.model, volume, dts, k, rng);
      config::RunConfig cfg = config::profile_defaults("desk");
      cfg.train = restored.model->cfg;
      cfg.data.dims = cfg.train.encoder.volume;
      auto lines = header(cfg);
      lines.push_back("dts=" + dts_text + " k=" + std::to_string(k));
      write_text(out_path, analysis::sweep_csv(sweep, lines));
      if (dts.size() >= 2) {
        const auto means = sweep.mean_pc1();
        try {
          char buf[96];
          std::snprintf(buf, sizeof buf, "spearman(delta_t, mean pc1) = %.4f\n", analysis::spearman(dts, means));
          out << buf;
        } catch (const Error&) {
          out << "spearman undefined (constant mean pc1)\n";
        }
      }
    } else if (attn->parsed()) {
      auto restored = open_checkpoint(ckpt_path);
      const auto& model = *restored.model;
      const auto volume = synthvol::read_volume(volume_path);
      check(volume.dims == model.cfg.encoder.volume, ErrorKind::Data, "volume shape does not match the checkpoint");
      const auto grid = tokenizer::patchify(volume, model.cfg.encoder.patch);
      std::optional<ad::Var> te;
      if (model.te_encoder) {
        ad::NoGradGuard no_grad;
        te = (*model.te_encoder)(dt);
      }
      const auto map = backbone::cls_attention_grid(model.encoder, grid, te ? &*te : nullptr);
      synthvol::write_volume(out_path, backbone::upsample_to_volume(map, grid.grid, grid.patch));
      out << "attention map written to " << out_path << '\n';
    } else if (cost->parsed()) {
      std::vector<std::string> names;
      if (arch == "all") names = analysis::arch_names();
      else names.push_back(arch);
      const std::string report = analysis::cost_report(names);
      if (!out_path.empty()) write_text(out_path, report);
      out << report;
    }
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error (data): " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternal;
  }
  return kOk;
}

}  // namespace stamp::cli
