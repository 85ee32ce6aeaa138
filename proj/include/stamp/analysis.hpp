#pragma once

// Prior-sample PCA sweeps across Δt, rank correlation, and the analytic
// parameter/FLOP model.

#include "stamp/trainer.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stamp::analysis {

using ad::Matrix;
using ad::RowVector;

struct Pca2 {
  Matrix projections;   // n × 2
  Matrix axes;          // d × 2, unit columns
  RowVector mean;       // 1 × d
  double explained[2] = {0.0, 0.0};
};

/// Projection of mean-centred rows onto the top two covariance eigenvectors.
/// Each axis is signed so that its largest-magnitude entry is positive.
Pca2 pca2(const Matrix& vectors);

/// Spearman rank correlation (average ranks for ties).
double spearman(std::span<const double> x, std::span<const double> y);

struct SweepRow {
  double delta_t = 0.0;
  int sample = 0;
  RowVector latent;
  double pc1 = 0.0;
  double pc2 = 0.0;
};

struct Sweep {
  std::vector<SweepRow> rows;
  Pca2 pca;

  std::vector<double> delta_ts() const;
  /// Mean pc1 of the draws at each Δt, in Δt-list order.
  std::vector<double> mean_pc1() const;
  /// Per-Δt variance of the draws, summed over latent coordinates.
  std::vector<double> dispersion() const;
};

/// k straight-through prior draws per Δt from one volume, projected jointly.
/// Draw s uses the same random stream at every Δt.
Sweep sample_prior_sweep(const trainer::Model& model, const synthvol::Volume& volume,
                         std::span<const double> delta_ts, int k, std::mt19937_64& rng);

std::string sweep_csv(const Sweep& sweep, std::span<const std::string> header_lines);

// ---- cost model ----

struct Cost {
  std::int64_t params = 0;
  double flops = 0.0;  // forward pass of one pretraining iteration at batch 1, 2 FLOPs per MAC
};

/// Exact learnable-parameter count and matmul FLOPs of the architecture a
/// training config describes.
Cost count_cost(const trainer::TrainConfig& cfg);

/// Named architectures: {mae,siammae,stamp}-{paper,desk}.
std::vector<std::string> arch_names();
trainer::TrainConfig arch_preset(std::string_view name);

/// Aligned text table: model, GFLOP, params (M).
std::string cost_report(std::span<const std::string> names);

}  // namespace stamp::analysis
