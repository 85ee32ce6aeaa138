#pragma once

// Frozen-backbone evaluation: time-prompted features, pooling probes,
// patient-level folds and ranking metrics.

#include "stamp/trainer.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace stamp::eval {

using ad::Matrix;
using ad::Var;

enum class Pool { Attention, MeanLinear };
const char* to_string(Pool pool);
Pool parse_pool(const std::string& text);

struct ProbeConfig {
  Pool pool = Pool::Attention;
  bool use_te = true;
  bool use_se = true;
  double prompt_dt = 6.0;     // months
  double window = 6.0;        // conversion within this many months
  double visit_stride = 3.0;  // probe visits every this many months
  int epochs = 200;
  std::vector<double> lr_grid = {1e-3, 3e-3, 1e-2};
  int folds = 4;
  int latent_samples = 0;  // 0: prior probability vector, k > 0: mean of k one-hot draws
  std::uint64_t seed = 0;

  void validate() const;
};

/// Rejects TE/SE at inference when the checkpoint lacks those modules.
void check_compatible(const trainer::Model& model, const ProbeConfig& cfg);

/// Token set for pooling: [z, CLS, patches] with the latent, [CLS, patches]
/// without it. One (N+2 or N+1) × dim matrix per volume.
std::vector<Matrix> infer_features(const trainer::Model& model, std::span<const synthvol::Volume> volumes,
                                   double delta_t, const ProbeConfig& cfg, std::mt19937_64* latent_rng = nullptr);
Matrix infer_features(const trainer::Model& model, const synthvol::Volume& volume, double delta_t,
                      const ProbeConfig& cfg);

/// Learnable query attending once over the tokens; no MLP, no activation.
struct AttentionPool {
  Var query;  // 1 × dim
  nn::MultiHeadAttention attn;  // single head

  static AttentionPool create(nn::ParameterSet& params, int dim, std::mt19937_64& rng);
  /// `tokens` stacks `groups` equal-length sets; returns groups × dim.
  Var operator()(const Var& tokens, int groups) const;
};

struct ProbeHead {
  nn::ParameterSet params;
  Pool pool = Pool::Attention;
  AttentionPool attention;
  nn::Linear classifier;  // dim → 2 logits

  static ProbeHead create(Pool pool, int dim, std::mt19937_64& rng);
  /// groups × 2 logits.
  Var logits(const Var& tokens, int groups) const;
};

/// Scores P(class 1) for each stacked token set.
std::vector<double> predict(const ProbeHead& head, const Matrix& stacked_tokens, int groups);

// ---- metrics ----
double auroc(std::span<const double> scores, std::span<const int> labels);
double prauc(std::span<const double> scores, std::span<const int> labels);
double bacc(std::span<const int> predictions, std::span<const int> labels);
/// Threshold maximizing BACC of (score >= threshold); ties resolve to the lowest threshold.
double best_threshold(std::span<const double> scores, std::span<const int> labels);

// ---- probing ----
struct ProbeSample {
  std::int64_t patient_id = 0;
  double t = 0.0;
  int label = 0;
  Matrix tokens;
};

/// Pre-conversion visits on the stride grid, labelled by conversion within the window.
std::vector<ProbeSample> build_probe_set(const trainer::Model& model, const synthvol::VisitSource& source,
                                         const ProbeConfig& cfg);

struct FoldResult {
  int fold = 0;
  double auroc = 0.0;
  double prauc = 0.0;
  double bacc = 0.0;
  double lr = 0.0;
  double threshold = 0.5;
  double positive_ratio = 0.0;
  std::size_t test_size = 0;
};

struct EvalReport {
  std::vector<FoldResult> folds;
  double auroc_mean = 0.0, auroc_sd = 0.0;
  double prauc_mean = 0.0, prauc_sd = 0.0;
  double bacc_mean = 0.0, bacc_sd = 0.0;
  double positive_ratio = 0.0;
};

struct FoldSplit {
  std::vector<std::int64_t> train, validation, test;
};
/// Patient-level folds: fold k tests on group k, validates on group k+1 and
/// trains on the rest.
std::vector<FoldSplit> patient_folds(std::vector<std::int64_t> patients, int folds, std::uint64_t seed);
/// Throws a split error when a patient appears in more than one role.
void check_no_leakage(const FoldSplit& split);

/// Trains only pool and classifier parameters; the backbone stays frozen.
EvalReport run_probe(const trainer::Model& model, std::span<const ProbeSample> samples, const ProbeConfig& cfg);
EvalReport run_probe(const trainer::Model& model, const synthvol::VisitSource& source, const ProbeConfig& cfg);

std::string report_csv(const EvalReport& report, std::span<const std::string> header_lines);

}  // namespace stamp::eval
