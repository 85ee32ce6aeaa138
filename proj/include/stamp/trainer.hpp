#pragma once

// Pretraining objective, AdamW, augmentation, the epoch loop and checkpoints.

#include "stamp/backbone.hpp"
#include "stamp/decoder.hpp"
#include "stamp/latentvar.hpp"
#include "stamp/rng.hpp"
#include "stamp/synthvol.hpp"
#include "stamp/temporal.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace stamp::trainer {

using ad::Matrix;
using ad::Var;
using synthvol::PairSample;
using synthvol::Volume;

enum class Mode { Stamp, SiamMae, Mae };
const char* to_string(Mode mode);
Mode parse_mode(const std::string& text);

struct AugmentFlags {
  bool flip = true;
  bool jitter = true;
  bool crop = true;
  bool joint_flip = false;  // one flip decision for both visits
  double jitter_brightness = 0.1;
  double jitter_contrast = 0.1;
  double crop_max = 0.125;  // fraction of each axis
};

struct TrainConfig {
  Mode mode = Mode::Stamp;
  bool use_te = true;
  bool use_se = true;
  double beta = 1.0;
  double mask_ratio = 0.75;
  double dt_min = 3.0;
  double dt_max = 18.0;
  int epochs = 60;
  int batch_size = 16;
  int pairs_per_patient = 1;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
  AugmentFlags augment;
  backbone::EncoderConfig encoder;
  decoder::DecoderConfig decoder;
  latentvar::LatentConfig latent;

  /// Throws a configuration error for invalid values or mode combinations.
  void validate() const;
};

/// Sets use_te/use_se/decoder kind to what a mode implies (STAMP keeps the
/// caller's TE/SE choice).
TrainConfig with_mode(TrainConfig cfg, Mode mode);

/// All learnable modules of one pretraining mode.
struct Model {
  TrainConfig cfg;
  nn::ParameterSet params;
  backbone::Encoder encoder;
  std::optional<temporal::TemporalEncoder> te_encoder;
  std::optional<temporal::TemporalEncoder> te_decoder;
  std::optional<latentvar::LatentHeads> latent;
  decoder::Decoder decoder;

  static std::unique_ptr<Model> create(const TrainConfig& cfg, std::mt19937_64& init_rng);
};

struct StepLosses {
  double recon = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

struct ForwardResult {
  Var recon;
  Var kl;  // undefined when the latent is absent
  Var total;
  Var prediction;
  std::vector<tokenizer::MaskSet> masks;
  std::vector<tokenizer::TokenGrid> targets;
};

/// Builds the objective for a batch of pairs; masks come from `mask_rng` and
/// latent draws from `latent_rng`.
ForwardResult forward(const Model& model, std::span<const PairSample> batch, std::mt19937_64& mask_rng,
                      std::mt19937_64& latent_rng);

/// Decoupled-weight-decay Adam. Parameters and moments are rounded to 32-bit
/// floats after each update so that a checkpoint captures the state exactly.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const nn::ParameterSet& params, double lr, double weight_decay, double beta1, double beta2, double eps);

  void step(nn::ParameterSet& params);
  std::uint64_t steps() const { return step_; }

  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }
  void set_steps(std::uint64_t s) { step_ = s; }

 private:
  double lr_ = 0.0, wd_ = 0.0, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::uint64_t step_ = 0;
  std::vector<Matrix> m_, v_;
};

/// Forward, backward and one optimizer update. Throws a numeric error naming
/// the step when any loss or gradient is not finite; parameters are left
/// untouched in that case.
StepLosses training_step(Model& model, AdamW& opt, std::span<const PairSample> batch, RngStreams& rng);

/// Random flip / jitter / crop-resize of a pair.
struct ForcedAugment {
  std::optional<bool> flip_past;
  std::optional<bool> flip_future;
};
PairSample augment(const PairSample& pair, const AugmentFlags& flags, std::mt19937_64& rng,
                   const ForcedAugment& forced = {});
Volume flip_w(const Volume& v);

/// Draws one training pair per (patient, repeat) with Δt in range, visiting
/// patients in a shuffled order.
std::vector<PairSample> sample_epoch_pairs(const synthvol::VisitSource& source, const TrainConfig& cfg,
                                           std::mt19937_64& rng);

struct EpochMetrics {
  int epoch = 0;
  double recon = 0.0;
  double kl = 0.0;
  double total = 0.0;
  double wall_ms = 0.0;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::string config_text;
  std::uint64_t epoch = 0;
  std::string rng_state;
  struct Tensor {
    std::string name;
    bool decay = true;
    Matrix value;
  };
  std::vector<Tensor> params;
  std::uint64_t optimizer_steps = 0;
  std::vector<Matrix> first_moments;
  std::vector<Matrix> second_moments;
};

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint snapshot(const Model& model, const AdamW& opt, const RngStreams& rng, std::uint64_t epoch);
/// Rebuilds the model (and optimizer) from a checkpoint.
struct Restored {
  std::unique_ptr<Model> model;
  AdamW optimizer;
  RngStreams rng;
  std::uint64_t epoch = 0;
};
Restored restore(const Checkpoint& ckpt);

struct PretrainOptions {
  std::filesystem::path checkpoint_path;  // empty: keep in memory only
  std::filesystem::path metrics_path;     // empty: no CSV
  std::vector<std::string> header_lines;  // written as `# ...` before the CSV header
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct PretrainResult {
  std::unique_ptr<Model> model;
  AdamW optimizer;
  RngStreams rng;
  std::vector<EpochMetrics> metrics;
  Checkpoint checkpoint;
};

PretrainResult run_pretrain(const TrainConfig& cfg, const synthvol::VisitSource& source,
                            const PretrainOptions& options = {});

std::string metrics_csv(std::span<const EpochMetrics> metrics, std::span<const std::string> header_lines);

/// Trailing moving average with the given window (shorter at the start).
std::vector<double> smooth(std::span<const double> values, int window);

}  // namespace stamp::trainer
