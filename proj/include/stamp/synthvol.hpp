#pragma once

// Seeded synthetic longitudinal 3D volumes: a growing ellipsoidal lesion that,
// after a patient-specific conversion time, develops one of two outcomes.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace stamp::synthvol {

struct Dims3 {
  int d = 0;
  int h = 0;
  int w = 0;

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  bool operator==(const Dims3&) const = default;
};

struct Volume {
  Dims3 dims;
  std::vector<float> voxels;  // row-major over (d, h, w)

  static Volume zeros(Dims3 dims);
  std::size_t index(int d, int h, int w) const {
    return (static_cast<std::size_t>(d) * static_cast<std::size_t>(dims.h) + static_cast<std::size_t>(h)) *
               static_cast<std::size_t>(dims.w) +
           static_cast<std::size_t>(w);
  }
  float at(int d, int h, int w) const { return voxels[index(d, h, w)]; }
  float& at(int d, int h, int w) { return voxels[index(d, h, w)]; }
  bool operator==(const Volume&) const = default;
};

/// Throws a shape error unless every dimension is positive and the payload matches.
void validate(const Volume& v);

enum class Branch { PathA, PathB };

struct Point3 {
  double d = 0.0;
  double h = 0.0;
  double w = 0.0;
};

struct PatientLatent {
  std::int64_t patient_id = 0;
  double growth_rate = 0.0;  // voxels per month
  double conversion_time = std::numeric_limits<double>::infinity();  // months
  Branch branch = Branch::PathA;
  Point3 base_center;  // fraction of each axis in [0,1]
  std::uint64_t noise_seed = 0;

  bool converts() const { return conversion_time != std::numeric_limits<double>::infinity(); }
};

/// Intensities and geometry used when rasterizing a latent.
struct RenderStyle {
  double base_radius = 3.0;  // in-plane lesion radius at t = 0
  double background = 0.1;
  double lesion = 0.55;
  double bright = 0.95;  // PATH_A sub-blob
  double dark = 0.02;    // PATH_B region
  double outcome_radius = 1.5;
  double outcome_growth = 0.35;  // voxels per month after conversion
  double noise_amplitude = 0.05;
};

struct DatasetConfig {
  Dims3 dims{16, 32, 32};
  double branch_b_probability = 0.5;
  double growth_min = 0.1;
  double growth_max = 0.3;
  double tau_min = 6.0;
  double tau_max = 30.0;
  double non_converter_probability = 0.3;
  /// Gaussian-copula correlation between growth rate and earliness of
  /// conversion. Marginals stay uniform for any value in [0, 1).
  double tau_growth_coupling = 0.9;
  double center_jitter = 0.06;  // max offset of the lesion centre, fraction of each axis
  double study_months = 24.0;
  double visit_interval = 1.0;
  RenderStyle style;

  void validate() const;
  std::vector<double> visit_months() const;
};

PatientLatent gen_patient(std::uint64_t seed, const DatasetConfig& cfg, std::int64_t patient_id = 0);

Volume render_volume(const PatientLatent& latent, double t, Dims3 dims, const RenderStyle& style = {});

/// Voxel mask of the lesion ellipsoid at time t (before clamping intensities).
std::vector<bool> lesion_support(const PatientLatent& latent, double t, Dims3 dims,
                                 const RenderStyle& style = {});

struct VisitPair {
  double past_time = 0.0;
  double future_time = 0.0;
};

/// Uniformly picks an ordered visit pair whose separation lies in
/// [dt_min, dt_max] and is strictly positive.
VisitPair choose_pair(std::span<const double> visit_times, double dt_min, double dt_max,
                      std::mt19937_64& rng, std::int64_t patient_id = 0);

struct PairSample {
  Volume past;
  Volume future;
  double delta_t = 0.0;
  std::int64_t patient_id = 0;
  double t = 0.0;
};

PairSample sample_pair(const PatientLatent& latent, std::span<const double> visit_times, double dt_min,
                       double dt_max, std::mt19937_64& rng, Dims3 dims, const RenderStyle& style = {});

/// True iff the patient converts no later than t + window. Only defined for
/// visits strictly before conversion.
bool conversion_label(const PatientLatent& latent, double t, double window);
bool conversion_label(double conversion_time, double t, double window);

// ---- files ----
void write_volume(const std::filesystem::path& path, const Volume& v);
Volume read_volume(const std::filesystem::path& path);
std::vector<unsigned char> encode_volume(const Volume& v);
Volume decode_volume(std::span<const unsigned char> bytes);

struct ManifestRow {
  std::int64_t patient_id = 0;
  double visit_month = 0.0;
  std::string path;  // relative to the manifest directory
  double tau = std::numeric_limits<double>::infinity();
  Branch branch = Branch::PathA;
};

void write_manifest(const std::filesystem::path& path, std::span<const ManifestRow> rows);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);

// ---- cohorts ----

/// Longitudinal visits of a set of patients with on-demand volume access.
class VisitSource {
 public:
  virtual ~VisitSource() = default;
  virtual std::size_t patient_count() const = 0;
  virtual std::int64_t patient_id(std::size_t patient) const = 0;
  virtual double conversion_time(std::size_t patient) const = 0;
  virtual std::span<const double> visits(std::size_t patient) const = 0;
  virtual Volume volume(std::size_t patient, std::size_t visit) const = 0;
  virtual Dims3 dims() const = 0;
};

/// Renders volumes from generated latents.
class RenderedCohort final : public VisitSource {
 public:
  RenderedCohort(const DatasetConfig& cfg, std::uint64_t seed, std::size_t patients,
                 std::int64_t first_id = 0);

  std::size_t patient_count() const override { return latents_.size(); }
  std::int64_t patient_id(std::size_t p) const override { return latents_[p].patient_id; }
  double conversion_time(std::size_t p) const override { return latents_[p].conversion_time; }
  std::span<const double> visits(std::size_t) const override { return visits_; }
  Volume volume(std::size_t patient, std::size_t visit) const override;
  Dims3 dims() const override { return cfg_.dims; }

  const PatientLatent& latent(std::size_t p) const { return latents_[p]; }
  const DatasetConfig& config() const { return cfg_; }

 private:
  DatasetConfig cfg_;
  std::vector<PatientLatent> latents_;
  std::vector<double> visits_;
};

/// Reads volumes listed in a manifest; files are loaded on first use.
class ManifestCohort final : public VisitSource {
 public:
  explicit ManifestCohort(const std::filesystem::path& manifest_path);

  std::size_t patient_count() const override { return patients_.size(); }
  std::int64_t patient_id(std::size_t p) const override { return patients_[p].id; }
  double conversion_time(std::size_t p) const override { return patients_[p].tau; }
  std::span<const double> visits(std::size_t p) const override { return patients_[p].months; }
  Volume volume(std::size_t patient, std::size_t visit) const override;
  Dims3 dims() const override { return dims_; }

 private:
  struct Patient {
    std::int64_t id = 0;
    double tau = 0.0;
    std::vector<double> months;
    std::vector<std::filesystem::path> files;
  };
  std::vector<Patient> patients_;
  Dims3 dims_;
  mutable std::vector<std::vector<std::shared_ptr<const Volume>>> cache_;
};

/// Writes every visit volume plus `manifest.csv` into `dir`.
void write_cohort(const RenderedCohort& cohort, const std::filesystem::path& dir);

}  // namespace stamp::synthvol
