#include "stamp/synthvol.hpp"

#include "stamp/errors.hpp"
#include "stamp/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace stamp::synthvol {

namespace {

double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double uniform01(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

std::string format_month(double m) {
  std::ostringstream os;
  os << std::setprecision(17) << m;
  return os.str();
}

// Largest in-plane radius for which the ellipsoid (depth axis scaled by D/H)
// stays inside the grid.
double max_radius(const Point3& c, Dims3 dims) {
  const double depth_scale = static_cast<double>(dims.d) / static_cast<double>(dims.h);
  const double cd = c.d * dims.d, ch = c.h * dims.h, cw = c.w * dims.w;
  const double rd = std::min(cd, dims.d - 1 - cd) / depth_scale;
  const double rh = std::min(ch, dims.h - 1 - ch);
  const double rw = std::min(cw, dims.w - 1 - cw);
  return std::max(0.0, std::min({rd, rh, rw}));
}

struct Ellipsoid {
  double cd, ch, cw;
  double radius;
  double depth_scale;

  bool contains(int d, int h, int w) const {
    if (radius <= 0.0) return false;
    const double zd = (d - cd) / (radius * depth_scale);
    const double zh = (h - ch) / radius;
    const double zw = (w - cw) / radius;
    return zd * zd + zh * zh + zw * zw <= 1.0;
  }
};

Ellipsoid lesion_at(const PatientLatent& latent, double t, Dims3 dims, const RenderStyle& style) {
  const double r = std::min(style.base_radius + latent.growth_rate * t, max_radius(latent.base_center, dims));
  return {latent.base_center.d * dims.d, latent.base_center.h * dims.h, latent.base_center.w * dims.w, r,
          static_cast<double>(dims.d) / static_cast<double>(dims.h)};
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const unsigned char> in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[offset + i]) << (8 * i);
  return v;
}

}  // namespace

Volume Volume::zeros(Dims3 dims) { return Volume{dims, std::vector<float>(dims.voxel_count(), 0.0f)}; }

void validate(const Volume& v) {
  check(v.dims.d > 0 && v.dims.h > 0 && v.dims.w > 0, ErrorKind::Shape, "volume dims must be positive");
  check(v.voxels.size() == v.dims.voxel_count(), ErrorKind::Shape, "voxel count does not match dims");
}

void DatasetConfig::validate() const {
  auto bounds = [](double lo, double hi, const char* what) {
    check(lo <= hi, ErrorKind::Config, std::string(what) + ": min > max");
  };
  check(dims.d > 0 && dims.h > 0 && dims.w > 0, ErrorKind::Config, "dims must be positive");
  check(branch_b_probability >= 0.0 && branch_b_probability <= 1.0, ErrorKind::Config,
        "branch probability outside [0,1]");
  check(non_converter_probability >= 0.0 && non_converter_probability <= 1.0, ErrorKind::Config,
        "non-converter probability outside [0,1]");
  bounds(growth_min, growth_max, "growth rate bounds");
  bounds(tau_min, tau_max, "conversion time bounds");
  check(growth_min > 0.0, ErrorKind::Config, "growth rate must be positive");
  check(tau_min > 0.0, ErrorKind::Config, "conversion time must be positive");
  check(tau_growth_coupling >= 0.0 && tau_growth_coupling < 1.0, ErrorKind::Config,
        "tau_growth_coupling outside [0,1)");
  check(center_jitter >= 0.0 && center_jitter < 0.5, ErrorKind::Config, "center_jitter outside [0,0.5)");
  check(study_months >= 0.0 && visit_interval > 0.0, ErrorKind::Config, "invalid visit schedule");
}

std::vector<double> DatasetConfig::visit_months() const {
  std::vector<double> months;
  for (int i = 0;; ++i) {
    const double m = i * visit_interval;
    if (m > study_months + 1e-9) break;
    months.push_back(m);
  }
  return months;
}

PatientLatent gen_patient(std::uint64_t seed, const DatasetConfig& cfg, std::int64_t patient_id) {
  cfg.validate();
  std::mt19937_64 rng(splitmix64(seed));
  std::normal_distribution<double> normal(0.0, 1.0);

  // Fixed draw order keeps every field a pure function of the seed.
  const double u_branch = uniform01(rng);
  const double u_converter = uniform01(rng);
  const double z_growth = normal(rng);
  const double z_tau = normal(rng);
  const double jd = uniform01(rng), jh = uniform01(rng), jw = uniform01(rng);
  const std::uint64_t noise_seed = rng();

  const double rho = cfg.tau_growth_coupling;
  const double u_growth = standard_normal_cdf(z_growth);
  const double u_early = standard_normal_cdf(rho * z_growth + std::sqrt(1.0 - rho * rho) * z_tau);

  PatientLatent p;
  p.patient_id = patient_id;
  p.growth_rate = cfg.growth_min + (cfg.growth_max - cfg.growth_min) * u_growth;
  p.branch = u_branch < cfg.branch_b_probability ? Branch::PathB : Branch::PathA;
  if (u_converter >= cfg.non_converter_probability)
    p.conversion_time = cfg.tau_max - (cfg.tau_max - cfg.tau_min) * u_early;
  const double j = cfg.center_jitter;
  p.base_center = {0.5 + j * (2.0 * jd - 1.0), 0.5 + j * (2.0 * jh - 1.0), 0.5 + j * (2.0 * jw - 1.0)};
  p.noise_seed = noise_seed;
  return p;
}

std::vector<bool> lesion_support(const PatientLatent& latent, double t, Dims3 dims, const RenderStyle& style) {
  const Ellipsoid e = lesion_at(latent, t, dims, style);
  std::vector<bool> mask(dims.voxel_count(), false);
  std::size_t i = 0;
  for (int d = 0; d < dims.d; ++d)
    for (int h = 0; h < dims.h; ++h)
      for (int w = 0; w < dims.w; ++w) mask[i++] = e.contains(d, h, w);
  return mask;
}

Volume render_volume(const PatientLatent& latent, double t, Dims3 dims, const RenderStyle& style) {
  check(dims.d > 0 && dims.h > 0 && dims.w > 0, ErrorKind::Shape, "render dims must be positive");
  check(t >= 0.0 && std::isfinite(t), ErrorKind::Usage, "render time must be finite and >= 0");

  const Ellipsoid lesion = lesion_at(latent, t, dims, style);
  const bool converted = t >= latent.conversion_time;
  Ellipsoid outcome = lesion;
  if (converted)
    outcome.radius = std::min(style.outcome_radius + style.outcome_growth * (t - latent.conversion_time),
                              max_radius(latent.base_center, dims));
  const double outcome_value = latent.branch == Branch::PathA ? style.bright : style.dark;

  // Anatomy noise is fixed per patient so visits differ only by disease state.
  std::mt19937_64 noise_rng(latent.noise_seed);
  std::uniform_real_distribution<double> noise(-style.noise_amplitude, style.noise_amplitude);

  Volume v = Volume::zeros(dims);
  std::size_t i = 0;
  for (int d = 0; d < dims.d; ++d) {
    for (int h = 0; h < dims.h; ++h) {
      for (int w = 0; w < dims.w; ++w) {
        double base = style.background;
        if (lesion.contains(d, h, w)) base = style.lesion;
        if (converted && outcome.contains(d, h, w)) base = outcome_value;
        v.voxels[i++] = static_cast<float>(std::clamp(base + noise(noise_rng), 0.0, 1.0));
      }
    }
  }
  return v;
}

VisitPair choose_pair(std::span<const double> visit_times, double dt_min, double dt_max, std::mt19937_64& rng,
                      std::int64_t patient_id) {
  std::vector<VisitPair> admissible;
  for (double a : visit_times) {
    for (double b : visit_times) {
      const double dt = b - a;
      if (dt > 0.0 && dt >= dt_min - 1e-9 && dt <= dt_max + 1e-9) admissible.push_back({a, b});
    }
  }
  check(!admissible.empty(), ErrorKind::Sampling,
        "patient " + std::to_string(patient_id) + ": no visit pair with separation in [" +
            std::to_string(dt_min) + ", " + std::to_string(dt_max) + "]");
  std::uniform_int_distribution<std::size_t> pick(0, admissible.size() - 1);
  return admissible[pick(rng)];
}

PairSample sample_pair(const PatientLatent& latent, std::span<const double> visit_times, double dt_min,
                       double dt_max, std::mt19937_64& rng, Dims3 dims, const RenderStyle& style) {
  const VisitPair pair = choose_pair(visit_times, dt_min, dt_max, rng, latent.patient_id);
  PairSample s;
  s.past = render_volume(latent, pair.past_time, dims, style);
  s.future = render_volume(latent, pair.future_time, dims, style);
  s.delta_t = pair.future_time - pair.past_time;
  s.patient_id = latent.patient_id;
  s.t = pair.past_time;
  return s;
}

bool conversion_label(double conversion_time, double t, double window) {
  check(window > 0.0, ErrorKind::Usage, "conversion window must be positive");
  check(t < conversion_time, ErrorKind::Usage,
        "conversion label queried at or after conversion (t=" + std::to_string(t) + ")");
  return conversion_time <= t + window;
}

bool conversion_label(const PatientLatent& latent, double t, double window) {
  return conversion_label(latent.conversion_time, t, window);
}

// ---- files ----

std::vector<unsigned char> encode_volume(const Volume& v) {
  validate(v);
  std::vector<unsigned char> out = {'S', 'V', 'O', 'L', 0x01};
  out.reserve(17 + 4 * v.voxels.size());
  put_u32(out, static_cast<std::uint32_t>(v.dims.d));
  put_u32(out, static_cast<std::uint32_t>(v.dims.h));
  put_u32(out, static_cast<std::uint32_t>(v.dims.w));
  for (float f : v.voxels) put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

Volume decode_volume(std::span<const unsigned char> bytes) {
  constexpr std::size_t header = 17;
  check(bytes.size() >= header, ErrorKind::Format, "volume file shorter than its header");
  check(bytes[0] == 'S' && bytes[1] == 'V' && bytes[2] == 'O' && bytes[3] == 'L', ErrorKind::Format,
        "bad volume magic (expected SVOL)");
  check(bytes[4] == 0x01, ErrorKind::Format, "unsupported volume version " + std::to_string(bytes[4]));
  Dims3 dims{static_cast<int>(get_u32(bytes, 5)), static_cast<int>(get_u32(bytes, 9)),
             static_cast<int>(get_u32(bytes, 13))};
  check(dims.d > 0 && dims.h > 0 && dims.w > 0, ErrorKind::Format, "volume dims must be positive");
  const std::size_t payload = (bytes.size() - header);
  check(payload % 4 == 0 && payload / 4 == dims.voxel_count(), ErrorKind::Format,
        "volume payload holds " + std::to_string(payload / 4) + " values but dims require " +
            std::to_string(dims.voxel_count()));
  Volume v = Volume::zeros(dims);
  for (std::size_t i = 0; i < v.voxels.size(); ++i)
    v.voxels[i] = std::bit_cast<float>(get_u32(bytes, header + 4 * i));
  return v;
}

void write_volume(const std::filesystem::path& path, const Volume& v) {
  const auto bytes = encode_volume(v);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check(static_cast<bool>(out), ErrorKind::Data, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  check(static_cast<bool>(out), ErrorKind::Data, "failed writing " + path.string());
}

Volume read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  check(static_cast<bool>(in), ErrorKind::Data, "cannot open volume " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_volume(bytes);
  } catch (const Error& e) {
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

void write_manifest(const std::filesystem::path& path, std::span<const ManifestRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  check(static_cast<bool>(out), ErrorKind::Data, "cannot open " + path.string() + " for writing");
  out << "patient_id,visit_month,path,tau,branch\n";
  for (const auto& r : rows) {
    out << r.patient_id << ',' << format_month(r.visit_month) << ',' << r.path << ','
        << (std::isinf(r.tau) ? std::string("inf") : format_month(r.tau)) << ','
        << (r.branch == Branch::PathA ? 'A' : 'B') << '\n';
  }
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  check(static_cast<bool>(in), ErrorKind::Data, "cannot open manifest " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  check(line == "patient_id,visit_month,path,tau,branch", ErrorKind::Format,
        path.string() + ": unexpected manifest header '" + line + "'");
  std::vector<ManifestRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    check(fields.size() == 5, ErrorKind::Format, where + ": expected 5 fields");
    ManifestRow r;
    try {
      r.patient_id = std::stoll(fields[0]);
      r.visit_month = std::stod(fields[1]);
      r.tau = fields[3] == "inf" ? std::numeric_limits<double>::infinity() : std::stod(fields[3]);
    } catch (const std::exception&) {
      fail(ErrorKind::Format, where + ": malformed number");
    }
    r.path = fields[2];
    check(fields[4] == "A" || fields[4] == "B", ErrorKind::Format, where + ": branch must be A or B");
    r.branch = fields[4] == "A" ? Branch::PathA : Branch::PathB;
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- cohorts ----

RenderedCohort::RenderedCohort(const DatasetConfig& cfg, std::uint64_t seed, std::size_t patients,
                               std::int64_t first_id)
    : cfg_(cfg), visits_(cfg.visit_months()) {
  cfg_.validate();
  latents_.reserve(patients);
  for (std::size_t i = 0; i < patients; ++i) {
    const std::int64_t id = first_id + static_cast<std::int64_t>(i);
    latents_.push_back(gen_patient(derive_seed(seed, "patient", static_cast<std::uint64_t>(id)), cfg_, id));
  }
}

Volume RenderedCohort::volume(std::size_t patient, std::size_t visit) const {
  return render_volume(latents_.at(patient), visits_.at(visit), cfg_.dims, cfg_.style);
}

ManifestCohort::ManifestCohort(const std::filesystem::path& manifest_path) {
  const auto rows = read_manifest(manifest_path);
  check(!rows.empty(), ErrorKind::Data, manifest_path.string() + ": manifest lists no volumes");
  const auto base = manifest_path.parent_path();
  std::map<std::int64_t, std::size_t> index;
  for (const auto& r : rows) {
    auto [it, inserted] = index.try_emplace(r.patient_id, patients_.size());
    if (inserted) patients_.push_back({r.patient_id, r.tau, {}, {}});
    Patient& p = patients_[it->second];
    p.months.push_back(r.visit_month);
    p.files.push_back(base / r.path);
  }
  for (auto& p : patients_) {
    std::vector<std::size_t> order(p.months.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return p.months[a] < p.months[b]; });
    Patient sorted{p.id, p.tau, {}, {}};
    for (auto i : order) {
      sorted.months.push_back(p.months[i]);
      sorted.files.push_back(p.files[i]);
    }
    p = std::move(sorted);
  }
  cache_.resize(patients_.size());
  for (std::size_t i = 0; i < patients_.size(); ++i) cache_[i].resize(patients_[i].files.size());
  dims_ = volume(0, 0).dims;
}

Volume ManifestCohort::volume(std::size_t patient, std::size_t visit) const {
  auto& slot = cache_.at(patient).at(visit);
  if (!slot) {
    auto v = std::make_shared<Volume>(read_volume(patients_[patient].files[visit]));
    if (dims_.voxel_count() != 0)
      check(v->dims == dims_, ErrorKind::Data,
            patients_[patient].files[visit].string() + ": dims differ from the rest of the cohort");
    slot = std::move(v);
  }
  return *slot;
}

void write_cohort(const RenderedCohort& cohort, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<ManifestRow> rows;
  for (std::size_t p = 0; p < cohort.patient_count(); ++p) {
    const auto& lat = cohort.latent(p);
    const auto months = cohort.visits(p);
    for (std::size_t v = 0; v < months.size(); ++v) {
      std::ostringstream name;
      name << "p" << std::setw(5) << std::setfill('0') << lat.patient_id << "_m" << format_month(months[v])
           << ".svol";
      write_volume(dir / name.str(), cohort.volume(p, v));
      rows.push_back({lat.patient_id, months[v], name.str(), lat.conversion_time, lat.branch});
    }
  }
  write_manifest(dir / "manifest.csv", rows);
}

}  // namespace stamp::synthvol
