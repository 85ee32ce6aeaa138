#include "stamp/config.hpp"

#include "stamp/errors.hpp"
#include "stamp/rng.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <vector>

namespace stamp::config {

namespace {

using Getter = std::function<std::string(RunConfig&)>;
using Setter = std::function<void(RunConfig&, const std::string&)>;

struct Field {
  std::string section;
  std::string key;
  Getter get;
  Setter set;
};

[[noreturn]] void bad(const std::string& msg) { throw Error(ErrorKind::Parse, msg); }

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_real(const std::string& s, const std::string& key) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v))
    bad(key + ": expected a real number, got '" + s + "'");
  return v;
}

long long to_int(const std::string& s, const std::string& key) {
  long long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) bad(key + ": expected an integer, got '" + s + "'");
  return v;
}

struct Range {
  double lo, hi;
  bool lo_open = false, hi_open = false;
  std::string text() const {
    return std::string(lo_open ? "(" : "[") + fmt_real(lo) + "," + (std::isinf(hi) ? "inf" : fmt_real(hi)) +
           (hi_open || std::isinf(hi) ? ")" : "]");
  }
  bool contains(double v) const {
    return (lo_open ? v > lo : v >= lo) && (hi_open ? v < hi : v <= hi);
  }
};

constexpr double kInf = std::numeric_limits<double>::infinity();

template <class Ref>
Field real(std::string sec, std::string key, Ref ref, Range range) {
  return {sec, key, [ref](RunConfig& c) { return fmt_real(ref(c)); },
          [ref, key, range](RunConfig& c, const std::string& v) {
            const double x = to_real(v, key);
            if (!range.contains(x)) bad(key + " = " + v + " out of range " + range.text());
            ref(c) = x;
          }};
}

template <class Ref>
Field integer(std::string sec, std::string key, Ref ref, long long lo, long long hi) {
  return {sec, key, [ref](RunConfig& c) { return std::to_string(ref(c)); },
          [ref, key, lo, hi](RunConfig& c, const std::string& v) {
            const long long x = to_int(v, key);
            if (x < lo || x > hi)
              bad(key + " = " + v + " out of range [" + std::to_string(lo) + "," + std::to_string(hi) + "]");
            ref(c) = static_cast<std::remove_reference_t<decltype(ref(c))>>(x);
          }};
}

template <class Ref>
Field seed(std::string sec, std::string key, Ref ref) {
  return {sec, key, [ref](RunConfig& c) { return std::to_string(ref(c)); },
          [ref, key](RunConfig& c, const std::string& v) {
            std::uint64_t x = 0;
            const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
            if (ec != std::errc() || p != v.data() + v.size()) bad(key + ": expected an unsigned integer, got '" + v + "'");
            ref(c) = x;
          }};
}

template <class Ref>
Field boolean(std::string sec, std::string key, Ref ref) {
  return {sec, key, [ref](RunConfig& c) { return std::string(ref(c) ? "true" : "false"); },
          [ref, key](RunConfig& c, const std::string& v) {
            if (v == "true") ref(c) = true;
            else if (v == "false") ref(c) = false;
            else bad(key + ": expected true or false, got '" + v + "'");
          }};
}

std::vector<double> to_list(const std::string& s, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    const auto b = item.find_last_not_of(" \t");
    if (a == std::string::npos) bad(key + ": empty list element");
    const double x = to_real(item.substr(a, b - a + 1), key);
    if (!(x > 0.0)) bad(key + " = " + s + " out of range (0,inf)");
    out.push_back(x);
  }
  if (out.empty()) bad(key + ": list must not be empty");
  return out;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    const Range unit{0.0, 1.0};
    const Range half_open_unit{0.0, 1.0, false, true};
    const Range positive{0.0, kInf, true, true};
    const Range non_negative{0.0, kInf, false, true};
    // [data]
    f.push_back(integer("data", "volume_d", [](RunConfig& c) -> int& { return c.data.dims.d; }, 1, 4096));
    f.push_back(integer("data", "volume_h", [](RunConfig& c) -> int& { return c.data.dims.h; }, 1, 4096));
    f.push_back(integer("data", "volume_w", [](RunConfig& c) -> int& { return c.data.dims.w; }, 1, 4096));
    f.push_back(seed("data", "seed", [](RunConfig& c) -> std::uint64_t& { return c.data_seed; }));
    f.push_back(integer("data", "pretrain_patients", [](RunConfig& c) -> int& { return c.pretrain_patients; }, 1, 1000000));
    f.push_back(integer("data", "probe_patients", [](RunConfig& c) -> int& { return c.probe_patients; }, 0, 1000000));
    f.push_back(real("data", "branch_b_probability", [](RunConfig& c) -> double& { return c.data.branch_b_probability; }, unit));
    f.push_back(real("data", "growth_min", [](RunConfig& c) -> double& { return c.data.growth_min; }, non_negative));
    f.push_back(real("data", "growth_max", [](RunConfig& c) -> double& { return c.data.growth_max; }, non_negative));
    f.push_back(real("data", "tau_min", [](RunConfig& c) -> double& { return c.data.tau_min; }, non_negative));
    f.push_back(real("data", "tau_max", [](RunConfig& c) -> double& { return c.data.tau_max; }, non_negative));
    f.push_back(real("data", "non_converter_probability", [](RunConfig& c) -> double& { return c.data.non_converter_probability; }, unit));
    f.push_back(real("data", "tau_growth_coupling", [](RunConfig& c) -> double& { return c.data.tau_growth_coupling; }, half_open_unit));
    f.push_back(real("data", "center_jitter", [](RunConfig& c) -> double& { return c.data.center_jitter; }, Range{0.0, 0.5}));
    f.push_back(real("data", "study_months", [](RunConfig& c) -> double& { return c.data.study_months; }, positive));
    f.push_back(real("data", "visit_interval", [](RunConfig& c) -> double& { return c.data.visit_interval; }, positive));
    f.push_back(real("data", "noise_amplitude", [](RunConfig& c) -> double& { return c.data.style.noise_amplitude; }, Range{0.0, 0.5}));
    // [model]
    f.push_back({"model", "mode", [](RunConfig& c) { return std::string(trainer::to_string(c.train.mode)); },
                 [](RunConfig& c, const std::string& v) {
                   trainer::Mode m;
                   try {
                     m = trainer::parse_mode(v);
                   } catch (const Error& e) {
                     bad(std::string("mode: ") + e.what());
                   }
                   c.train = trainer::with_mode(c.train, m);
                 }});
    f.push_back(boolean("model", "use_te", [](RunConfig& c) -> bool& { return c.train.use_te; }));
    f.push_back(boolean("model", "use_se", [](RunConfig& c) -> bool& { return c.train.use_se; }));
    f.push_back(integer("model", "patch_d", [](RunConfig& c) -> int& { return c.train.encoder.patch.d; }, 1, 4096));
    f.push_back(integer("model", "patch_h", [](RunConfig& c) -> int& { return c.train.encoder.patch.h; }, 1, 4096));
    f.push_back(integer("model", "patch_w", [](RunConfig& c) -> int& { return c.train.encoder.patch.w; }, 1, 4096));
    f.push_back(integer("model", "encoder_depth", [](RunConfig& c) -> int& { return c.train.encoder.depth; }, 1, 64));
    f.push_back(integer("model", "embed_dim", [](RunConfig& c) -> int& { return c.train.encoder.embed_dim; }, 1, 8192));
    f.push_back(integer("model", "encoder_heads", [](RunConfig& c) -> int& { return c.train.encoder.heads; }, 1, 256));
    f.push_back(integer("model", "mlp_ratio", [](RunConfig& c) -> int& { return c.train.encoder.mlp_ratio; }, 1, 64));
    f.push_back(integer("model", "decoder_depth", [](RunConfig& c) -> int& { return c.train.decoder.depth; }, 1, 64));
    f.push_back(integer("model", "decoder_dim", [](RunConfig& c) -> int& { return c.train.decoder.embed_dim; }, 1, 8192));
    f.push_back(integer("model", "decoder_heads", [](RunConfig& c) -> int& { return c.train.decoder.heads; }, 1, 256));
    f.push_back(integer("model", "decoder_mlp_ratio", [](RunConfig& c) -> int& { return c.train.decoder.mlp_ratio; }, 1, 64));
    f.push_back(boolean("model", "norm_pix", [](RunConfig& c) -> bool& { return c.train.decoder.norm_pix; }));
    f.push_back(integer("model", "latent_groups", [](RunConfig& c) -> int& { return c.train.latent.groups; }, 1, 4096));
    f.push_back(integer("model", "latent_bins", [](RunConfig& c) -> int& { return c.train.latent.bins; }, 2, 4096));
    f.push_back(integer("model", "latent_hidden", [](RunConfig& c) -> int& { return c.train.latent.hidden; }, 1, 65536));
    f.push_back(real("model", "latent_uniform_mix", [](RunConfig& c) -> double& { return c.train.latent.uniform_mix; }, half_open_unit));
    // [pretrain]
    f.push_back(real("pretrain", "beta", [](RunConfig& c) -> double& { return c.train.beta; }, non_negative));
    f.push_back(real("pretrain", "mask_ratio", [](RunConfig& c) -> double& { return c.train.mask_ratio; }, half_open_unit));
    f.push_back(real("pretrain", "dt_min", [](RunConfig& c) -> double& { return c.train.dt_min; }, positive));
    f.push_back(real("pretrain", "dt_max", [](RunConfig& c) -> double& { return c.train.dt_max; }, positive));
    f.push_back(integer("pretrain", "epochs", [](RunConfig& c) -> int& { return c.train.epochs; }, 1, 1000000));
    f.push_back(integer("pretrain", "batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; }, 1, 1000000));
    f.push_back(integer("pretrain", "pairs_per_patient", [](RunConfig& c) -> int& { return c.train.pairs_per_patient; }, 1, 10000));
    f.push_back(real("pretrain", "lr", [](RunConfig& c) -> double& { return c.train.lr; }, positive));
    f.push_back(real("pretrain", "weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; }, non_negative));
    f.push_back(real("pretrain", "adam_beta1", [](RunConfig& c) -> double& { return c.train.adam_beta1; }, half_open_unit));
    f.push_back(real("pretrain", "adam_beta2", [](RunConfig& c) -> double& { return c.train.adam_beta2; }, half_open_unit));
    f.push_back(real("pretrain", "adam_eps", [](RunConfig& c) -> double& { return c.train.adam_eps; }, positive));
    f.push_back(seed("pretrain", "seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }));
    f.push_back(integer("pretrain", "checkpoint_every", [](RunConfig& c) -> int& { return c.train.checkpoint_every; }, 0, 1000000));
    f.push_back(boolean("pretrain", "flip", [](RunConfig& c) -> bool& { return c.train.augment.flip; }));
    f.push_back(boolean("pretrain", "joint_flip", [](RunConfig& c) -> bool& { return c.train.augment.joint_flip; }));
    f.push_back(boolean("pretrain", "jitter", [](RunConfig& c) -> bool& { return c.train.augment.jitter; }));
    f.push_back(boolean("pretrain", "crop", [](RunConfig& c) -> bool& { return c.train.augment.crop; }));
    f.push_back(real("pretrain", "crop_max", [](RunConfig& c) -> double& { return c.train.augment.crop_max; }, Range{0.0, 0.5, false, true}));
    f.push_back(real("pretrain", "jitter_brightness", [](RunConfig& c) -> double& { return c.train.augment.jitter_brightness; }, unit));
    f.push_back(real("pretrain", "jitter_contrast", [](RunConfig& c) -> double& { return c.train.augment.jitter_contrast; }, half_open_unit));
    // [probe]
    f.push_back({"probe", "pool", [](RunConfig& c) { return std::string(eval::to_string(c.probe.pool)); },
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.probe.pool = eval::parse_pool(v);
                   } catch (const Error& e) {
                     bad(std::string("pool: ") + e.what());
                   }
                 }});
    f.push_back(boolean("probe", "use_te", [](RunConfig& c) -> bool& { return c.probe.use_te; }));
    f.push_back(boolean("probe", "use_se", [](RunConfig& c) -> bool& { return c.probe.use_se; }));
    f.push_back(real("probe", "prompt_dt", [](RunConfig& c) -> double& { return c.probe.prompt_dt; }, non_negative));
    f.push_back(real("probe", "window", [](RunConfig& c) -> double& { return c.probe.window; }, positive));
    f.push_back(real("probe", "visit_stride", [](RunConfig& c) -> double& { return c.probe.visit_stride; }, positive));
    f.push_back(integer("probe", "epochs", [](RunConfig& c) -> int& { return c.probe.epochs; }, 1, 1000000));
    f.push_back({"probe", "lr_grid",
                 [](RunConfig& c) {
                   std::string s;
                   for (double x : c.probe.lr_grid) s += (s.empty() ? "" : ",") + fmt_real(x);
                   return s;
                 },
                 [](RunConfig& c, const std::string& v) { c.probe.lr_grid = to_list(v, "lr_grid"); }});
    f.push_back(integer("probe", "folds", [](RunConfig& c) -> int& { return c.probe.folds; }, 3, 100));
    f.push_back(integer("probe", "latent_samples", [](RunConfig& c) -> int& { return c.probe.latent_samples; }, 0, 100000));
    f.push_back(seed("probe", "seed", [](RunConfig& c) -> std::uint64_t& { return c.probe.seed; }));
    return f;
  }();
  return table;
}

std::string trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string_view::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return std::string(s.substr(a, b - a + 1));
}

void finalize(RunConfig& c) {
  c.train.encoder.volume = c.data.dims;
  c.train.decoder.cross_attention = c.train.mode != trainer::Mode::Mae;
}

void validate_all(const RunConfig& c) {
  c.data.validate();
  c.train.validate();
  c.probe.validate();
}

RunConfig parse_impl(std::string_view text, std::string_view profile, bool validate) {
  RunConfig cfg = profile_defaults(profile);
  std::string section;
  bool any_key = false;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    try {
      if (line.front() == '[') {
        if (line.back() != ']') bad("malformed section header '" + line + "'");
        section = trim(line.substr(1, line.size() - 2));
        if (section != "data" && section != "model" && section != "pretrain" && section != "probe")
          bad("unknown section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) bad("expected 'key = value', got '" + line + "'");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) bad("missing key before '='");
      if (section.empty() && key == "profile") {
        if (any_key) bad("profile must be set before any other key");
        if (value != "desk" && value != "paper") bad("unknown profile '" + value + "' (expected desk or paper)");
        cfg = profile_defaults(value);
        any_key = true;
        continue;
      }
      if (section.empty()) bad("key '" + key + "' outside a section");
      const Field* field = nullptr;
      for (const auto& f : fields())
        if (f.section == section && f.key == key) field = &f;
      if (!field) bad("unknown key '" + key + "' in [" + section + "]");
      field->set(cfg, value);
      any_key = true;
    } catch (const Error& e) {
      fail(ErrorKind::Parse, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  finalize(cfg);
  if (validate) validate_all(cfg);
  return cfg;
}

}  // namespace

RunConfig profile_defaults(std::string_view profile) {
  RunConfig c;
  if (profile == "desk") {
    c.profile = "desk";
    c.train.lr = 1e-3;
  } else if (profile == "paper") {
    c.profile = "paper";
    c.data.dims = {32, 448, 448};
    c.train.encoder.patch = {4, 32, 32};
    c.train.encoder.depth = 12;
    c.train.encoder.embed_dim = 768;
    c.train.encoder.heads = 12;
    c.train.encoder.mlp_ratio = 4;
    c.train.decoder.depth = 6;
    c.train.decoder.embed_dim = 384;
    c.train.decoder.heads = 12;
    c.train.latent.groups = 24;
    c.train.latent.bins = 32;
    c.train.latent.hidden = 1536;
    c.train.batch_size = 96;
    c.train.epochs = 800;
    c.train.lr = 1e-4;
    c.train.weight_decay = 1e-2;
  } else {
    fail(ErrorKind::Config, "unknown profile '" + std::string(profile) + "' (expected desk or paper)");
  }
  finalize(c);
  return c;
}

RunConfig parse_config(std::string_view text, std::string_view profile) { return parse_impl(text, profile, true); }

std::string emit_config(const RunConfig& cfg) {
  RunConfig c = cfg;
  std::ostringstream out;
  out << "profile = " << c.profile << '\n';
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      section = f.section;
      out << "\n[" << section << "]\n";
    }
    out << f.key << " = " << f.get(c) << '\n';
  }
  return out.str();
}

std::string emit_train_config(const trainer::TrainConfig& cfg) {
  RunConfig c;
  c.train = cfg;
  c.data.dims = cfg.encoder.volume;
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields()) {
    const bool volume_key = f.section == "data" && f.key.rfind("volume_", 0) == 0;
    if (!(volume_key || f.section == "model" || f.section == "pretrain")) continue;
    if (f.section != section) {
      section = f.section;
      out << (out.tellp() > 0 ? "\n[" : "[") << section << "]\n";
    }
    out << f.key << " = " << f.get(c) << '\n';
  }
  return out.str();
}

trainer::TrainConfig parse_train_config(std::string_view text) {
  RunConfig c = parse_impl(text, "desk", false);
  c.train.validate();
  return c.train;
}

std::uint64_t config_digest(const RunConfig& cfg) { return hash_name(emit_config(cfg)); }

bool operator==(const RunConfig& a, const RunConfig& b) { return emit_config(a) == emit_config(b); }

}  // namespace stamp::config
