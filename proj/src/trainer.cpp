#include "stamp/trainer.hpp"

#include "stamp/config.hpp"
#include "stamp/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace stamp::trainer {

const char* to_string(Mode mode) {
  switch (mode) {
    case Mode::Stamp: return "stamp";
    case Mode::SiamMae: return "siammae";
    case Mode::Mae: return "mae";
  }
  return "?";
}

Mode parse_mode(const std::string& text) {
  if (text == "stamp") return Mode::Stamp;
  if (text == "siammae") return Mode::SiamMae;
  if (text == "mae") return Mode::Mae;
  fail(ErrorKind::Config, "unknown mode '" + text + "' (expected stamp, siammae or mae)");
}

void TrainConfig::validate() const {
  encoder.validate();
  decoder.validate();
  check(beta >= 0.0 && std::isfinite(beta), ErrorKind::Config, "beta must be a non-negative real");
  check(mask_ratio > 0.0 && mask_ratio < 1.0, ErrorKind::Config, "mask_ratio must lie in (0,1)");
  check(dt_min > 0.0 && dt_max >= dt_min, ErrorKind::Config, "delta-t range must satisfy 0 < dt_min <= dt_max");
  check(epochs > 0 && batch_size > 0 && pairs_per_patient > 0, ErrorKind::Config,
        "epochs, batch_size and pairs_per_patient must be positive");
  check(lr > 0.0 && weight_decay >= 0.0, ErrorKind::Config, "lr must be positive and weight_decay non-negative");
  check(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0,
        ErrorKind::Config, "Adam moments must lie in [0,1) and eps must be positive");
  check(checkpoint_every >= 0, ErrorKind::Config, "checkpoint_every must be non-negative");
  check(augment.crop_max >= 0.0 && augment.crop_max < 0.5, ErrorKind::Config, "crop_max must lie in [0,0.5)");
  check(augment.jitter_brightness >= 0.0 && augment.jitter_contrast >= 0.0 && augment.jitter_contrast < 1.0,
        ErrorKind::Config, "jitter strengths out of range");
  const int n = encoder.token_count();
  const int masked = tokenizer::mask_count(n, mask_ratio);
  check(masked > 0 && masked < n, ErrorKind::Config, "mask_ratio leaves no masked or no visible token");
  switch (mode) {
    case Mode::SiamMae:
      check(!use_se, ErrorKind::Config, "siammae mode has no stochastic latent (use_se must be false)");
      check(decoder.cross_attention, ErrorKind::Config, "siammae mode needs the cross-attention decoder");
      break;
    case Mode::Mae:
      check(!use_te && !use_se, ErrorKind::Config, "mae mode takes a single volume (use_te and use_se must be false)");
      check(!decoder.cross_attention, ErrorKind::Config, "mae mode needs the self-attention decoder");
      break;
    case Mode::Stamp:
      check(decoder.cross_attention, ErrorKind::Config, "stamp mode needs the cross-attention decoder");
      if (use_se) latent.validate(encoder.embed_dim);
      break;
  }
}

TrainConfig with_mode(TrainConfig cfg, Mode mode) {
  cfg.mode = mode;
  if (mode == Mode::SiamMae) {
    cfg.use_se = false;
    cfg.use_te = false;
  }
  if (mode == Mode::Mae) {
    cfg.use_se = false;
    cfg.use_te = false;
  }
  cfg.decoder.cross_attention = mode != Mode::Mae;
  return cfg;
}

std::unique_ptr<Model> Model::create(const TrainConfig& cfg, std::mt19937_64& init_rng) {
  cfg.validate();
  auto m = std::make_unique<Model>();
  m->cfg = cfg;
  m->encoder = backbone::Encoder::create(m->params, cfg.encoder, init_rng);
  const int d = cfg.encoder.embed_dim;
  if (cfg.use_te) {
    m->te_encoder = temporal::TemporalEncoder::create(m->params, "te_encoder", d, init_rng);
    m->te_decoder = temporal::TemporalEncoder::create(m->params, "te_decoder", d, init_rng);
  }
  if (cfg.use_se) m->latent = latentvar::LatentHeads::create(m->params, cfg.latent, d, init_rng);
  m->decoder = decoder::Decoder::create(m->params, cfg.decoder, d, cfg.encoder.grid(),
                                        static_cast<int>(cfg.encoder.patch.voxel_count()), init_rng);
  return m;
}

ForwardResult forward(const Model& model, std::span<const PairSample> batch, std::mt19937_64& mask_rng,
                      std::mt19937_64& latent_rng) {
  check(!batch.empty(), ErrorKind::Usage, "forward: empty batch");
  const auto& cfg = model.cfg;
  const int n = cfg.encoder.token_count();
  ForwardResult r;
  std::vector<tokenizer::TokenGrid> past;
  std::vector<double> dts;
  for (const auto& pair : batch) {
    r.targets.push_back(tokenizer::patchify(pair.future, cfg.encoder.patch));
    if (cfg.mode != Mode::Mae) past.push_back(tokenizer::patchify(pair.past, cfg.encoder.patch));
    dts.push_back(pair.delta_t);
    r.masks.push_back(tokenizer::random_mask(n, cfg.mask_ratio, mask_rng));
  }

  if (cfg.mode == Mode::Mae) {
    auto visible = model.encoder.encode(r.targets, backbone::EmbeddingSource::FutureVisible, r.masks);
    r.prediction = model.decoder.decode_masked(visible, r.masks);
    r.recon = decoder::recon_loss(r.prediction, r.targets, r.masks, cfg.decoder.norm_pix);
    r.total = r.recon;
    return r;
  }

  std::optional<Var> te1, te2;
  if (model.te_encoder) te1 = (*model.te_encoder)(dts);
  if (model.te_decoder) te2 = (*model.te_decoder)(dts);
  auto h_past = model.encoder.encode(past, backbone::EmbeddingSource::PastFull, {}, te1 ? &*te1 : nullptr);
  auto h_future = model.encoder.encode(r.targets, backbone::EmbeddingSource::FutureVisible, r.masks);

  std::optional<Var> z;
  if (model.latent) {
    const Var cls_t = h_past.cls();
    auto prior = latentvar::prior_logits(*model.latent, cls_t);
    auto post = latentvar::posterior_logits(*model.latent, cls_t, h_future.cls());
    z = latentvar::st_sample(post, latent_rng);
    r.kl = latentvar::kl_weighted(post, prior);
  }
  r.prediction = model.decoder.decode(h_past, z ? &*z : nullptr, h_future, r.masks, te2 ? &*te2 : nullptr);
  r.recon = decoder::recon_loss(r.prediction, r.targets, r.masks, cfg.decoder.norm_pix);
  r.total = r.kl.defined() ? ad::add(r.recon, ad::scale(r.kl, cfg.beta)) : r.recon;
  return r;
}

AdamW::AdamW(const nn::ParameterSet& params, double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params.items()) {
    m_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
    v_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
  }
}

void AdamW::step(nn::ParameterSet& params) {
  check(params.size() == m_.size(), ErrorKind::Usage, "optimizer built for a different parameter set");
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  auto& items = params.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& p = items[i];
    if (!p.var.has_grad()) continue;
    Matrix& w = p.var.mutable_value();
    const Matrix& g = p.var.grad();
    if (p.decay && wd_ > 0.0) w *= (1.0 - lr_ * wd_);
    m_[i] = nn::round_to_float(beta1_ * m_[i] + (1.0 - beta1_) * g);
    v_[i] = nn::round_to_float(beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g));
    w.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    w = nn::round_to_float(std::move(w));
  }
}

StepLosses training_step(Model& model, AdamW& opt, std::span<const PairSample> batch, RngStreams& rng) {
  model.params.zero_grad();
  ForwardResult r = forward(model, batch, rng.mask, rng.latent);
  StepLosses out;
  out.recon = r.recon.item();
  out.kl = r.kl.defined() ? r.kl.item() : 0.0;
  out.total = r.total.item();
  if (!std::isfinite(out.recon) || !std::isfinite(out.kl) || !std::isfinite(out.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at optimizer step " << opt.steps() + 1 << " (recon=" << out.recon << ", kl=" << out.kl
        << ", total=" << out.total << ")";
    fail(ErrorKind::Numeric, msg.str());
  }
  ad::backward(r.total);
  for (const auto& p : model.params.items()) {
    if (p.var.has_grad() && !p.var.grad().allFinite())
      fail(ErrorKind::Numeric, "non-finite gradient for " + p.name + " at optimizer step " +
                                   std::to_string(opt.steps() + 1));
  }
  opt.step(model.params);
  return out;
}

// ---- augmentation ----

Volume flip_w(const Volume& v) {
  Volume out = v;
  for (int d = 0; d < v.dims.d; ++d)
    for (int h = 0; h < v.dims.h; ++h)
      for (int w = 0; w < v.dims.w; ++w) out.at(d, h, w) = v.at(d, h, v.dims.w - 1 - w);
  return out;
}

namespace {

struct CropBox {
  double start[3];
  double extent[3];
};

Volume crop_resize(const Volume& v, const CropBox& box) {
  Volume out = Volume::zeros(v.dims);
  const int dims[3] = {v.dims.d, v.dims.h, v.dims.w};
  // Output voxel centre o maps to start + (o + 0.5)·extent/size − 0.5 in input coordinates.
  std::vector<int> lo[3], hi[3];
  std::vector<double> frac[3];
  for (int a = 0; a < 3; ++a) {
    for (int o = 0; o < dims[a]; ++o) {
      double x = box.start[a] + (o + 0.5) * box.extent[a] / dims[a] - 0.5;
      x = std::clamp(x, 0.0, static_cast<double>(dims[a] - 1));
      const int l = static_cast<int>(std::floor(x));
      lo[a].push_back(l);
      hi[a].push_back(std::min(l + 1, dims[a] - 1));
      frac[a].push_back(x - l);
    }
  }
  for (int d = 0; d < dims[0]; ++d)
    for (int h = 0; h < dims[1]; ++h)
      for (int w = 0; w < dims[2]; ++w) {
        double acc = 0.0;
        for (int cd = 0; cd < 2; ++cd)
          for (int ch = 0; ch < 2; ++ch)
            for (int cw = 0; cw < 2; ++cw) {
              const double wt = (cd ? frac[0][d] : 1.0 - frac[0][d]) * (ch ? frac[1][h] : 1.0 - frac[1][h]) *
                                (cw ? frac[2][w] : 1.0 - frac[2][w]);
              if (wt == 0.0) continue;
              acc += wt * v.at(cd ? hi[0][d] : lo[0][d], ch ? hi[1][h] : lo[1][h], cw ? hi[2][w] : lo[2][w]);
            }
        out.at(d, h, w) = static_cast<float>(acc);
      }
  return out;
}

Volume jitter(const Volume& v, double contrast, double brightness) {
  double mean = 0.0;
  for (float x : v.voxels) mean += x;
  mean /= static_cast<double>(v.voxels.size());
  Volume out = v;
  for (float& x : out.voxels) x = static_cast<float>(std::clamp((x - mean) * contrast + mean + brightness, 0.0, 1.0));
  return out;
}

}  // namespace

PairSample augment(const PairSample& pair, const AugmentFlags& flags, std::mt19937_64& rng,
                   const ForcedAugment& forced) {
  check(pair.past.dims == pair.future.dims, ErrorKind::Shape, "augment: pair volumes differ in shape");
  PairSample out = pair;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  if (flags.crop && flags.crop_max > 0.0) {
    const int dims[3] = {pair.past.dims.d, pair.past.dims.h, pair.past.dims.w};
    CropBox box{};
    for (int a = 0; a < 3; ++a) {
      box.extent[a] = dims[a] * (1.0 - flags.crop_max * u01(rng));
      box.start[a] = (dims[a] - box.extent[a]) * u01(rng);
    }
    out.past = crop_resize(out.past, box);
    out.future = crop_resize(out.future, box);
  }
  bool flip_past = false, flip_future = false;
  if (flags.flip) {
    flip_past = u01(rng) < 0.5;
    flip_future = flags.joint_flip ? flip_past : u01(rng) < 0.5;
  }
  if (forced.flip_past) flip_past = *forced.flip_past;
  if (forced.flip_future) flip_future = *forced.flip_future;
  if (flip_past) out.past = flip_w(out.past);
  if (flip_future) out.future = flip_w(out.future);
  if (flags.jitter) {
    for (Volume* v : {&out.past, &out.future}) {
      const double c = 1.0 + flags.jitter_contrast * (2.0 * u01(rng) - 1.0);
      const double b = flags.jitter_brightness * (2.0 * u01(rng) - 1.0);
      *v = jitter(*v, c, b);
    }
  }
  return out;
}

std::vector<PairSample> sample_epoch_pairs(const synthvol::VisitSource& source, const TrainConfig& cfg,
                                           std::mt19937_64& rng) {
  const std::size_t patients = source.patient_count();
  check(patients > 0, ErrorKind::Data, "pretraining source has no patients");
  std::vector<std::size_t> order;
  for (int rep = 0; rep < cfg.pairs_per_patient; ++rep)
    for (std::size_t p = 0; p < patients; ++p) order.push_back(p);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<PairSample> pairs;
  pairs.reserve(order.size());
  for (std::size_t p : order) {
    const auto visits = source.visits(p);
    const auto pick = synthvol::choose_pair(visits, cfg.dt_min, cfg.dt_max, rng, source.patient_id(p));
    const auto index_of = [&](double t) {
      return static_cast<std::size_t>(std::find(visits.begin(), visits.end(), t) - visits.begin());
    };
    PairSample s;
    s.past = source.volume(p, index_of(pick.past_time));
    s.future = source.volume(p, index_of(pick.future_time));
    s.delta_t = pick.future_time - pick.past_time;
    s.t = pick.past_time;
    s.patient_id = source.patient_id(p);
    pairs.push_back(std::move(s));
  }
  return pairs;
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[4] = {'S', 'T', 'M', 'P'};

std::uint64_t fnv1a(std::span<const unsigned char> bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

class Writer {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
  void floats(const Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const float f = static_cast<float>(m.data()[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      u32(bits);
    }
  }
  std::vector<unsigned char> out;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> b) : bytes(b) {}
  void need(std::size_t n) const {
    check(pos + n <= bytes.size(), ErrorKind::Checkpoint, "checkpoint truncated at byte " + std::to_string(pos));
  }
  std::uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos++]) << (8 * i);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
  Matrix floats(std::uint32_t rows, std::uint32_t cols) {
    need(static_cast<std::size_t>(rows) * cols * 4);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const std::uint32_t bits = u32();
      float f;
      std::memcpy(&f, &bits, 4);
      m.data()[i] = f;
    }
    return m;
  }
  std::span<const unsigned char> bytes;
  std::size_t pos = 0;
};

}  // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(Checkpoint::kVersion);
  w.str(ckpt.config_text);
  w.u64(ckpt.epoch);
  w.str(ckpt.rng_state);
  w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& t : ckpt.params) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.value.rows()));
    w.u32(static_cast<std::uint32_t>(t.value.cols()));
    w.u8(t.decay ? 1 : 0);
    w.floats(t.value);
  }
  w.u64(ckpt.optimizer_steps);
  w.u32(static_cast<std::uint32_t>(ckpt.first_moments.size()));
  for (std::size_t i = 0; i < ckpt.first_moments.size(); ++i) {
    w.floats(ckpt.first_moments[i]);
    w.floats(ckpt.second_moments[i]);
  }
  w.u64(fnv1a(w.out));
  return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  check(bytes.size() >= 16, ErrorKind::Checkpoint, "checkpoint too short");
  check(std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorKind::Checkpoint, "not a checkpoint (bad magic)");
  Reader r(bytes.first(bytes.size() - 8));
  r.pos = 4;
  const std::uint32_t version = r.u32();
  check(version == Checkpoint::kVersion, ErrorKind::Checkpoint,
        "unsupported checkpoint version " + std::to_string(version) + " (expected " +
            std::to_string(Checkpoint::kVersion) + ")");
  Reader tail(bytes.last(8));
  check(tail.u64() == fnv1a(bytes.first(bytes.size() - 8)), ErrorKind::Checkpoint, "checkpoint checksum mismatch");
  Checkpoint c;
  c.config_text = r.str();
  c.epoch = r.u64();
  c.rng_state = r.str();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Checkpoint::Tensor t;
    t.name = r.str();
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    t.decay = r.u8() != 0;
    t.value = r.floats(rows, cols);
    c.params.push_back(std::move(t));
  }
  c.optimizer_steps = r.u64();
  const std::uint32_t moments = r.u32();
  check(moments == 0 || moments == count, ErrorKind::Checkpoint, "optimizer state does not match parameter table");
  for (std::uint32_t i = 0; i < moments; ++i) {
    const auto rows = static_cast<std::uint32_t>(c.params[i].value.rows());
    const auto cols = static_cast<std::uint32_t>(c.params[i].value.cols());
    c.first_moments.push_back(r.floats(rows, cols));
    c.second_moments.push_back(r.floats(rows, cols));
  }
  check(r.pos == r.bytes.size(), ErrorKind::Checkpoint, "trailing bytes in checkpoint");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  // Write-then-rename keeps the previous checkpoint intact if writing fails.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    check(static_cast<bool>(out), ErrorKind::Checkpoint, "cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    check(static_cast<bool>(out), ErrorKind::Checkpoint, "failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  check(static_cast<bool>(in), ErrorKind::Checkpoint, "cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const Error& e) {
    fail(ErrorKind::Checkpoint, path.string() + ": " + e.what());
  }
}

Checkpoint snapshot(const Model& model, const AdamW& opt, const RngStreams& rng, std::uint64_t epoch) {
  Checkpoint c;
  c.config_text = config::emit_train_config(model.cfg);
  c.epoch = epoch;
  c.rng_state = rng.serialize();
  for (const auto& p : model.params.items()) c.params.push_back({p.name, p.decay, p.var.value()});
  c.optimizer_steps = opt.steps();
  c.first_moments = opt.first_moments();
  c.second_moments = opt.second_moments();
  return c;
}

Restored restore(const Checkpoint& ckpt) {
  TrainConfig cfg;
  try {
    cfg = config::parse_train_config(ckpt.config_text);
  } catch (const Error& e) {
    fail(ErrorKind::Checkpoint, std::string("checkpoint carries an invalid configuration: ") + e.what());
  }
  Restored r;
  std::mt19937_64 scratch(0);
  r.model = Model::create(cfg, scratch);
  auto& items = r.model->params.items();
  check(items.size() == ckpt.params.size(), ErrorKind::Checkpoint,
        "checkpoint parameter table does not match its configuration");
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& t = ckpt.params[i];
    check(items[i].name == t.name && items[i].var.rows() == t.value.rows() && items[i].var.cols() == t.value.cols(),
          ErrorKind::Checkpoint, "checkpoint parameter '" + t.name + "' does not match the model layout");
    items[i].var.mutable_value() = t.value;
  }
  r.optimizer = AdamW(r.model->params, cfg.lr, cfg.weight_decay, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  if (!ckpt.first_moments.empty()) {
    r.optimizer.first_moments() = ckpt.first_moments;
    r.optimizer.second_moments() = ckpt.second_moments;
  }
  r.optimizer.set_steps(ckpt.optimizer_steps);
  r.rng = RngStreams::deserialize(ckpt.rng_state);
  r.epoch = ckpt.epoch;
  return r;
}

// ---- epoch loop ----

PretrainResult run_pretrain(const TrainConfig& cfg, const synthvol::VisitSource& source,
                            const PretrainOptions& options) {
  cfg.validate();
  check(source.dims() == cfg.encoder.volume, ErrorKind::Data, "dataset volume shape does not match the encoder");
  PretrainResult res;
  res.rng = RngStreams(cfg.seed);
  res.model = Model::create(cfg, res.rng.init);
  res.optimizer = AdamW(res.model->params, cfg.lr, cfg.weight_decay, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

  const auto write_metrics = [&] {
    if (options.metrics_path.empty()) return;
    std::ofstream out(options.metrics_path, std::ios::trunc);
    check(static_cast<bool>(out), ErrorKind::Data, "cannot write metrics " + options.metrics_path.string());
    out << metrics_csv(res.metrics, options.header_lines);
  };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    auto pairs = sample_epoch_pairs(source, cfg, res.rng.data);
    for (auto& p : pairs) p = augment(p, cfg.augment, res.rng.data);
    double recon = 0.0, kl = 0.0, total = 0.0;
    for (std::size_t b = 0; b < pairs.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t len = std::min(pairs.size() - b, static_cast<std::size_t>(cfg.batch_size));
      StepLosses l;
      try {
        l = training_step(*res.model, res.optimizer, std::span(pairs).subspan(b, len), res.rng);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::Numeric) throw;
        std::string msg = "epoch " + std::to_string(epoch) + ": " + e.what();
        if (!options.checkpoint_path.empty()) msg += "; last good checkpoint kept at " + options.checkpoint_path.string();
        write_metrics();
        fail(ErrorKind::Numeric, msg);
      }
      recon += l.recon * static_cast<double>(len);
      kl += l.kl * static_cast<double>(len);
      total += l.total * static_cast<double>(len);
    }
    const double count = static_cast<double>(pairs.size());
    EpochMetrics m;
    m.epoch = epoch;
    m.recon = recon / count;
    m.kl = kl / count;
    m.total = total / count;
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    res.metrics.push_back(m);
    if (options.on_epoch) options.on_epoch(m);
    if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && !options.checkpoint_path.empty())
      save_checkpoint(options.checkpoint_path,
                      snapshot(*res.model, res.optimizer, res.rng, static_cast<std::uint64_t>(epoch)));
  }
  res.checkpoint = snapshot(*res.model, res.optimizer, res.rng, static_cast<std::uint64_t>(cfg.epochs));
  if (!options.checkpoint_path.empty()) save_checkpoint(options.checkpoint_path, res.checkpoint);
  write_metrics();
  return res;
}

std::string metrics_csv(std::span<const EpochMetrics> metrics, std::span<const std::string> header_lines) {
  std::ostringstream out;
  for (const auto& line : header_lines) out << "# " << line << '\n';
  out << "epoch,recon,kl,total,wall_ms\n";
  char buf[160];
  for (const auto& m : metrics) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.1f\n", m.epoch, m.recon, m.kl, m.total, m.wall_ms);
    out << buf;
  }
  return out.str();
}

std::vector<double> smooth(std::span<const double> values, int window) {
  check(window > 0, ErrorKind::Usage, "smoothing window must be positive");
  std::vector<double> out;
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    acc += values[i];
    if (i >= static_cast<std::size_t>(window)) acc -= values[i - static_cast<std::size_t>(window)];
    out.push_back(acc / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window))));
  }
  return out;
}

}  // namespace stamp::trainer
