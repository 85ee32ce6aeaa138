#include "stamp/decoder.hpp"

#include "stamp/errors.hpp"

#include <cmath>

namespace stamp::decoder {

namespace {

Matrix normalize_patches(const Matrix& raw) {
  Matrix out = raw;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double mu = out.row(r).mean();
    const double var = (out.row(r).array() - mu).square().mean();
    out.row(r) = (out.row(r).array() - mu) / std::sqrt(var + 1e-6);
  }
  return out;
}

}  // namespace

void DecoderConfig::validate() const {
  check(depth > 0, ErrorKind::Config, "decoder depth must be positive");
  check(embed_dim > 0 && heads > 0 && embed_dim % heads == 0, ErrorKind::Config,
        "decoder embed_dim must be divisible by heads");
  check(mlp_ratio > 0, ErrorKind::Config, "decoder mlp_ratio must be positive");
}

Var DecoderBlock::operator()(const Var& x, const Var* memory, int groups) const {
  Var y = x;
  if (cross) {
    check(memory != nullptr, ErrorKind::Usage, "cross-attention block needs a key/value memory");
    y = ad::add(y, (*cross)((*norm_query)(y), (*norm_memory)(*memory), groups));
  }
  Var h = norm_self(y);
  y = ad::add(y, self(h, h, groups));
  return ad::add(y, mlp(norm_mlp(y)));
}

Decoder Decoder::create(nn::ParameterSet& params, const DecoderConfig& cfg, int encoder_dim, Dims3 grid,
                        int patch_voxels, std::mt19937_64& rng) {
  cfg.validate();
  Decoder dec;
  dec.cfg_ = cfg;
  const int d = cfg.embed_dim;
  dec.embed_ = nn::Linear::create(params, "decoder.embed", encoder_dim, d, rng);
  dec.mask_token_ = params.add("decoder.mask_token", nn::truncated_normal(1, d, 0.02, rng), false);
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string name = "decoder.block" + std::to_string(i);
    DecoderBlock b;
    if (cfg.cross_attention) {
      b.norm_query = nn::LayerNorm::create(params, name + ".norm_query", d);
      b.norm_memory = nn::LayerNorm::create(params, name + ".norm_memory", d);
      b.cross = nn::MultiHeadAttention::create(params, name + ".cross", d, cfg.heads, rng);
    }
    b.norm_self = nn::LayerNorm::create(params, name + ".norm_self", d);
    b.self = nn::MultiHeadAttention::create(params, name + ".self", d, cfg.heads, rng);
    b.norm_mlp = nn::LayerNorm::create(params, name + ".norm_mlp", d);
    b.mlp = nn::Mlp2::create(params, name + ".mlp", d, d * cfg.mlp_ratio, d, nn::Activation::Gelu, rng);
    dec.blocks_.push_back(std::move(b));
  }
  dec.norm_ = nn::LayerNorm::create(params, "decoder.norm", d);
  dec.head_ = nn::Linear::create(params, "decoder.head", d, patch_voxels, rng);
  dec.pos_ = tokenizer::sincos_pos3d_padded(grid, d);
  return dec;
}

Var Decoder::queries(const Embeddings& visible, std::span<const tokenizer::MaskSet> masks) const {
  const int batch = visible.batch;
  const int n = token_count();
  check(static_cast<int>(masks.size()) == batch, ErrorKind::Shape, "decode: one mask per sample required");
  const int keep = visible.patch_count();
  // Visible patch rows (CLS dropped) projected to the decoder width.
  std::vector<Eigen::Index> patch_rows;
  patch_rows.reserve(static_cast<std::size_t>(batch * keep));
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < keep; ++i) patch_rows.push_back(static_cast<Eigen::Index>(b) * visible.length + 1 + i);
  Var projected = embed_(ad::gather_rows(visible.tokens, patch_rows));

  std::vector<ad::RowRef> refs;
  refs.reserve(static_cast<std::size_t>(batch * n));
  for (int b = 0; b < batch; ++b) {
    const auto& m = masks[static_cast<std::size_t>(b)];
    check(m.total == n && n - static_cast<int>(m.masked.size()) == keep, ErrorKind::Shape,
          "decode: mask inconsistent with the visible token count");
    int next_visible = 0;
    for (int i = 0; i < n; ++i) {
      if (m.is_masked(i)) {
        refs.push_back({1, 0});
      } else {
        refs.push_back({0, static_cast<Eigen::Index>(b) * keep + next_visible++});
      }
    }
  }
  const Var sources[] = {projected, mask_token_};
  Var q = ad::assemble_rows(sources, refs);
  Matrix pos(static_cast<Eigen::Index>(batch) * n, cfg_.embed_dim);
  for (int b = 0; b < batch; ++b) pos.middleRows(static_cast<Eigen::Index>(b) * n, n) = pos_;
  return ad::add(q, ad::constant(std::move(pos)));
}

Var Decoder::finish(Var x, int groups, const Var* memory) const {
  for (const auto& block : blocks_) x = block(x, memory, groups);
  return head_(norm_(x));
}

Var Decoder::decode(const Embeddings& past, const Var* z_hat, const Embeddings& future_visible,
                    std::span<const tokenizer::MaskSet> masks, const Var* te2) const {
  check(cfg_.cross_attention, ErrorKind::Usage, "decode: this decoder has no cross-attention");
  check(past.source == backbone::EmbeddingSource::PastFull, ErrorKind::Usage, "decode: memory must be the past branch");
  check(future_visible.source == backbone::EmbeddingSource::FutureVisible, ErrorKind::Usage,
        "decode: queries must come from the masked future branch");
  const int batch = past.batch;
  const int n = token_count();
  check(future_visible.batch == batch && past.patch_count() == n, ErrorKind::Shape,
        "decode: past/future batch or token count mismatch");

  Var cls = past.cls();
  if (te2) cls = ad::add(cls, *te2);

  // Memory rows per sample: [ẑ], CLS_t (+TE), past patches.
  std::vector<Var> sources = {past.tokens, cls};
  if (z_hat) {
    check(z_hat->rows() == batch && z_hat->cols() == past.tokens.cols(), ErrorKind::Shape,
          "decode: stochastic token must be batch × encoder width");
    sources.push_back(*z_hat);
  }
  const int extra = z_hat ? 2 : 1;
  const int mem_len = n + extra;
  std::vector<ad::RowRef> refs;
  refs.reserve(static_cast<std::size_t>(batch * mem_len));
  for (int b = 0; b < batch; ++b) {
    if (z_hat) refs.push_back({2, b});
    refs.push_back({1, b});
    for (int i = 0; i < n; ++i) refs.push_back({0, static_cast<Eigen::Index>(b) * past.length + 1 + i});
  }
  Var memory = embed_(ad::assemble_rows(sources, refs));
  Matrix pos = Matrix::Zero(static_cast<Eigen::Index>(batch) * mem_len, cfg_.embed_dim);
  for (int b = 0; b < batch; ++b) pos.middleRows(static_cast<Eigen::Index>(b) * mem_len + extra, n) = pos_;
  memory = ad::add(memory, ad::constant(std::move(pos)));

  return finish(queries(future_visible, masks), batch, &memory);
}

Var Decoder::decode_masked(const Embeddings& visible, std::span<const tokenizer::MaskSet> masks) const {
  check(!cfg_.cross_attention, ErrorKind::Usage, "decode_masked: use decode() for the cross-attention decoder");
  return finish(queries(visible, masks), visible.batch, nullptr);
}

Var recon_loss(const Var& pred, std::span<const tokenizer::TokenGrid> targets,
               std::span<const tokenizer::MaskSet> masks, bool norm_pix) {
  const int batch = static_cast<int>(targets.size());
  check(batch > 0 && static_cast<int>(masks.size()) == batch, ErrorKind::Shape, "recon_loss: batch mismatch");
  const Eigen::Index n = targets[0].tokens.rows();
  const Eigen::Index width = targets[0].tokens.cols();
  check(pred.rows() == batch * n && pred.cols() == width, ErrorKind::Shape, "recon_loss: prediction shape mismatch");
  std::vector<Eigen::Index> rows;
  Eigen::Index masked_total = 0;
  for (int b = 0; b < batch; ++b) masked_total += static_cast<Eigen::Index>(masks[static_cast<std::size_t>(b)].masked.size());
  check(masked_total > 0, ErrorKind::Usage, "recon_loss: empty mask, loss undefined");
  Matrix target(masked_total, width);
  Eigen::Index r = 0;
  for (int b = 0; b < batch; ++b) {
    const auto& g = targets[static_cast<std::size_t>(b)];
    check(g.tokens.rows() == n && g.tokens.cols() == width, ErrorKind::Shape, "recon_loss: target shape mismatch");
    const Matrix tokens = norm_pix ? normalize_patches(g.tokens) : g.tokens;
    for (int m : masks[static_cast<std::size_t>(b)].masked) {
      rows.push_back(static_cast<Eigen::Index>(b) * n + m);
      target.row(r++) = tokens.row(m);
    }
  }
  Var diff = ad::sub(ad::gather_rows(pred, rows), ad::constant(std::move(target)));
  return ad::mean(ad::square(diff));
}

synthvol::Volume reconstruct_volume(const Matrix& pred, const tokenizer::TokenGrid& target,
                                    const tokenizer::MaskSet& mask) {
  check(pred.rows() == target.tokens.rows() && pred.cols() == target.tokens.cols(), ErrorKind::Shape,
        "reconstruct_volume: prediction shape mismatch");
  tokenizer::TokenGrid out = target;
  for (int m : mask.masked) out.tokens.row(m) = pred.row(m).cwiseMax(0.0).cwiseMin(1.0);
  return tokenizer::unpatchify(out);
}

}  // namespace stamp::decoder
