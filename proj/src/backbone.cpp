#include "stamp/backbone.hpp"

#include "stamp/errors.hpp"

namespace stamp::backbone {

void EncoderConfig::validate() const {
  check(depth > 0, ErrorKind::Config, "encoder depth must be positive");
  check(embed_dim > 0 && heads > 0 && embed_dim % heads == 0, ErrorKind::Config,
        "encoder embed_dim must be divisible by heads");
  check(mlp_ratio > 0, ErrorKind::Config, "mlp_ratio must be positive");
  try {
    (void)grid();
  } catch (const Error& e) {
    fail(ErrorKind::Config, e.what());
  }
}

Var Embeddings::cls() const {
  std::vector<Eigen::Index> rows;
  for (int b = 0; b < batch; ++b) rows.push_back(static_cast<Eigen::Index>(b) * length);
  return ad::gather_rows(tokens, rows);
}

Var Embeddings::sample(int b) const { return ad::slice_rows(tokens, static_cast<Eigen::Index>(b) * length, length); }

Var EncoderBlock::operator()(const Var& x, int groups, std::vector<Matrix>* attention) const {
  Var h = norm1(x);
  Var y = ad::add(x, attn(h, h, groups, attention));
  return ad::add(y, mlp(norm2(y)));
}

Encoder Encoder::create(nn::ParameterSet& params, const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  Encoder e;
  e.cfg_ = cfg;
  const int d = cfg.embed_dim;
  e.patch_proj_ = nn::Linear::create(params, "encoder.patch_embed", static_cast<int>(cfg.patch.voxel_count()), d, rng);
  e.cls_ = params.add("encoder.cls", nn::truncated_normal(1, d, 0.02, rng), false);
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string name = "encoder.block" + std::to_string(i);
    EncoderBlock b;
    b.norm1 = nn::LayerNorm::create(params, name + ".norm1", d);
    b.attn = nn::MultiHeadAttention::create(params, name + ".attn", d, cfg.heads, rng);
    b.norm2 = nn::LayerNorm::create(params, name + ".norm2", d);
    b.mlp = nn::Mlp2::create(params, name + ".mlp", d, d * cfg.mlp_ratio, d, nn::Activation::Gelu, rng);
    e.blocks_.push_back(std::move(b));
  }
  if (cfg.final_norm) e.final_norm_ = nn::LayerNorm::create(params, "encoder.norm", d);
  e.pos_ = tokenizer::sincos_pos3d_padded(cfg.grid(), d);
  return e;
}

Embeddings Encoder::encode(std::span<const tokenizer::TokenGrid> grids, EmbeddingSource source,
                           std::span<const tokenizer::MaskSet> masks, const Var* te_bias,
                           std::vector<Matrix>* last_attention) const {
  const int batch = static_cast<int>(grids.size());
  check(batch > 0, ErrorKind::Usage, "encode: empty batch");
  const int n = cfg_.token_count();
  const Eigen::Index token_width = static_cast<Eigen::Index>(cfg_.patch.voxel_count());
  if (source == EmbeddingSource::PastFull) {
    check(masks.empty(), ErrorKind::Usage, "encode: the past branch is never masked");
  } else {
    check(te_bias == nullptr, ErrorKind::Usage, "encode: temporal bias only applies to the past branch");
    check(static_cast<int>(masks.size()) == batch, ErrorKind::Usage, "encode: one mask per future volume required");
  }

  // Gather the tokens that enter the encoder, with their position codes.
  int keep = n;
  if (!masks.empty()) keep = n - static_cast<int>(masks[0].masked.size());
  Matrix raw(static_cast<Eigen::Index>(batch) * keep, token_width);
  Matrix pos(static_cast<Eigen::Index>(batch) * keep, cfg_.embed_dim);
  for (int b = 0; b < batch; ++b) {
    const auto& g = grids[static_cast<std::size_t>(b)];
    check(g.raw && g.tokens.rows() == n && g.tokens.cols() == token_width, ErrorKind::Shape,
          "encode: token grid does not match the encoder's patch layout");
    std::vector<int> rows;
    if (masks.empty()) {
      rows.resize(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = i;
    } else {
      const auto& m = masks[static_cast<std::size_t>(b)];
      check(m.total == n, ErrorKind::Shape, "encode: mask covers a different token count");
      rows = m.visible();
      check(static_cast<int>(rows.size()) == keep, ErrorKind::Shape, "encode: masks differ in visible count");
    }
    for (int i = 0; i < keep; ++i) {
      const Eigen::Index dst = static_cast<Eigen::Index>(b) * keep + i;
      raw.row(dst) = g.tokens.row(rows[static_cast<std::size_t>(i)]);
      pos.row(dst) = pos_.row(rows[static_cast<std::size_t>(i)]);
    }
  }
  Var x = ad::add(patch_proj_(ad::constant(std::move(raw))), ad::constant(std::move(pos)));

  Var cls_rows;
  if (te_bias) {
    check(te_bias->rows() == batch && te_bias->cols() == cfg_.embed_dim, ErrorKind::Shape,
          "encode: temporal bias must be batch × embed_dim");
    cls_rows = ad::add_row(*te_bias, cls_);
  } else {
    std::vector<ad::RowRef> refs(static_cast<std::size_t>(batch), ad::RowRef{0, 0});
    const Var src[] = {cls_};
    cls_rows = ad::assemble_rows(src, refs);
  }

  const int length = keep + 1;
  std::vector<ad::RowRef> refs;
  refs.reserve(static_cast<std::size_t>(batch * length));
  for (int b = 0; b < batch; ++b) {
    refs.push_back({0, b});
    for (int i = 0; i < keep; ++i) refs.push_back({1, static_cast<Eigen::Index>(b) * keep + i});
  }
  const Var parts[] = {cls_rows, x};
  Var h = ad::assemble_rows(parts, refs);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const bool last = i + 1 == blocks_.size();
    h = blocks_[i](h, batch, last ? last_attention : nullptr);
  }
  if (final_norm_) h = (*final_norm_)(h);
  return Embeddings{h, batch, length, source};
}

Matrix cls_attention_grid(const Encoder& encoder, const tokenizer::TokenGrid& grid, const Var* te_bias) {
  ad::NoGradGuard no_grad;
  std::vector<Matrix> weights;
  const tokenizer::TokenGrid grids[] = {grid};
  (void)encoder.encode(grids, EmbeddingSource::PastFull, {}, te_bias, &weights);
  const int n = encoder.config().token_count();
  Matrix avg = Matrix::Zero(1, n);
  for (const Matrix& w : weights) avg += w.block(0, 1, 1, n);
  avg /= static_cast<double>(weights.size());
  avg /= avg.sum();
  return avg;
}

synthvol::Volume upsample_to_volume(const Matrix& grid_values, Dims3 grid, Dims3 patch) {
  check(grid_values.size() == static_cast<Eigen::Index>(grid.voxel_count()), ErrorKind::Shape,
        "attention grid size does not match token grid");
  synthvol::Volume v = synthvol::Volume::zeros({grid.d * patch.d, grid.h * patch.h, grid.w * patch.w});
  for (int d = 0; d < v.dims.d; ++d)
    for (int h = 0; h < v.dims.h; ++h)
      for (int w = 0; w < v.dims.w; ++w) {
        const Eigen::Index t = (static_cast<Eigen::Index>(d / patch.d) * grid.h + h / patch.h) * grid.w + w / patch.w;
        v.at(d, h, w) = static_cast<float>(grid_values.data()[t]);
      }
  return v;
}

}  // namespace stamp::backbone
