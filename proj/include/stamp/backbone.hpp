#pragma once

// Siamese ViT encoder: one parameter set serves both the fully visible past
// volume and the masked future volume.

#include "stamp/nn.hpp"
#include "stamp/tokenizer.hpp"

#include <optional>
#include <random>
#include <span>
#include <vector>

namespace stamp::backbone {

using ad::Matrix;
using ad::Var;
using synthvol::Dims3;

struct EncoderConfig {
  int depth = 4;
  int embed_dim = 64;
  int heads = 4;
  int mlp_ratio = 4;
  Dims3 volume{16, 32, 32};
  Dims3 patch{4, 8, 8};
  bool final_norm = true;

  Dims3 grid() const { return tokenizer::grid_dims(volume, patch); }
  int token_count() const { return static_cast<int>(grid().voxel_count()); }
  void validate() const;
};

enum class EmbeddingSource { PastFull, FutureVisible };

/// Encoder output for a batch: `length` rows per sample, the first of which is
/// the CLS token.
struct Embeddings {
  Var tokens;
  int batch = 0;
  int length = 0;
  EmbeddingSource source = EmbeddingSource::PastFull;

  int patch_count() const { return length - 1; }
  /// batch × dim rows of CLS tokens.
  Var cls() const;
  /// Sample `b` as a (length × dim) block.
  Var sample(int b) const;
};

struct EncoderBlock {
  nn::LayerNorm norm1;
  nn::MultiHeadAttention attn;
  nn::LayerNorm norm2;
  nn::Mlp2 mlp;

  /// Pre-norm residual block over `groups` equal-length sequences.
  Var operator()(const Var& x, int groups, std::vector<Matrix>* attention = nullptr) const;
};

class Encoder {
 public:
  static Encoder create(nn::ParameterSet& params, const EncoderConfig& cfg, std::mt19937_64& rng);

  /// Embeds raw patch grids. For the future branch `masks` holds one mask per
  /// grid and only visible tokens are encoded; the past branch takes every
  /// token and may carry a temporal bias (batch × dim) added to CLS.
  Embeddings encode(std::span<const tokenizer::TokenGrid> grids, EmbeddingSource source,
                    std::span<const tokenizer::MaskSet> masks = {}, const Var* te_bias = nullptr,
                    std::vector<Matrix>* last_attention = nullptr) const;

  const EncoderConfig& config() const { return cfg_; }
  const Matrix& positions() const { return pos_; }
  const Var& cls_token() const { return cls_; }
  const nn::Linear& patch_projection() const { return patch_proj_; }
  const std::vector<EncoderBlock>& blocks() const { return blocks_; }

 private:
  EncoderConfig cfg_;
  nn::Linear patch_proj_;
  Var cls_;
  std::vector<EncoderBlock> blocks_;
  std::optional<nn::LayerNorm> final_norm_;
  Matrix pos_;
};

/// Last-block attention of the CLS query over patch keys, averaged across
/// heads and renormalized over patches (n_d × n_h × n_w grid, row-major).
Matrix cls_attention_grid(const Encoder& encoder, const tokenizer::TokenGrid& grid, const Var* te_bias);

/// Nearest-neighbour upsampling of a token grid map to volume resolution.
synthvol::Volume upsample_to_volume(const Matrix& grid_values, Dims3 grid, Dims3 patch);

}  // namespace stamp::backbone
