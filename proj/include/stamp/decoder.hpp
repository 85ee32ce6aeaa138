#pragma once

// Cross-time completion decoder: future-side queries (visible tokens and MASK
// tokens at their grid positions) attend to [ẑ, CLS_t + TE, past patches].

#include "stamp/backbone.hpp"
#include "stamp/nn.hpp"
#include "stamp/tokenizer.hpp"

#include <optional>
#include <random>
#include <span>
#include <vector>

namespace stamp::decoder {

using ad::Matrix;
using ad::Var;
using backbone::Embeddings;
using synthvol::Dims3;

struct DecoderConfig {
  int depth = 2;
  int embed_dim = 32;
  int heads = 4;
  int mlp_ratio = 4;
  bool cross_attention = true;  // false: self-attention-only decoder (MAE mode)
  bool norm_pix = false;        // normalize each target patch to zero mean, unit variance

  void validate() const;
};

struct DecoderBlock {
  std::optional<nn::LayerNorm> norm_query;
  std::optional<nn::LayerNorm> norm_memory;
  std::optional<nn::MultiHeadAttention> cross;
  nn::LayerNorm norm_self;
  nn::MultiHeadAttention self;
  nn::LayerNorm norm_mlp;
  nn::Mlp2 mlp;

  /// `memory` holds `groups` equal-length key/value sequences (ignored when
  /// the block has no cross-attention).
  Var operator()(const Var& x, const Var* memory, int groups) const;
};

class Decoder {
 public:
  static Decoder create(nn::ParameterSet& params, const DecoderConfig& cfg, int encoder_dim, Dims3 grid,
                        int patch_voxels, std::mt19937_64& rng);

  /// Siamese decoding. `z_hat` (batch × encoder_dim) is optional; when given
  /// it becomes the first key/value token. `te2` (batch × encoder_dim) is
  /// added to CLS_t before decoding. Returns (batch·N) × patch voxels.
  Var decode(const Embeddings& past, const Var* z_hat, const Embeddings& future_visible,
             std::span<const tokenizer::MaskSet> masks, const Var* te2) const;

  /// Self-attention decoding of a single masked volume (MAE mode).
  Var decode_masked(const Embeddings& visible, std::span<const tokenizer::MaskSet> masks) const;

  const DecoderConfig& config() const { return cfg_; }
  const nn::Linear& head() const { return head_; }
  const std::vector<DecoderBlock>& blocks() const { return blocks_; }
  int token_count() const { return static_cast<int>(pos_.rows()); }

 private:
  Var queries(const Embeddings& visible, std::span<const tokenizer::MaskSet> masks) const;
  Var finish(Var x, int groups, const Var* memory) const;

  DecoderConfig cfg_;
  nn::Linear embed_;
  Var mask_token_;
  std::vector<DecoderBlock> blocks_;
  nn::LayerNorm norm_;
  nn::Linear head_;
  Matrix pos_;
};

/// Mean over masked patches (and over the batch) of the per-patch mean
/// squared voxel error. Visible patches contribute nothing.
Var recon_loss(const Var& pred, std::span<const tokenizer::TokenGrid> targets,
               std::span<const tokenizer::MaskSet> masks, bool norm_pix = false);

/// Prediction for masked patches, target content elsewhere.
synthvol::Volume reconstruct_volume(const Matrix& pred, const tokenizer::TokenGrid& target,
                                    const tokenizer::MaskSet& mask);

}  // namespace stamp::decoder
