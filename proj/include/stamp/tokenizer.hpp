#pragma once

// 3-D patchification, fixed sin-cos position codes and random token masking.

#include "stamp/autodiff.hpp"
#include "stamp/synthvol.hpp"

#include <random>
#include <vector>

namespace stamp::tokenizer {

using ad::Matrix;
using synthvol::Dims3;
using synthvol::Volume;

struct TokenGrid {
  Matrix tokens;     // N × token width, rows ordered row-major over (d, h, w)
  Dims3 grid;        // (n_d, n_h, n_w)
  Dims3 patch;       // (p_d, p_h, p_w)
  bool raw = true;   // false once projected to the embedding width

  std::size_t count() const { return grid.voxel_count(); }
};

Dims3 grid_dims(Dims3 volume, Dims3 patch);

TokenGrid patchify(const Volume& v, Dims3 patch);
Volume unpatchify(const TokenGrid& g);

/// Fixed 3-D sin-cos codes: per-axis 1-D codes of width dim/3 concatenated in
/// (d, h, w) order. Throws a configuration error unless dim is divisible by 6.
Matrix sincos_pos3d(Dims3 grid, int dim);

/// Same construction on the largest multiple of 6 not above `dim`; trailing
/// columns are zero. Equal to sincos_pos3d when dim is divisible by 6.
Matrix sincos_pos3d_padded(Dims3 grid, int dim);

/// 1-D sin-cos code (MAE convention: sines then cosines, base 10000).
Matrix sincos_pos1d(int positions, int dim);

struct MaskSet {
  std::vector<int> masked;  // sorted, unique
  int total = 0;
  double ratio = 0.0;

  std::vector<int> visible() const;
  bool is_masked(int index) const;
};

/// Number of masked tokens: round-half-up of ratio·n.
int mask_count(int n, double ratio);

MaskSet random_mask(int n, double ratio, std::mt19937_64& rng);

}  // namespace stamp::tokenizer
