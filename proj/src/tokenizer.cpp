#include "stamp/tokenizer.hpp"

#include "stamp/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace stamp::tokenizer {

Dims3 grid_dims(Dims3 volume, Dims3 patch) {
  check(patch.d > 0 && patch.h > 0 && patch.w > 0, ErrorKind::Shape, "patch dims must be positive");
  check(volume.d % patch.d == 0 && volume.h % patch.h == 0 && volume.w % patch.w == 0, ErrorKind::Shape,
        "volume " + std::to_string(volume.d) + "x" + std::to_string(volume.h) + "x" + std::to_string(volume.w) +
            " not divisible by patch " + std::to_string(patch.d) + "x" + std::to_string(patch.h) + "x" +
            std::to_string(patch.w));
  return {volume.d / patch.d, volume.h / patch.h, volume.w / patch.w};
}

TokenGrid patchify(const Volume& v, Dims3 patch) {
  synthvol::validate(v);
  const Dims3 g = grid_dims(v.dims, patch);
  TokenGrid out{Matrix(static_cast<Eigen::Index>(g.voxel_count()), static_cast<Eigen::Index>(patch.voxel_count())),
                g, patch, true};
  Eigen::Index token = 0;
  for (int gd = 0; gd < g.d; ++gd)
    for (int gh = 0; gh < g.h; ++gh)
      for (int gw = 0; gw < g.w; ++gw, ++token) {
        Eigen::Index col = 0;
        for (int d = 0; d < patch.d; ++d)
          for (int h = 0; h < patch.h; ++h)
            for (int w = 0; w < patch.w; ++w)
              out.tokens(token, col++) = v.at(gd * patch.d + d, gh * patch.h + h, gw * patch.w + w);
      }
  return out;
}

Volume unpatchify(const TokenGrid& g) {
  check(g.raw, ErrorKind::Usage, "unpatchify needs raw patch tokens, not embeddings");
  check(g.tokens.rows() == static_cast<Eigen::Index>(g.grid.voxel_count()) &&
            g.tokens.cols() == static_cast<Eigen::Index>(g.patch.voxel_count()),
        ErrorKind::Shape, "token matrix does not match grid and patch dims");
  Volume v = Volume::zeros({g.grid.d * g.patch.d, g.grid.h * g.patch.h, g.grid.w * g.patch.w});
  Eigen::Index token = 0;
  for (int gd = 0; gd < g.grid.d; ++gd)
    for (int gh = 0; gh < g.grid.h; ++gh)
      for (int gw = 0; gw < g.grid.w; ++gw, ++token) {
        Eigen::Index col = 0;
        for (int d = 0; d < g.patch.d; ++d)
          for (int h = 0; h < g.patch.h; ++h)
            for (int w = 0; w < g.patch.w; ++w)
              v.at(gd * g.patch.d + d, gh * g.patch.h + h, gw * g.patch.w + w) =
                  static_cast<float>(g.tokens(token, col++));
      }
  return v;
}

Matrix sincos_pos1d(int positions, int dim) {
  check(dim % 2 == 0 && dim > 0, ErrorKind::Config, "1-D sin-cos width must be positive and even");
  const int half = dim / 2;
  Matrix out(positions, dim);
  for (int p = 0; p < positions; ++p)
    for (int i = 0; i < half; ++i) {
      const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / half);
      out(p, i) = std::sin(p * omega);
      out(p, half + i) = std::cos(p * omega);
    }
  return out;
}

Matrix sincos_pos3d(Dims3 grid, int dim) {
  check(dim > 0 && dim % 6 == 0, ErrorKind::Config,
        "3-D sin-cos width " + std::to_string(dim) + " is not divisible by 6");
  const int axis = dim / 3;
  const Matrix ed = sincos_pos1d(grid.d, axis);
  const Matrix eh = sincos_pos1d(grid.h, axis);
  const Matrix ew = sincos_pos1d(grid.w, axis);
  Matrix out(static_cast<Eigen::Index>(grid.voxel_count()), dim);
  Eigen::Index row = 0;
  for (int d = 0; d < grid.d; ++d)
    for (int h = 0; h < grid.h; ++h)
      for (int w = 0; w < grid.w; ++w, ++row) {
        out.block(row, 0, 1, axis) = ed.row(d);
        out.block(row, axis, 1, axis) = eh.row(h);
        out.block(row, 2 * axis, 1, axis) = ew.row(w);
      }
  return out;
}

Matrix sincos_pos3d_padded(Dims3 grid, int dim) {
  const int usable = dim - dim % 6;
  check(usable > 0, ErrorKind::Config, "embedding width " + std::to_string(dim) + " too small for 3-D sin-cos");
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(grid.voxel_count()), dim);
  out.leftCols(usable) = sincos_pos3d(grid, usable);
  return out;
}

std::vector<int> MaskSet::visible() const {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(total) - masked.size());
  std::size_t m = 0;
  for (int i = 0; i < total; ++i) {
    if (m < masked.size() && masked[m] == i) {
      ++m;
      continue;
    }
    out.push_back(i);
  }
  return out;
}

bool MaskSet::is_masked(int index) const { return std::binary_search(masked.begin(), masked.end(), index); }

int mask_count(int n, double ratio) { return static_cast<int>(std::floor(ratio * n + 0.5)); }

MaskSet random_mask(int n, double ratio, std::mt19937_64& rng) {
  check(ratio >= 0.0 && ratio < 1.0, ErrorKind::Config,
        "mask ratio " + std::to_string(ratio) + " outside [0,1)");
  check(n > 0, ErrorKind::Config, "token count must be positive");
  const int count = mask_count(n, ratio);
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  // Partial Fisher-Yates: the first `count` slots are a uniform sample.
  for (int i = 0; i < count; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
  }
  MaskSet m;
  m.masked.assign(perm.begin(), perm.begin() + count);
  std::sort(m.masked.begin(), m.masked.end());
  m.total = n;
  m.ratio = ratio;
  return m;
}

}  // namespace stamp::tokenizer
