#include "vndiff/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cstring>
#include <vector>

namespace vndiff::kernels {
namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Per-thread reusable buffers; `slot` separates buffers that are live at the
// same time.
template <typename Real>
Real* scratch(std::size_t n, int slot = 0) {
  thread_local std::vector<Real> buffers[4];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

// Stride-1 convolution on a zero-padded copy of the input. In padded
// coordinates the receptive field of every output voxel is the centre index
// plus a fixed offset per kernel tap, so each column-matrix row is a
// contiguous slice of the padded input. Columns are laid out over the padded
// centre range [first, first + span); entries that do not correspond to a
// real output voxel are computed and discarded (forward) or fed zeros
// (backward).
struct PaddedLayout {
  int p, dp, hp, wp;
  std::ptrdiff_t first, span;
  std::vector<std::ptrdiff_t> offsets;  // per tap, (kd, kh, kw) order

  explicit PaddedLayout(const ConvGeometry& g) {
    p = g.pad();
    dp = g.depth + 2 * p;
    hp = g.height + 2 * p;
    wp = g.width + 2 * p;
    const std::ptrdiff_t sz = static_cast<std::ptrdiff_t>(hp) * wp;
    first = p * sz + p * wp + p;
    const std::ptrdiff_t last = (g.depth - 1 + p) * sz + (g.height - 1 + p) * wp + (g.width - 1 + p);
    span = last - first + 1;
    for (int kd = 0; kd < g.kernel; ++kd)
      for (int kh = 0; kh < g.kernel; ++kh)
        for (int kw = 0; kw < g.kernel; ++kw) offsets.push_back((kd - p) * sz + (kh - p) * wp + (kw - p));
  }
  std::size_t padded_size() const { return static_cast<std::size_t>(dp) * hp * wp; }
  // Padded-centre column of output voxel (z, y, x), relative to `first`.
  std::ptrdiff_t column(int z, int y) const {
    return (static_cast<std::ptrdiff_t>(z) * hp + y) * wp;
  }
};

template <typename Real>
void pad_input(const ConvGeometry& g, const PaddedLayout& L, const Real* x, Real* xp) {
  const std::size_t ps = L.padded_size();
  std::fill(xp, xp + ps * g.in_channels, Real(0));
  for (int c = 0; c < g.in_channels; ++c) {
    for (int z = 0; z < g.depth; ++z)
      for (int y = 0; y < g.height; ++y) {
        const Real* src = x + ((static_cast<std::size_t>(c) * g.depth + z) * g.height + y) * g.width;
        Real* dst = xp + c * ps + (static_cast<std::size_t>(z + L.p) * L.hp + (y + L.p)) * L.wp + L.p;
        std::memcpy(dst, src, sizeof(Real) * g.width);
      }
  }
}

template <typename Real>
void padded_cols(const ConvGeometry& g, const PaddedLayout& L, const Real* xp, std::ptrdiff_t m0,
                 std::ptrdiff_t cols, Real* col) {
  const std::size_t ps = L.padded_size();
  for (int c = 0; c < g.in_channels; ++c) {
    const Real* base = xp + c * ps + L.first + m0;
    for (std::ptrdiff_t off : L.offsets) {
      std::memcpy(col, base + off, sizeof(Real) * cols);
      col += cols;
    }
  }
}

template <typename Real>
std::ptrdiff_t padded_block(const ConvGeometry& g) {
  return std::max<std::ptrdiff_t>(64, static_cast<std::ptrdiff_t>(256 * 1024 / g.patch_size()));
}

// Output columns [lo, hi) along one axis whose input coordinate
// o * stride + k - pad lands inside [0, extent).
inline void valid_range(int out_extent, int extent, int k, int pad, int stride, int& lo,
                        int& hi) {
  lo = 0;
  while (lo < out_extent && lo * stride + k - pad < 0) ++lo;
  hi = out_extent;
  while (hi > lo && (hi - 1) * stride + k - pad >= extent) --hi;
}

// Column matrix restricted to output planes [z0, z1): [patch_size, (z1 - z0) * plane].
template <typename Real>
void im2col(const ConvGeometry& g, const Real* x, int z0, int z1, Real* col) {
  const int k = g.kernel, s = g.stride, p = g.pad();
  const int oh = g.out_height(), ow = g.out_width();
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  const std::size_t no = plane * (z1 - z0);
  Real* dst = col;
  for (int c = 0; c < g.in_channels; ++c) {
    const Real* xc = x + static_cast<std::size_t>(c) * g.in_spatial();
    for (int kd = 0; kd < k; ++kd) {
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw, dst += no) {
          int x_lo, x_hi;
          valid_range(ow, g.width, kw, p, s, x_lo, x_hi);
          for (int z = z0; z < z1; ++z) {
            const int iz = z * s + kd - p;
            Real* row = dst + static_cast<std::size_t>(z - z0) * plane;
            if (iz < 0 || iz >= g.depth) {
              std::fill(row, row + plane, Real(0));
              continue;
            }
            for (int y = 0; y < oh; ++y) {
              const int iy = y * s + kh - p;
              Real* r = row + static_cast<std::size_t>(y) * ow;
              if (iy < 0 || iy >= g.height) {
                std::fill(r, r + ow, Real(0));
                continue;
              }
              const Real* src = xc + (static_cast<std::size_t>(iz) * g.height + iy) * g.width;
              std::fill(r, r + x_lo, Real(0));
              if (s == 1) {
                if (x_hi > x_lo) std::memcpy(r + x_lo, src + x_lo + kw - p, sizeof(Real) * (x_hi - x_lo));
              } else {
                for (int xo = x_lo; xo < x_hi; ++xo) r[xo] = src[xo * s + kw - p];
              }
              std::fill(r + std::max(x_hi, x_lo), r + ow, Real(0));
            }
          }
        }
      }
    }
  }
}

template <typename Real>
void col2im_add(const ConvGeometry& g, const Real* col, int z0, int z1, Real* x) {
  const int k = g.kernel, s = g.stride, p = g.pad();
  const int oh = g.out_height(), ow = g.out_width();
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  const std::size_t no = plane * (z1 - z0);
  const Real* src_row = col;
  for (int c = 0; c < g.in_channels; ++c) {
    Real* xc = x + static_cast<std::size_t>(c) * g.in_spatial();
    for (int kd = 0; kd < k; ++kd) {
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw, src_row += no) {
          int x_lo, x_hi;
          valid_range(ow, g.width, kw, p, s, x_lo, x_hi);
          for (int z = z0; z < z1; ++z) {
            const int iz = z * s + kd - p;
            if (iz < 0 || iz >= g.depth) continue;
            for (int y = 0; y < oh; ++y) {
              const int iy = y * s + kh - p;
              if (iy < 0 || iy >= g.height) continue;
              const Real* r = src_row + static_cast<std::size_t>(z - z0) * plane + static_cast<std::size_t>(y) * ow;
              Real* dst = xc + (static_cast<std::size_t>(iz) * g.height + iy) * g.width;
              for (int xo = x_lo; xo < x_hi; ++xo) dst[xo * s + kw - p] += r[xo];
            }
          }
        }
      }
    }
  }
}

// Output planes per column block; keeps a block near 256K scalars so it
// stays cache resident.
int slab_planes(const ConvGeometry& g) {
  const std::size_t plane = static_cast<std::size_t>(g.out_height()) * g.out_width();
  const std::size_t per_plane = plane * g.patch_size();
  const std::size_t target = 256 * 1024;
  return static_cast<int>(std::clamp<std::size_t>(target / std::max<std::size_t>(per_plane, 1), 1,
                                                  static_cast<std::size_t>(g.out_depth())));
}

template <typename Real>
using Strided = Eigen::Map<RowMat<Real>, 0, Eigen::OuterStride<>>;
template <typename Real>
using ConstStrided = Eigen::Map<const RowMat<Real>, 0, Eigen::OuterStride<>>;

}  // namespace

template <typename Real>
void conv3d_forward(const ConvGeometry& g, const Real* x, const Real* weight, const Real* bias,
                    Real* out) {
  const auto K = static_cast<Eigen::Index>(g.patch_size());
  const auto N = static_cast<Eigen::Index>(g.out_spatial());
  Eigen::Map<const RowMat<Real>> w(weight, g.out_channels, K);
  Eigen::Map<RowMat<Real>> y(out, g.out_channels, N);
  if (g.pointwise()) {
    Eigen::Map<const RowMat<Real>> c(x, K, N);
    y.noalias() = w * c;
  } else if (g.stride == 1) {
    const PaddedLayout L(g);
    Real* xp = scratch<Real>(L.padded_size() * g.in_channels, 1);
    pad_input(g, L, x, xp);
    Real* yp = scratch<Real>(static_cast<std::size_t>(L.span) * g.out_channels, 2);
    const std::ptrdiff_t block = padded_block<Real>(g);
    Real* col = scratch<Real>(g.patch_size() * block, 0);
    for (std::ptrdiff_t m0 = 0; m0 < L.span; m0 += block) {
      const std::ptrdiff_t cols = std::min(block, L.span - m0);
      padded_cols(g, L, xp, m0, cols, col);
      Eigen::Map<const RowMat<Real>> c(col, K, cols);
      Strided<Real> yb(yp + m0, g.out_channels, cols, Eigen::OuterStride<>(L.span));
      yb.noalias() = w * c;
    }
    for (int o = 0; o < g.out_channels; ++o)
      for (int z = 0; z < g.depth; ++z)
        for (int yy = 0; yy < g.height; ++yy) {
          std::memcpy(out + ((static_cast<std::size_t>(o) * g.depth + z) * g.height + yy) * g.width,
                      yp + o * L.span + L.column(z, yy), sizeof(Real) * g.width);
        }
  } else {
    const int step = slab_planes(g);
    const auto plane = static_cast<Eigen::Index>(g.out_height()) * g.out_width();
    Real* buf = scratch<Real>(g.patch_size() * static_cast<std::size_t>(plane * step));
    for (int z0 = 0; z0 < g.out_depth(); z0 += step) {
      const int z1 = std::min(z0 + step, g.out_depth());
      const Eigen::Index cols = plane * (z1 - z0);
      im2col(g, x, z0, z1, buf);
      Eigen::Map<const RowMat<Real>> c(buf, K, cols);
      Strided<Real> yb(out + plane * z0, g.out_channels, cols, Eigen::OuterStride<>(N));
      yb.noalias() = w * c;
    }
  }
  if (bias) {
    for (int o = 0; o < g.out_channels; ++o) y.row(o).array() += bias[o];
  }
}

template <typename Real>
void conv3d_backward_input(const ConvGeometry& g, const Real* grad_out, const Real* weight,
                           Real* grad_x) {
  const auto K = static_cast<Eigen::Index>(g.patch_size());
  const auto N = static_cast<Eigen::Index>(g.out_spatial());
  Eigen::Map<const RowMat<Real>> w(weight, g.out_channels, K);
  if (g.pointwise()) {
    Eigen::Map<const RowMat<Real>> go(grad_out, g.out_channels, N);
    Eigen::Map<RowMat<Real>> gx(grad_x, K, N);
    gx.noalias() += w.transpose() * go;
    return;
  }
  if (g.stride == 1) {
    const PaddedLayout L(g);
    Real* gop = scratch<Real>(static_cast<std::size_t>(L.span) * g.out_channels, 1);
    std::fill(gop, gop + L.span * g.out_channels, Real(0));
    for (int o = 0; o < g.out_channels; ++o)
      for (int z = 0; z < g.depth; ++z)
        for (int yy = 0; yy < g.height; ++yy) {
          std::memcpy(gop + o * L.span + L.column(z, yy),
                      grad_out + ((static_cast<std::size_t>(o) * g.depth + z) * g.height + yy) * g.width,
                      sizeof(Real) * g.width);
        }
    const std::size_t ps = L.padded_size();
    Real* gxp = scratch<Real>(ps * g.in_channels, 2);
    std::fill(gxp, gxp + ps * g.in_channels, Real(0));
    const std::ptrdiff_t block = padded_block<Real>(g);
    Real* gcol = scratch<Real>(g.patch_size() * block, 0);
    for (std::ptrdiff_t m0 = 0; m0 < L.span; m0 += block) {
      const std::ptrdiff_t cols = std::min(block, L.span - m0);
      ConstStrided<Real> go(gop + m0, g.out_channels, cols, Eigen::OuterStride<>(L.span));
      Eigen::Map<RowMat<Real>> gc(gcol, K, cols);
      gc.noalias() = w.transpose() * go;
      const Real* row = gcol;
      for (int c = 0; c < g.in_channels; ++c) {
        Real* base = gxp + c * ps + L.first + m0;
        for (std::ptrdiff_t off : L.offsets) {
          Eigen::Map<Eigen::Array<Real, Eigen::Dynamic, 1>>(base + off, cols) +=
              Eigen::Map<const Eigen::Array<Real, Eigen::Dynamic, 1>>(row, cols);
          row += cols;
        }
      }
    }
    for (int c = 0; c < g.in_channels; ++c)
      for (int z = 0; z < g.depth; ++z)
        for (int yy = 0; yy < g.height; ++yy) {
          Real* dst = grad_x + ((static_cast<std::size_t>(c) * g.depth + z) * g.height + yy) * g.width;
          const Real* src = gxp + c * ps + (static_cast<std::size_t>(z + L.p) * L.hp + (yy + L.p)) * L.wp + L.p;
          for (int xx = 0; xx < g.width; ++xx) dst[xx] += src[xx];
        }
    return;
  }
  const int step = slab_planes(g);
  const auto plane = static_cast<Eigen::Index>(g.out_height()) * g.out_width();
  Real* buf = scratch<Real>(g.patch_size() * static_cast<std::size_t>(plane * step));
  for (int z0 = 0; z0 < g.out_depth(); z0 += step) {
    const int z1 = std::min(z0 + step, g.out_depth());
    const Eigen::Index cols = plane * (z1 - z0);
    ConstStrided<Real> go(grad_out + plane * z0, g.out_channels, cols, Eigen::OuterStride<>(N));
    Eigen::Map<RowMat<Real>> gcol(buf, K, cols);
    gcol.noalias() = w.transpose() * go;
    col2im_add(g, buf, z0, z1, grad_x);
  }
}

template <typename Real>
void conv3d_backward_params(const ConvGeometry& g, const Real* x, const Real* grad_out,
                            Real* grad_weight, Real* grad_bias) {
  const auto K = static_cast<Eigen::Index>(g.patch_size());
  const auto N = static_cast<Eigen::Index>(g.out_spatial());
  Eigen::Map<const RowMat<Real>> go_all(grad_out, g.out_channels, N);
  if (grad_weight) {
    Eigen::Map<RowMat<Real>> gw(grad_weight, g.out_channels, K);
    if (g.pointwise()) {
      Eigen::Map<const RowMat<Real>> c(x, K, N);
      gw.noalias() += go_all * c.transpose();
    } else if (g.stride == 1) {
      const PaddedLayout L(g);
      Real* xp = scratch<Real>(L.padded_size() * g.in_channels, 1);
      pad_input(g, L, x, xp);
      Real* gop = scratch<Real>(static_cast<std::size_t>(L.span) * g.out_channels, 2);
      std::fill(gop, gop + L.span * g.out_channels, Real(0));
      for (int o = 0; o < g.out_channels; ++o)
        for (int z = 0; z < g.depth; ++z)
          for (int yy = 0; yy < g.height; ++yy) {
            std::memcpy(gop + o * L.span + L.column(z, yy),
                        grad_out + ((static_cast<std::size_t>(o) * g.depth + z) * g.height + yy) * g.width,
                        sizeof(Real) * g.width);
          }
      const std::ptrdiff_t block = padded_block<Real>(g);
      Real* col = scratch<Real>(g.patch_size() * block, 0);
      for (std::ptrdiff_t m0 = 0; m0 < L.span; m0 += block) {
        const std::ptrdiff_t cols = std::min(block, L.span - m0);
        padded_cols(g, L, xp, m0, cols, col);
        Eigen::Map<const RowMat<Real>> c(col, K, cols);
        ConstStrided<Real> go(gop + m0, g.out_channels, cols, Eigen::OuterStride<>(L.span));
        gw.noalias() += go * c.transpose();
      }
    } else {
      const int step = slab_planes(g);
      const auto plane = static_cast<Eigen::Index>(g.out_height()) * g.out_width();
      Real* buf = scratch<Real>(g.patch_size() * static_cast<std::size_t>(plane * step));
      for (int z0 = 0; z0 < g.out_depth(); z0 += step) {
        const int z1 = std::min(z0 + step, g.out_depth());
        const Eigen::Index cols = plane * (z1 - z0);
        im2col(g, x, z0, z1, buf);
        Eigen::Map<const RowMat<Real>> c(buf, K, cols);
        ConstStrided<Real> go(grad_out + plane * z0, g.out_channels, cols, Eigen::OuterStride<>(N));
        gw.noalias() += go * c.transpose();
      }
    }
  }
  // Plain sequential sums: Eigen's vectorised reduction peels by address,
  // which makes the result depend on where grad_out happens to live.
  if (grad_bias) {
    const std::size_t n = g.out_spatial();
    for (int o = 0; o < g.out_channels; ++o) {
      const Real* row = grad_out + static_cast<std::size_t>(o) * n;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += row[i];
      grad_bias[o] += static_cast<Real>(acc);
    }
  }
}

template void conv3d_forward<float>(const ConvGeometry&, const float*, const float*, const float*, float*);
template void conv3d_forward<double>(const ConvGeometry&, const double*, const double*, const double*, double*);
template void conv3d_backward_input<float>(const ConvGeometry&, const float*, const float*, float*);
template void conv3d_backward_input<double>(const ConvGeometry&, const double*, const double*, double*);
template void conv3d_backward_params<float>(const ConvGeometry&, const float*, const float*, float*, float*);
template void conv3d_backward_params<double>(const ConvGeometry&, const double*, const double*, double*, double*);

}  // namespace vndiff::kernels
