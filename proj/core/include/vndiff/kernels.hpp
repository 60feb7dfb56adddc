#pragma once

#include <cstddef>

namespace vndiff::kernels {

// Geometry of a cubic-kernel 3D convolution with symmetric zero padding
// k / 2 on every face.
struct ConvGeometry {
  int in_channels = 0;
  int out_channels = 0;
  int depth = 0, height = 0, width = 0;  // input extents
  int kernel = 3;
  int stride = 1;

  int pad() const { return kernel / 2; }
  int out_depth() const { return (depth + 2 * pad() - kernel) / stride + 1; }
  int out_height() const { return (height + 2 * pad() - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad() - kernel) / stride + 1; }
  std::size_t in_spatial() const {
    return static_cast<std::size_t>(depth) * height * width;
  }
  std::size_t out_spatial() const {
    return static_cast<std::size_t>(out_depth()) * out_height() * out_width();
  }
  std::size_t patch_size() const {
    return static_cast<std::size_t>(in_channels) * kernel * kernel * kernel;
  }
  // 1x1x1 stride-1 convolutions read the input directly as the column matrix.
  bool pointwise() const { return kernel == 1 && stride == 1; }
};

// weight: [out, in, k, k, k]; bias: [out] (may be null).
// out = weight * im2col(x) + bias.
template <typename Real>
void conv3d_forward(const ConvGeometry& g, const Real* x, const Real* weight, const Real* bias,
                    Real* out);

// grad_x += d/dx. grad_x must be pre-sized to the input.
template <typename Real>
void conv3d_backward_input(const ConvGeometry& g, const Real* grad_out, const Real* weight,
                           Real* grad_x);

// grad_weight += grad_out * col^T; grad_bias += row sums (either may be null).
template <typename Real>
void conv3d_backward_params(const ConvGeometry& g, const Real* x, const Real* grad_out,
                            Real* grad_weight, Real* grad_bias);

}  // namespace vndiff::kernels
