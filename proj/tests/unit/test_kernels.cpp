#include <gtest/gtest.h>

#include <cstring>
#include <random>
#include <vector>

#include "vndiff/kernels.hpp"

using vndiff::kernels::ConvGeometry;

namespace {

// Direct seven-loop convolution used as the reference.
std::vector<double> naive_forward(const ConvGeometry& g, const std::vector<double>& x,
                                  const std::vector<double>& w, const std::vector<double>& b) {
  const int od = g.out_depth(), oh = g.out_height(), ow = g.out_width(), k = g.kernel, p = g.pad();
  std::vector<double> y(static_cast<std::size_t>(g.out_channels) * od * oh * ow, 0.0);
  for (int o = 0; o < g.out_channels; ++o)
    for (int z = 0; z < od; ++z)
      for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = b.empty() ? 0.0 : b[o];
          for (int c = 0; c < g.in_channels; ++c)
            for (int a = 0; a < k; ++a)
              for (int bb = 0; bb < k; ++bb)
                for (int q = 0; q < k; ++q) {
                  const int iz = z * g.stride + a - p, iy = yy * g.stride + bb - p, ix = xx * g.stride + q - p;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= g.depth || iy >= g.height || ix >= g.width) continue;
                  acc += w[((((o * g.in_channels) + c) * k + a) * k + bb) * k + q] *
                         x[((c * g.depth + iz) * g.height + iy) * g.width + ix];
                }
          y[((o * od + z) * oh + yy) * ow + xx] = acc;
        }
  return y;
}

std::vector<double> random_vec(std::size_t n, std::mt19937& gen) {
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& e : v) e = d(gen);
  return v;
}

struct Case {
  int ci, co, d, h, w, k, s;
};

class ConvKernel : public ::testing::TestWithParam<Case> {};

}  // namespace

TEST_P(ConvKernel, MatchesDirectConvolutionAndItsAdjoints) {
  const Case c = GetParam();
  ConvGeometry g{c.ci, c.co, c.d, c.h, c.w, c.k, c.s};
  std::mt19937 gen(7);
  auto x = random_vec(g.in_spatial() * c.ci, gen);
  auto w = random_vec(g.patch_size() * c.co, gen);
  auto b = random_vec(c.co, gen);
  auto y_ref = naive_forward(g, x, w, b);
  std::vector<double> y(y_ref.size());
  vndiff::kernels::conv3d_forward(g, x.data(), w.data(), b.data(), y.data());
  for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y[i], y_ref[i], 1e-10) << i;

  // Adjoint identities against the linear map: <g_out, A x> = <A^T g_out, x>,
  // and the weight gradient is linear in w with the same pairing.
  auto go = random_vec(y.size(), gen);
  std::vector<double> gx(x.size(), 0.0);
  vndiff::kernels::conv3d_backward_input(g, go.data(), w.data(), gx.data());
  auto y0 = naive_forward(g, x, w, {});
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < y0.size(); ++i) lhs += go[i] * y0[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += gx[i] * x[i];
  EXPECT_NEAR(lhs, rhs, 1e-9 * (1 + std::abs(lhs)));

  std::vector<double> gw(w.size(), 0.0), gb(c.co, 0.0);
  vndiff::kernels::conv3d_backward_params(g, x.data(), go.data(), gw.data(), gb.data());
  double rhs_w = 0;
  for (std::size_t i = 0; i < w.size(); ++i) rhs_w += gw[i] * w[i];
  EXPECT_NEAR(lhs, rhs_w, 1e-9 * (1 + std::abs(lhs)));
  const std::size_t osp = y.size() / c.co;
  for (int o = 0; o < c.co; ++o) {
    double s = 0;
    for (std::size_t i = 0; i < osp; ++i) s += go[o * osp + i];
    EXPECT_NEAR(gb[o], s, 1e-10);
  }

  // Backward passes accumulate into their outputs.
  std::vector<double> gx2 = gx;
  vndiff::kernels::conv3d_backward_input(g, go.data(), w.data(), gx2.data());
  for (std::size_t i = 0; i < gx.size(); ++i) ASSERT_NEAR(gx2[i], 2 * gx[i], 1e-10);
}

INSTANTIATE_TEST_SUITE_P(Geometries, ConvKernel,
                         ::testing::Values(Case{2, 3, 5, 6, 7, 3, 1}, Case{3, 2, 8, 8, 8, 3, 2},
                                           Case{4, 5, 3, 4, 5, 1, 1}, Case{1, 4, 7, 5, 6, 3, 2},
                                           Case{3, 3, 1, 1, 1, 3, 1}, Case{16, 8, 12, 12, 12, 3, 1},
                                           Case{2, 2, 4, 4, 4, 1, 2}));

// Results must not depend on buffer addresses, or training stops being
// reproducible once the heap layout changes.
TEST(ConvKernelFloat, IndependentOfBufferAlignment) {
  const ConvGeometry g{4, 8, 8, 8, 8, 3, 1};
  std::mt19937 gen(1);
  std::normal_distribution<float> d;
  auto fill = [&](std::size_t n) {
    std::vector<float> v(n);
    for (float& x : v) x = d(gen);
    return v;
  };
  const auto x = fill(g.in_channels * g.in_spatial());
  const auto w = fill(g.out_channels * g.patch_size());
  const auto go = fill(g.out_channels * g.out_spatial());
  std::vector<float> gw_ref(w.size(), 0.0f), gb_ref(8, 0.0f);
  vndiff::kernels::conv3d_backward_params(g, x.data(), go.data(), gw_ref.data(), gb_ref.data());
  for (std::size_t shift = 1; shift < 8; ++shift) {
    std::vector<float> xs(x.size() + shift), gos(go.size() + shift);
    std::memcpy(xs.data() + shift, x.data(), x.size() * sizeof(float));
    std::memcpy(gos.data() + shift, go.data(), go.size() * sizeof(float));
    std::vector<float> gw(w.size(), 0.0f), gb(8, 0.0f);
    vndiff::kernels::conv3d_backward_params(g, xs.data() + shift, gos.data() + shift, gw.data(), gb.data());
    EXPECT_EQ(gw, gw_ref) << shift;
    EXPECT_EQ(gb, gb_ref) << shift;
  }
}
