#include "vndiff/graph.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "vndiff/error.hpp"
#include "vndiff/kernels.hpp"

namespace vndiff {

template <typename Real>
Var Graph<Real>::push(Tensor<Real> value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), {}, requires_grad && recording(), {}});
  return Var{nodes_.size() - 1};
}

template <typename Real>
bool Graph<Real>::any_grad(std::initializer_list<Var> vars) const {
  if (!recording()) return false;
  for (Var v : vars) {
    if (v.valid() && nodes_[v.id].requires_grad) return true;
  }
  return false;
}

template <typename Real>
Tensor<Real>& Graph<Real>::grad_of(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad = Tensor<Real>(n.value.shape());
  return n.grad;
}

template <typename Real>
Var Graph<Real>::constant(Tensor<Real> value) {
  return push(std::move(value), false);
}

template <typename Real>
Var Graph<Real>::parameter(Parameter<Real>& p) {
  Var v = push(p.value, p.requires_grad);
  if (nodes_[v.id].requires_grad) {
    Parameter<Real>* target = &p;
    nodes_[v.id].backward = [this, v, target] {
      if (target->grad.empty()) target->zero_grad();
      target->grad += nodes_[v.id].grad;
    };
  }
  return v;
}

template <typename Real>
void Graph<Real>::backward(Var out) {
  if (!recording()) throw ContractViolation("backward() on a graph built without gradients");
  Node& root = nodes_[out.id];
  if (root.value.size() != 1) throw ShapeError("backward() needs a single-element output");
  if (!root.requires_grad) return;
  grad_of(out).fill(Real(1));
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward();
  }
}

template <typename Real>
Var Graph<Real>::conv3d(Var x, Var weight, Var bias, int stride) {
  const Shape& xs = value(x).shape();
  const Shape& ws = value(weight).shape();
  if (xs.rank() != 4 || ws.rank() != 5 || ws[1] != xs[0] || ws[2] != ws[3] || ws[3] != ws[4]) {
    throw ShapeError("conv3d: input " + xs.str() + " incompatible with weight " + ws.str());
  }
  kernels::ConvGeometry geo;
  geo.in_channels = xs[0];
  geo.out_channels = ws[0];
  geo.depth = xs[1];
  geo.height = xs[2];
  geo.width = xs[3];
  geo.kernel = ws[2];
  geo.stride = stride;
  Tensor<Real> out(Shape{geo.out_channels, geo.out_depth(), geo.out_height(), geo.out_width()});
  const Real* b = bias.valid() ? value(bias).data() : nullptr;
  kernels::conv3d_forward(geo, value(x).data(), value(weight).data(), b, out.data());

  Var y = push(std::move(out), any_grad({x, weight, bias}));
  if (nodes_[y.id].requires_grad) {
    nodes_[y.id].backward = [this, geo, x, weight, bias, y] {
      const Real* go = nodes_[y.id].grad.data();
      if (requires_grad(x)) {
        kernels::conv3d_backward_input(geo, go, value(weight).data(), grad_of(x).data());
      }
      const bool gw = requires_grad(weight);
      const bool gb = bias.valid() && requires_grad(bias);
      if (gw || gb) {
        kernels::conv3d_backward_params(geo, value(x).data(), go, gw ? grad_of(weight).data() : nullptr,
                                        gb ? grad_of(bias).data() : nullptr);
      }
    };
  }
  return y;
}

template <typename Real>
Var Graph<Real>::group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
  const Tensor<Real>& xv = value(x);
  const int channels = xv.shape().channels();
  if (groups <= 0 || channels % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  const std::size_t spatial = xv.shape().spatial_size();
  const int per_group = channels / groups;
  const std::size_t group_len = spatial * per_group;

  std::vector<double> mean(groups), rstd(groups);
  Tensor<Real> out(xv.shape());
  const Real* g = value(gamma).data();
  const Real* bt = value(beta).data();
  for (int gi = 0; gi < groups; ++gi) {
    const Real* src = xv.data() + gi * group_len;
    double s = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < group_len; ++i) s += src[i];
    const double m = s / static_cast<double>(group_len);
    for (std::size_t i = 0; i < group_len; ++i) {
      const double d = src[i] - m;
      ss += d * d;
    }
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(group_len) + eps);
    mean[gi] = m;
    rstd[gi] = r;
    for (int cc = 0; cc < per_group; ++cc) {
      const int c = gi * per_group + cc;
      const Real* xc = src + cc * spatial;
      Real* yc = out.data() + c * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        yc[i] = static_cast<Real>((xc[i] - m) * r) * g[c] + bt[c];
      }
    }
  }

  Var y = push(std::move(out), any_grad({x, gamma, beta}));
  if (nodes_[y.id].requires_grad) {
    nodes_[y.id].backward = [this, x, gamma, beta, y, groups, per_group, spatial, group_len,
                             mean = std::move(mean), rstd = std::move(rstd)] {
      const Real* gy = nodes_[y.id].grad.data();
      const Real* xs = value(x).data();
      const Real* g = value(gamma).data();
      Real* gg = requires_grad(gamma) ? grad_of(gamma).data() : nullptr;
      Real* gb = requires_grad(beta) ? grad_of(beta).data() : nullptr;
      Real* gx = requires_grad(x) ? grad_of(x).data() : nullptr;
      for (int gi = 0; gi < groups; ++gi) {
        const double m = mean[gi], r = rstd[gi];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int cc = 0; cc < per_group; ++cc) {
          const int c = gi * per_group + cc;
          const std::size_t off = static_cast<std::size_t>(c) * spatial;
          double dg = 0.0, db = 0.0;
          for (std::size_t i = 0; i < spatial; ++i) {
            const double xhat = (xs[off + i] - m) * r;
            const double dy = gy[off + i];
            dg += dy * xhat;
            db += dy;
            sum_dxhat += dy * g[c];
            sum_dxhat_xhat += dy * g[c] * xhat;
          }
          if (gg) gg[c] += static_cast<Real>(dg);
          if (gb) gb[c] += static_cast<Real>(db);
        }
        if (!gx) continue;
        const double inv_n = 1.0 / static_cast<double>(group_len);
        for (int cc = 0; cc < per_group; ++cc) {
          const int c = gi * per_group + cc;
          const std::size_t off = static_cast<std::size_t>(c) * spatial;
          for (std::size_t i = 0; i < spatial; ++i) {
            const double xhat = (xs[off + i] - m) * r;
            const double dxhat = static_cast<double>(gy[off + i]) * g[c];
            gx[off + i] += static_cast<Real>(
                r * (dxhat - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n));
          }
        }
      }
    };
  }
  return y;
}

template <typename Real>
Var Graph<Real>::silu(Var x) {
  const Tensor<Real>& xv = value(x);
  Tensor<Real> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const Real v = xv[i];
    out[i] = v / (Real(1) + std::exp(-v));
  }
  Var y = push(std::move(out), any_grad({x}));
  if (nodes_[y.id].requires_grad) {
    nodes_[y.id].backward = [this, x, y] {
      const Tensor<Real>& xv = value(x);
      const Tensor<Real>& gy = nodes_[y.id].grad;
      Tensor<Real>& gx = grad_of(x);
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const Real s = Real(1) / (Real(1) + std::exp(-xv[i]));
        gx[i] += gy[i] * s * (Real(1) + xv[i] * (Real(1) - s));
      }
    };
  }
  return y;
}

template <typename Real>
Var Graph<Real>::add(Var a, Var b) {
  require_same_shape(value(a).shape(), value(b).shape(), "add");
  Tensor<Real> out = value(a);
  out += value(b);
  Var y = push(std::move(out), any_grad({a, b}));
  if (nodes_[y.id].requires_grad) {
    nodes_[y.id].backward = [this, a, b, y] {
      if (requires_grad(a)) grad_of(a) += nodes_[y.id].grad;
      if (requires_grad(b)) grad_of(b) += nodes_[y.id].grad;
    };
  }
  return y;
}

template <typename Real>
Var Graph<Real>::add_channel_bias(Var x, Var bias) {
  const Tensor<Real>& xv = value(x);
  const Tensor<Real>& bv = value(bias);
  const int channels = xv.shape().channels();
  if (bv.size() != static_cast<std::size_t>(channels)) {
    throw ShapeError("add_channel_bias: bias " + bv.shape().str() + " vs input " + xv.shape().str());
  }
  const std::size_t spatial = xv.shape().spatial_size();
  Tensor<Real> out = xv;
  for (int c = 0; c < channels; ++c) {
    Real* row = out.data() + c * spatial;
    for (std::size_t i = 0; i < spatial; ++i) row[i] += bv[c];
  }
  Var y = push(std::move(out), any_grad({x, bias}));
  if (nodes_[y.id].requires_grad) {
    nodes_[y.id].backward = [this, x, bias, y, channels, spatial] {
      const Tensor<Real>& gy = nodes_[y.id].grad;
      if (requires_grad(x)) grad_of(x) += gy;
      if (requires_grad(bias)) {
        Tensor<Real>& gb = grad_of(bias);
        for (int c = 0; c < channels; ++c) {
          double s = 0.0;
          const Real* row = gy.data() + c * spatial;
          for (std::size_t i = 0; i < spatial; ++i) s += row[i];
          gb[c] += static_cast<Real>(s);
        }
      }
    };
  }
  return y;
}

template <typename Real>
Var Graph<Real>::concat_channels(Var a, Var b) {
  const Shape& as = value(a).shape();
  const Shape& bs = value(b).shape();
  if (as.rank() != 4 || bs.rank() != 4 || as[1] != bs[1] || as[2] != bs[2] || as[3] != bs[3]) {
    throw ShapeError("concat_channels: " + as.str() + " vs " + bs.str());
  }
  Tensor<Real> out(Shape{as[0] + bs[0], as[1], as[2], as[3]});
  std::copy(value(a).data(), value(a).data() + value(a).size(), out.data());
  std::copy(value(b).data(), value(b).data() + value(b).size(), out.data() + value(a).size());
  Var y = push(std::move(out), any_grad({a, b}));
  if (nodes_[y.id].requires_grad) {
    nodes_[y.id].backward = [this, a, b, y] {
      const Real* gy = nodes_[y.id].grad.data();
      const std::size_t na = value(a).size();
      if (requires_grad(a)) {
        Tensor<Real>& ga = grad_of(a);
        for (std::size_t i = 0; i < na; ++i) ga[i] += gy[i];
      }
      if (requires_grad(b)) {
        Tensor<Real>& gb = grad_of(b);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[na + i];
      }
    };
  }
  return y;
}

template <typename Real>
Var Graph<Real>::upsample_nearest2(Var x) {
  const Shape& s = value(x).shape();
  const int c = s[0], d = s[1], h = s[2], w = s[3];
  Tensor<Real> out(Shape{c, 2 * d, 2 * h, 2 * w});
  const Tensor<Real>& xv = value(x);
  for (int ch = 0; ch < c; ++ch)
    for (int z = 0; z < 2 * d; ++z)
      for (int y = 0; y < 2 * h; ++y) {
        Real* dst = &out.at(ch, z, y, 0);
        const Real* src = xv.data() + ((static_cast<std::size_t>(ch) * d + z / 2) * h + y / 2) * w;
        for (int xo = 0; xo < 2 * w; ++xo) dst[xo] = src[xo / 2];
      }
  Var y = push(std::move(out), any_grad({x}));
  if (nodes_[y.id].requires_grad) {
    nodes_[y.id].backward = [this, x, y, c, d, h, w] {
      const Tensor<Real>& gy = nodes_[y.id].grad;
      Tensor<Real>& gx = grad_of(x);
      for (int ch = 0; ch < c; ++ch)
        for (int z = 0; z < 2 * d; ++z)
          for (int yy = 0; yy < 2 * h; ++yy) {
            const Real* src = gy.data() + ((static_cast<std::size_t>(ch) * 2 * d + z) * 2 * h + yy) * 2 * w;
            Real* dst = gx.data() + ((static_cast<std::size_t>(ch) * d + z / 2) * h + yy / 2) * w;
            for (int xo = 0; xo < 2 * w; ++xo) dst[xo / 2] += src[xo];
          }
    };
  }
  return y;
}

template <typename Real>
Var Graph<Real>::linear(Var x, Var weight, Var bias) {
  const Tensor<Real>& xv = value(x);
  const Tensor<Real>& wv = value(weight);
  const int out_dim = wv.shape()[0], in_dim = wv.shape()[1];
  if (xv.size() != static_cast<std::size_t>(in_dim)) {
    throw ShapeError("linear: input " + xv.shape().str() + " vs weight " + wv.shape().str());
  }
  Tensor<Real> out(Shape{out_dim});
  for (int o = 0; o < out_dim; ++o) {
    Real s = bias.valid() ? value(bias)[o] : Real(0);
    const Real* row = wv.data() + static_cast<std::size_t>(o) * in_dim;
    for (int i = 0; i < in_dim; ++i) s += row[i] * xv[i];
    out[o] = s;
  }
  Var y = push(std::move(out), any_grad({x, weight, bias}));
  if (nodes_[y.id].requires_grad) {
    nodes_[y.id].backward = [this, x, weight, bias, y, out_dim, in_dim] {
      const Tensor<Real>& gy = nodes_[y.id].grad;
      const Tensor<Real>& xv = value(x);
      const Tensor<Real>& wv = value(weight);
      if (requires_grad(x)) {
        Tensor<Real>& gx = grad_of(x);
        for (int o = 0; o < out_dim; ++o)
          for (int i = 0; i < in_dim; ++i) gx[i] += gy[o] * wv[static_cast<std::size_t>(o) * in_dim + i];
      }
      if (requires_grad(weight)) {
        Tensor<Real>& gw = grad_of(weight);
        for (int o = 0; o < out_dim; ++o)
          for (int i = 0; i < in_dim; ++i) gw[static_cast<std::size_t>(o) * in_dim + i] += gy[o] * xv[i];
      }
      if (bias.valid() && requires_grad(bias)) grad_of(bias) += gy;
    };
  }
  return y;
}

template <typename Real>
Var Graph<Real>::mse(Var pred, const Tensor<Real>& target) {
  const Tensor<Real>& pv = value(pred);
  require_same_shape(pv.shape(), target.shape(), "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double d = static_cast<double>(pv[i]) - target[i];
    s += d * d;
  }
  const double n = static_cast<double>(pv.size());
  Var y = push(Tensor<Real>(Shape{1}, static_cast<Real>(s / n)), any_grad({pred}));
  if (nodes_[y.id].requires_grad) {
    nodes_[y.id].backward = [this, pred, y, target, n] {
      const Real g = nodes_[y.id].grad[0];
      const Tensor<Real>& pv = value(pred);
      Tensor<Real>& gp = grad_of(pred);
      const Real scale = static_cast<Real>(2.0 / n) * g;
      for (std::size_t i = 0; i < pv.size(); ++i) gp[i] += scale * (pv[i] - target[i]);
    };
  }
  return y;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace vndiff
